"""Online streaming inference.

Per frame: match objects to persistent slots, assemble the padded tensor,
record centers in the motion memory, denoise conditioned on the previous
frame's output (zeros for a first frame) with optional motion injection, then
read out. Independent streams can be advanced together so network calls are
batched; each keeps its own state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import RunConfig
from .diffusion import NoiseSchedule, denoise_loop
from .graph import AdjacencyTensor, assemble_adjacency
from .readout import ReadoutHeads, ReadoutOutput, SceneGraphPrediction, to_prediction
from .synthetic import FrameObservation
from .temporal import OnlineState, build_speed_matrix, detect_new_objects, refresh_padding
from .unet import DenoiserNet


def stream_seed(seed: int, stream_id: int) -> int:
    return int(np.random.SeedSequence([seed, stream_id, 0x5EED]).generate_state(1)[0])


@dataclass
class FrameOutput:
    adjacency: AdjacencyTensor  # denoised tensor with slot bookkeeping
    speed: torch.Tensor | None
    prediction: SceneGraphPrediction | None


class StreamEngine:
    def __init__(
        self,
        config: RunConfig,
        denoiser: DenoiserNet,
        schedule: NoiseSchedule,
        heads: ReadoutHeads | None = None,
        steps: int | None = None,
    ) -> None:
        self.config = config
        self.denoiser = denoiser.eval()
        self.schedule = schedule
        self.heads = heads.eval() if heads is not None else None
        self.steps = config.diffusion.reverse_steps_at_inference if steps is None else steps

    def new_state(self, stream_id: int = 0) -> OnlineState:
        cfg = self.config
        return OnlineState(
            cfg.graph.n_max, cfg.denoiser.d_embed, cfg.scene.d_obj, cfg.temporal.history, cfg.scene.frame_interval,
            seed=stream_seed(cfg.seed, stream_id),
        )

    def prepare(self, state: OnlineState, obs: FrameObservation) -> tuple[AdjacencyTensor, torch.Tensor | None]:
        """Slot matching, tensor assembly and memory update for one frame (no network call)."""
        cfg = self.config
        t = int(obs.frame_index)
        if t <= state.last_frame:
            raise ValueError(f"frame {t} arrived after frame {state.last_frame}; streams must be strictly ordered")
        occupied = state.occupied()
        match = detect_new_objects(
            obs.object_features, state.slot_features[occupied], cfg.temporal.new_object_threshold, prev_slots=occupied
        )
        keep = sorted(match.assignment)
        kept_slots = [match.assignment[o] for o in keep]
        for s in set(occupied) - set(kept_slots):
            state.slot_ids[s] = -1
            state.slot_features[s] = 0.0
            state.memory.clear(s)
        adj = assemble_adjacency(
            obs.subset(keep), cfg.graph.n_max, state.rng, d_box=cfg.graph.d_box, toggles=cfg.graph.toggles,
            slots=kept_slots, identities=[int(state.slot_ids[s]) for s in kept_slots],
        )
        adj.slot_index = [keep[k] if k >= 0 else -1 for k in adj.slot_index]
        new_ids = list(range(state.next_identity, state.next_identity + len(match.new_objects)))
        adj = refresh_padding(adj, match.new_objects, obs, identities=new_ids, d_box=cfg.graph.d_box,
                              toggles=cfg.graph.toggles)
        state.next_identity += len(new_ids)
        for s, ident in enumerate(adj.slot_map):
            if ident is None:
                continue
            o = adj.slot_index[s]
            state.slot_ids[s] = ident
            state.slot_features[s] = obs.object_features[o]
            x, y, w, h = (float(v) for v in obs.boxes[o])
            state.memory.record(s, t, (x + w / 2, y + h / 2))
        speed = None
        if cfg.temporal.motion:
            valid = [s for s, ident in enumerate(adj.slot_map) if ident is not None]
            speed = build_speed_matrix(state.memory, valid, cfg.graph.n_max, t, dtype=adj.data.dtype)
        return adj, speed

    @torch.no_grad()
    def step(self, states: Sequence[OnlineState], frames: Sequence[FrameObservation],
             stream_ids: Sequence[int] | None = None) -> list[FrameOutput]:
        """Advance each stream by one frame; network calls are batched across streams."""
        prepared = [self.prepare(st, obs) for st, obs in zip(states, frames, strict=True)]
        noisy = torch.stack([adj.data for adj, _ in prepared])
        cond = None
        if self.config.temporal.conditioning:
            cond = torch.stack([st.condition() for st in states])
        motion = None
        if self.config.temporal.motion:
            motion = torch.stack([v for _, v in prepared])
        clean = denoise_loop(noisy, cond, self.schedule, self.denoiser, self.steps,
                             motion=motion, motion_scale=self.config.temporal.motion_scale)
        outputs = []
        readout = None
        if self.heads is not None:
            masks = torch.stack([adj.slot_mask() for adj, _ in prepared])
            readout = self.heads(clean, masks)
        for b, (st, obs, (adj, v)) in enumerate(zip(states, frames, prepared)):
            st.prev_clean = clean[b].clone()
            st.has_prev = True
            st.last_frame = int(obs.frame_index)
            st.frames_seen += 1
            out_adj = AdjacencyTensor(clean[b].clone(), list(adj.slot_map), adj.frame_index, list(adj.slot_index))
            pred = None
            if readout is not None:
                single = ReadoutOutput(readout.pred_logits[b], readout.obj_logits[b], readout.boxes[b], readout.slot_mask[b])
                vid = -1 if stream_ids is None else int(stream_ids[b])
                pred = to_prediction(single, adj.frame_index, adj.slot_index, vid)
            outputs.append(FrameOutput(out_adj, v, pred))
        return outputs

    def run_streams(self, streams: Sequence[Sequence[FrameObservation]], stream_ids: Sequence[int] | None = None,
                    batch_size: int = 64) -> list[list[FrameOutput]]:
        """Process whole streams; streams are advanced in lockstep groups of ``batch_size``."""
        stream_ids = list(range(len(streams))) if stream_ids is None else list(stream_ids)
        results: list[list[FrameOutput]] = [[] for _ in streams]
        for lo in range(0, len(streams), batch_size):
            group = list(range(lo, min(lo + batch_size, len(streams))))
            states = {i: self.new_state(stream_ids[i]) for i in group}
            longest = max(len(streams[i]) for i in group)
            for pos in range(longest):
                active = [i for i in group if pos < len(streams[i])]
                outs = self.step([states[i] for i in active], [streams[i][pos] for i in active],
                                 [stream_ids[i] for i in active])
                for i, out in zip(active, outs):
                    results[i].append(out)
        return results


def infer_stream(engine: StreamEngine, frames: Iterable[FrameObservation], stream_id: int = 0,
                 state: OnlineState | None = None) -> Iterable[FrameOutput]:
    """Generator over one stream; never looks ahead of the current frame."""
    state = engine.new_state(stream_id) if state is None else state
    for obs in frames:
        yield engine.step([state], [obs], [stream_id])[0]
