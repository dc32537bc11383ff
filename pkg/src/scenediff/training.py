"""Two-stage training.

Stage 1 fits the denoiser on ground-truth tensors of consecutive clip frames
(conditioned on the previous clean frame, or unconditioned). Stage 2 freezes
it, caches its outputs on detector observations and fits the readout heads.
Both stages checkpoint every epoch and resume bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import RunConfig, config_from_dict
from .diffusion import NoiseSchedule, conditional_denoising_loss, denoising_loss, make_schedule
from .graph import assemble_gt_adjacency, pair_mask_from_slots, repad
from .pipeline import StreamEngine
from .readout import ReadoutHeads, Stage2Target, align_targets, stage2_loss
from .synthetic import ConfigError, Dataset
from .unet import DenoiserNet, parameter_checksum

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None) -> None:
        super().__init__(message)
        self.last_good = last_good


# --------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Data:
    """Ground-truth tensors per video with slots fixed by track identity."""

    videos: list[torch.Tensor]  # (F, N, N, D)
    slot_masks: list[torch.Tensor]  # (F, N)

    @property
    def num_frames(self) -> int:
        return sum(v.shape[0] for v in self.videos)


def build_stage1_data(dataset: Dataset, config: RunConfig) -> Stage1Data:
    n_max = config.graph.n_max
    gen = torch.Generator().manual_seed(config.stage1.seed)
    videos, masks = [], []
    for video in dataset.videos:
        slot_of: dict[int, int] = {}
        frames, fmasks = [], []
        for rec in video:
            for t in rec.gt.track_ids:
                slot_of.setdefault(int(t), len(slot_of))
            slots = [slot_of[int(t)] for t in rec.gt.track_ids]
            adj = assemble_gt_adjacency(rec.gt, None, n_max, gen, d_box=config.graph.d_box,
                                        toggles=config.graph.toggles, slots=slots)
            frames.append(adj.data)
            fmasks.append(adj.slot_mask())
        videos.append(torch.stack(frames))
        masks.append(torch.stack(fmasks))
    return Stage1Data(videos, masks)


def sample_clip(num_frames: int, length: int, gen: torch.Generator) -> list[int]:
    """Sorted random subset of frame positions (all of them when the video is short)."""
    if num_frames <= length:
        return list(range(num_frames))
    return sorted(torch.randperm(num_frames, generator=gen)[:length].tolist())


def epoch_pairs(data: Stage1Data, clip_length: int, gen: torch.Generator) -> list[tuple[int, int, int]]:
    """(video, frame, previous frame or -1) for one clip per video, shuffled."""
    pairs = []
    for v, frames in enumerate(data.videos):
        clip = sample_clip(frames.shape[0], clip_length, gen)
        for pos, f in enumerate(clip):
            pairs.append((v, f, clip[pos - 1] if pos else -1))
    order = torch.randperm(len(pairs), generator=gen).tolist()
    return [pairs[i] for i in order]


def frames_per_batch(config: RunConfig) -> int:
    return max(1, config.stage1.pairs_per_batch // (config.graph.n_max**2))


def _gather(data: Stage1Data, batch: list[tuple[int, int, int]], gen: torch.Generator | None):
    a0 = torch.stack([data.videos[v][f] for v, f, _ in batch])
    masks = torch.stack([data.slot_masks[v][f] for v, f, _ in batch])
    prev = torch.stack([data.videos[v][p] if p >= 0 else torch.zeros_like(data.videos[v][f]) for v, f, p in batch])
    prev_masks = torch.stack([data.slot_masks[v][p] if p >= 0 else torch.ones_like(masks[0]) for v, f, p in batch])
    has_prev = torch.tensor([p >= 0 for _, _, p in batch])
    if gen is not None:
        a0 = repad(a0, masks, gen)
        prev = torch.where(has_prev[:, None, None, None], repad(prev, prev_masks, gen), prev)
    return a0, prev, pair_mask_from_slots(masks)


def stage1_objective(net, schedule, a0, prev, mask, gen, conditioning: bool):
    if conditioning:
        return conditional_denoising_loss(a0, prev, net, schedule, gen, mask)
    return denoising_loss(a0, net, schedule, gen, mask)


def evaluation_batch(data: Stage1Data, config: RunConfig) -> list[tuple[int, int, int]]:
    """Fixed frames (with their previous frame) used for the logged evaluation loss."""
    pairs = [(v, f, f - 1) for v, frames in enumerate(data.videos) for f in range(frames.shape[0])]
    gen = torch.Generator().manual_seed(config.stage1.eval_seed)
    order = torch.randperm(len(pairs), generator=gen).tolist()[: config.stage1.eval_frames]
    return [pairs[i] for i in sorted(order)]


@torch.no_grad()
def evaluation_loss(net, schedule, data: Stage1Data, config: RunConfig, pairs=None) -> float:
    """Loss on a fixed frame set with a fixed noise stream, comparable across epochs."""
    pairs = evaluation_batch(data, config) if pairs is None else pairs
    gen = torch.Generator().manual_seed(config.stage1.eval_seed)
    was_training = net.training
    net.eval()
    total, count = 0.0, 0
    for lo in range(0, len(pairs), 64):
        batch = pairs[lo : lo + 64]
        a0, prev, mask = _gather(data, batch, gen)
        loss = stage1_objective(net, schedule, a0, prev, mask, gen, config.temporal.conditioning)
        total += float(loss) * len(batch)
        count += len(batch)
    net.train(was_training)
    return total / max(count, 1)


def build_denoiser(config: RunConfig, schedule: NoiseSchedule, seed: int) -> DenoiserNet:
    torch.manual_seed(seed)
    return DenoiserNet(config.denoiser, schedule)


def fit_input_whitening(net: DenoiserNet, data: Stage1Data, conditioning: bool) -> None:
    rows, conds = [], []
    for frames, masks in zip(data.videos, data.slot_masks):
        for f in range(frames.shape[0]):
            pm = pair_mask_from_slots(masks[f])
            rows.append(frames[f][pm])
            if conditioning and f > 0:
                conds.append(frames[f - 1][pm])
            else:
                conds.append(torch.zeros_like(frames[f][pm]))
    net.fit_whitening(torch.cat(rows), torch.cat(conds))


@dataclass
class Stage1Result:
    net: DenoiserNet
    schedule: NoiseSchedule
    checkpoint: Path | None
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)  # index 0 is before training


def _stage1_checkpoint(config, net, opt, gen, epoch, result, kind="stage1") -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        kind=kind,
        config=config.to_dict(),
        modules={"denoiser": ckpt_io.module_arrays(net)},
        meta={
            "epoch": epoch,
            "schedule_beta": [float(b) for b in net.schedule.beta],
            "step_losses": result.step_losses,
            "epoch_losses": result.epoch_losses,
            "eval_losses": result.eval_losses,
            "checksum": parameter_checksum(net),
        },
        optimizer=opt.state_dict() if opt is not None else None,
        rng={"train": ckpt_io.generator_state(gen)} if gen is not None else {},
    )


def train_stage1(
    dataset: Dataset,
    config: RunConfig,
    out_path: str | Path | None = None,
    *,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
    data: Stage1Data | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Stage1Result:
    """Optimize the denoiser; writes a checkpoint after every epoch when ``out_path`` is set.

    ``stop_after_epoch`` ends the run early (used to exercise resuming).
    """
    config.validate()
    s1 = config.stage1
    schedule = make_schedule(config.diffusion)
    data = build_stage1_data(dataset, config) if data is None else data
    net = build_denoiser(config, schedule, s1.seed)
    fit_input_whitening(net, data, config.temporal.conditioning)
    opt = torch.optim.Adam(net.parameters(), lr=s1.lr)
    gen = torch.Generator().manual_seed(s1.seed + 1)
    result = Stage1Result(net, schedule, Path(out_path) if out_path else None)
    eval_pairs = evaluation_batch(data, config)
    start_epoch = 0
    if resume_from is not None:
        ck = ckpt_io.load(resume_from)
        ckpt_io.load_module_arrays(net, ck.modules["denoiser"])
        opt.load_state_dict(ck.optimizer)
        ckpt_io.set_generator_state(gen, ck.rng["train"])
        result.step_losses = list(ck.meta["step_losses"])
        result.epoch_losses = list(ck.meta["epoch_losses"])
        result.eval_losses = list(ck.meta["eval_losses"])
        start_epoch = ck.meta["epoch"]
    else:
        result.eval_losses.append(evaluation_loss(net, schedule, data, config, eval_pairs))
    last_good = Path(resume_from) if resume_from else None
    fpb = frames_per_batch(config)
    net.train()
    for epoch in range(start_epoch, s1.epochs):
        pairs = epoch_pairs(data, s1.clip_length, gen)
        losses = []
        for lo in range(0, len(pairs), fpb):
            a0, prev, mask = _gather(data, pairs[lo : lo + fpb], gen)
            loss = stage1_objective(net, schedule, a0, prev, mask, gen, config.temporal.conditioning)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"stage-1 loss became {loss.item()} in epoch {epoch + 1}", last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        result.eval_losses.append(evaluation_loss(net, schedule, data, config, eval_pairs))
        log.info("stage1 epoch %d loss %.5f eval %.5f", epoch + 1, result.epoch_losses[-1], result.eval_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, result.eval_losses[-1])
        if out_path is not None:
            ckpt_io.save(_stage1_checkpoint(config, net, opt, gen, epoch + 1, result), out_path)
            last_good = Path(out_path)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    net.eval()
    return result


def stage1_key(config: RunConfig) -> str:
    """Serialized config minus the settings that do not affect stage 1."""
    d = config.to_dict()
    for section in ("readout", "stage2", "eval"):
        d.pop(section)
    d["temporal"].pop("motion")
    d["temporal"].pop("motion_scale")
    d["diffusion"].pop("reverse_steps_at_inference")
    return json.dumps(d, sort_keys=True)


def load_denoiser(path: str | Path) -> tuple[DenoiserNet, NoiseSchedule, RunConfig, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    config = config_from_dict(ck.config)
    schedule = NoiseSchedule.from_betas(ck.meta["schedule_beta"])
    net = DenoiserNet(config.denoiser, schedule)
    ckpt_io.load_module_arrays(net, ck.modules["denoiser"])
    return net.eval(), schedule, config, ck


# --------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Cache:
    tensors: torch.Tensor  # (F, N, N, D) denoised
    slot_masks: torch.Tensor  # (F, N)
    targets: list[Stage2Target]


def build_stage2_cache(dataset: Dataset, config: RunConfig, net: DenoiserNet, schedule: NoiseSchedule) -> Stage2Cache:
    """Run the frozen denoiser online over the detector observations of every video."""
    engine = StreamEngine(config, net, schedule)
    streams = [[rec.obs for rec in video] for video in dataset.videos]
    ids = [video[0].video_id for video in dataset.videos]
    outputs = engine.run_streams(streams, ids)
    tensors, masks, targets = [], [], []
    for video, outs in zip(dataset.videos, outputs):
        for rec, out in zip(video, outs):
            adj = out.adjacency
            tracks = [int(rec.obs.track_ids[k]) if k >= 0 else None for k in adj.slot_index]
            tensors.append(adj.data)
            masks.append(adj.slot_mask())
            targets.append(align_targets(rec.gt, tracks))
    return Stage2Cache(torch.stack(tensors), torch.stack(masks), targets)


@dataclass
class Stage2Result:
    heads: ReadoutHeads
    checkpoint: Path | None
    step_losses: list[dict] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checksum_before: str = ""
    checksum_after: str = ""


def stage2_decay_step(config: RunConfig, steps_per_epoch: int) -> int:
    return int(math.floor(config.stage2.decay_at * config.stage2.epochs * steps_per_epoch))


def train_stage2(
    dataset: Dataset,
    stage1_checkpoint: str | Path,
    config: RunConfig | None = None,
    out_path: str | Path | None = None,
    *,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
    cache: Stage2Cache | None = None,
) -> Stage2Result:
    """Fit the readout heads on cached outputs of the frozen denoiser.

    The learning rate drops by ``decay_factor`` once, at ``decay_at`` of the
    total step count. The denoiser checksum is compared before and after.
    """
    net, schedule, s1_config, _ = load_denoiser(stage1_checkpoint)
    config = s1_config if config is None else config
    config.validate()
    if stage1_key(config) != stage1_key(s1_config):
        raise ConfigError("stage-2 config disagrees with the stage-1 checkpoint on stage-1 settings")
    s2 = config.stage2
    for p in net.parameters():
        p.requires_grad_(False)
    checksum_before = parameter_checksum(net)
    cache = build_stage2_cache(dataset, config, net, schedule) if cache is None else cache

    torch.manual_seed(s2.seed)
    heads = ReadoutHeads(config.readout)
    opt = torch.optim.AdamW(heads.parameters(), lr=s2.lr, weight_decay=s2.weight_decay)
    gen = torch.Generator().manual_seed(s2.seed + 1)
    n = cache.tensors.shape[0]
    steps_per_epoch = math.ceil(n / s2.batch_frames)
    decay_step = stage2_decay_step(config, steps_per_epoch)
    result = Stage2Result(heads, Path(out_path) if out_path else None, checksum_before=checksum_before)
    start_epoch, step = 0, 0
    if resume_from is not None:
        ck = ckpt_io.load(resume_from)
        ckpt_io.load_module_arrays(heads, ck.modules["heads"])
        opt.load_state_dict(ck.optimizer)
        ckpt_io.set_generator_state(gen, ck.rng["train"])
        result.step_losses = list(ck.meta["step_losses"])
        result.lrs = list(ck.meta["lrs"])
        start_epoch, step = ck.meta["epoch"], ck.meta["step"]
    last_good = Path(resume_from) if resume_from else None
    heads.train()
    for epoch in range(start_epoch, s2.epochs):
        order = torch.randperm(n, generator=gen)
        for lo in range(0, n, s2.batch_frames):
            if step == decay_step:
                for g in opt.param_groups:
                    g["lr"] = g["lr"] * s2.decay_factor
            idx = order[lo : lo + s2.batch_frames]
            out = heads(cache.tensors[idx], cache.slot_masks[idx])
            loss = stage2_loss(out, [cache.targets[i] for i in idx.tolist()])
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(f"stage-2 loss became {loss.total.item()} in epoch {epoch + 1}", last_good)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            result.step_losses.append(loss.components())
            result.lrs.append(opt.param_groups[0]["lr"])
            step += 1
        log.info("stage2 epoch %d loss %.5f", epoch + 1, result.step_losses[-1]["total"])
        if out_path is not None:
            ckpt_io.save(_stage2_checkpoint(config, net, heads, opt, gen, epoch + 1, step, result), out_path)
            last_good = Path(out_path)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    heads.eval()
    result.checksum_after = parameter_checksum(net)
    if result.checksum_after != checksum_before:
        raise RuntimeError("denoiser parameters changed during stage 2")
    return result


def _stage2_checkpoint(config, net, heads, opt, gen, epoch, step, result) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        kind="stage2",
        config=config.to_dict(),
        modules={"denoiser": ckpt_io.module_arrays(net), "heads": ckpt_io.module_arrays(heads)},
        meta={
            "epoch": epoch,
            "step": step,
            "schedule_beta": [float(b) for b in net.schedule.beta],
            "step_losses": result.step_losses,
            "lrs": result.lrs,
            "denoiser_checksum": result.checksum_before,
        },
        optimizer=opt.state_dict(),
        rng={"train": ckpt_io.generator_state(gen)},
    )


def load_model(path: str | Path) -> tuple[DenoiserNet, ReadoutHeads, NoiseSchedule, RunConfig]:
    net, schedule, config, ck = load_denoiser(path)
    if "heads" not in ck.modules:
        raise ValueError(f"{path} is a {ck.kind} checkpoint without readout heads")
    heads = ReadoutHeads(config.readout)
    ckpt_io.load_module_arrays(heads, ck.modules["heads"])
    return net, heads.eval(), schedule, config
