"""Online per-stream state: motion memory, approach speeds, motion injection,
new-object detection and slot bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import blobio
from .graph import AdjacencyTensor, D_BOX, FeatureToggles, _valid_block
from .synthetic import FrameObservation

NEW_OBJECT_THRESHOLD = 0.2
_STATE_VERSION = 1


class MotionMemory:
    """Fixed-capacity per-slot history of (frame_index, center).

    Storage is preallocated, so its size depends only on (n_max, capacity).
    Entries of a slot are kept oldest first; a full buffer drops its oldest.
    """

    def __init__(self, n_max: int, capacity: int = 8, frame_interval: float = 1.0) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if frame_interval <= 0:
            raise ValueError("frame_interval must be positive")
        self.capacity = capacity
        self.frame_interval = float(frame_interval)
        self.frames = np.full((n_max, capacity), -1, dtype=np.int64)
        self.centers = np.zeros((n_max, capacity, 2), dtype=np.float64)
        self.length = np.zeros(n_max, dtype=np.int64)

    @property
    def n_max(self) -> int:
        return self.frames.shape[0]

    def record(self, slot: int, frame_index: int, center: Sequence[float]) -> None:
        n = self.length[slot]
        if n and frame_index <= self.frames[slot, n - 1]:
            raise ValueError(f"slot {slot}: frame {frame_index} is not after {self.frames[slot, n - 1]}")
        if n == self.capacity:
            self.frames[slot, :-1] = self.frames[slot, 1:]
            self.centers[slot, :-1] = self.centers[slot, 1:]
            n -= 1
        self.frames[slot, n] = frame_index
        self.centers[slot, n] = center
        self.length[slot] = n + 1

    def clear(self, slot: int) -> None:
        self.frames[slot] = -1
        self.centers[slot] = 0.0
        self.length[slot] = 0

    def entries(self, slot: int) -> list[tuple[int, tuple[float, float]]]:
        n = self.length[slot]
        return [(int(f), (float(c[0]), float(c[1]))) for f, c in zip(self.frames[slot, :n], self.centers[slot, :n])]

    def center_at(self, slot: int, frame_index: int) -> np.ndarray | None:
        n = self.length[slot]
        hit = np.nonzero(self.frames[slot, :n] == frame_index)[0]
        return self.centers[slot, hit[0]] if hit.size else None

    def latest_frame(self) -> int:
        return int(self.frames.max()) if self.length.any() else -1


def approach_speed(memory: MotionMemory, i: int, j: int, t: int) -> tuple[float, bool]:
    """Rate of change of the center distance between slots i and j at frame t.

    Returns ``(v, cold)``. The earlier point is the most recent frame before t
    stored for both slots, and the difference is divided by the real elapsed
    time. Without such a frame (or without an entry at t) v is 0 and cold is True.
    """
    if i == j:
        return 0.0, False
    ci, cj = memory.center_at(i, t), memory.center_at(j, t)
    if ci is None or cj is None:
        return 0.0, True
    fi = memory.frames[i, : memory.length[i]]
    fj = memory.frames[j, : memory.length[j]]
    common = np.intersect1d(fi[fi < t], fj[fj < t])
    if common.size == 0:
        return 0.0, True
    t0 = int(common[-1])
    d_now = float(np.hypot(*(ci - cj)))
    d_then = float(np.hypot(*(memory.center_at(i, t0) - memory.center_at(j, t0))))
    return (d_now - d_then) / ((t - t0) * memory.frame_interval), False


def build_speed_matrix(
    memory: MotionMemory,
    valid_slots: int | Sequence[int],
    n_max: int,
    t: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Pairwise approach speeds at frame t (default: latest recorded) padded to (n_max, n_max).

    ``valid_slots`` is either a count (slots 0..count-1) or explicit slot indices.
    """
    slots = list(range(valid_slots)) if isinstance(valid_slots, int) else [int(s) for s in valid_slots]
    t = memory.latest_frame() if t is None else t
    v = np.zeros((n_max, n_max))
    for a in slots:
        for b in slots:
            if a < b:
                v[a, b] = v[b, a] = approach_speed(memory, a, b, t)[0]
    return torch.as_tensor(v, dtype=dtype)


def inject_motion(a_k: torch.Tensor, v: torch.Tensor, scale: torch.Tensor | float | None = None) -> torch.Tensor:
    """Add the speed matrix to every channel of the matching pair entries.

    ``scale`` optionally weights channels (a float or a length-D vector).
    """
    if not torch.isfinite(v).all():
        raise ValueError("speed matrix contains non-finite values")
    if v.shape[-2:] != a_k.shape[-3:-1]:
        raise ValueError(f"speed matrix {tuple(v.shape)} does not fit tensor {tuple(a_k.shape)}")
    shift = v.to(a_k.dtype)[..., None]
    if scale is not None:
        shift = shift * torch.as_tensor(scale, dtype=a_k.dtype)
    return a_k + shift


@dataclass
class MatchResult:
    new_objects: list[int]
    # object index -> prior slot
    assignment: dict[int, int]


def cosine_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (x @ y.T) / (nx * ny.T)
    return np.nan_to_num(sims, nan=0.0, posinf=0.0, neginf=0.0)


def detect_new_objects(
    features_t: np.ndarray,
    features_prev: np.ndarray,
    threshold: float = NEW_OBJECT_THRESHOLD,
    prev_slots: Sequence[int] | None = None,
) -> MatchResult:
    """Match current objects to prior slots by cosine similarity.

    Pairs at or above ``threshold`` are taken greedily by descending
    similarity (ties: lower slot, then lower object index), each side used
    once. Objects left unmatched are new.
    """
    m = len(features_t)
    prev_slots = list(range(len(features_prev))) if prev_slots is None else [int(s) for s in prev_slots]
    if m == 0 or len(prev_slots) == 0:
        return MatchResult(list(range(m)), {})
    sims = cosine_matrix(features_t, features_prev)
    cands = [(-sims[o, p], prev_slots[p], o) for o in range(m) for p in range(len(prev_slots)) if sims[o, p] >= threshold]
    cands.sort()
    taken_obj, taken_slot, assignment = set(), set(), {}
    for _, slot, o in cands:
        if o in taken_obj or slot in taken_slot:
            continue
        assignment[o] = slot
        taken_obj.add(o)
        taken_slot.add(slot)
    return MatchResult([o for o in range(m) if o not in assignment], dict(sorted(assignment.items())))


def refresh_padding(
    adj: AdjacencyTensor,
    new_objects: Sequence[int],
    obs: FrameObservation,
    *,
    identities: Sequence[int] | None = None,
    d_box: int = D_BOX,
    toggles: FeatureToggles = FeatureToggles(),
) -> AdjacencyTensor:
    """Place new objects into the first free padding slots.

    Each new slot's row and column against every valid slot (and its
    diagonal) are rebuilt from ``obs``; ``adj.slot_index`` must refer to
    indices of ``obs``.
    """
    if not new_objects:
        return adj
    free = [s for s, ident in enumerate(adj.slot_map) if ident is None]
    if len(new_objects) > len(free):
        raise ValueError(
            f"{adj.valid_count} slots in use and {len(new_objects)} new objects exceed N_max={adj.n_max}"
        )
    out = adj.clone()
    ids = [int(obs.track_ids[o]) for o in new_objects] if identities is None else [int(i) for i in identities]
    for o, s, ident in zip(new_objects, free, ids):
        out.slot_map[s] = ident
        out.slot_index[s] = int(o)
    block = _valid_block(obs, d_box, toggles, out.data.dtype)
    used = [(s, k) for s, k in enumerate(out.slot_index) if k >= 0]
    for o, s in zip(new_objects, free):
        for s2, k2 in used:
            out.data[s, s2] = block[o, k2]
            out.data[s2, s] = block[k2, o]
    return out


class OnlineState:
    """Everything carried between frames of one stream.

    All storage is preallocated from (n_max, d_embed, d_feat, capacity), so
    the snapshot size never depends on how many frames were processed.
    """

    def __init__(
        self, n_max: int, d_embed: int, d_feat: int, capacity: int = 8, frame_interval: float = 1.0, seed: int = 0
    ) -> None:
        # padding noise source
        self.rng = torch.Generator().manual_seed(seed)
        self.prev_clean = torch.zeros((n_max, n_max, d_embed))
        self.has_prev = False
        self.slot_ids = np.full(n_max, -1, dtype=np.int64)
        self.slot_features = np.zeros((n_max, d_feat), dtype=np.float32)
        self.memory = MotionMemory(n_max, capacity, frame_interval)
        self.last_frame = -1
        self.frames_seen = 0
        self.next_identity = 0

    @property
    def n_max(self) -> int:
        return self.slot_ids.shape[0]

    @property
    def slot_map(self) -> list[int | None]:
        return [int(i) if i >= 0 else None for i in self.slot_ids]

    def occupied(self) -> list[int]:
        return [int(s) for s in np.nonzero(self.slot_ids >= 0)[0]]

    def condition(self) -> torch.Tensor:
        return self.prev_clean if self.has_prev else torch.zeros_like(self.prev_clean)

    def snapshot(self) -> bytes:
        meta = {
            "version": _STATE_VERSION,
            "has_prev": self.has_prev,
            "last_frame": self.last_frame,
            "frames_seen": self.frames_seen,
            "next_identity": self.next_identity,
            "frame_interval": self.memory.frame_interval,
        }
        arrays = {
            "prev_clean": self.prev_clean.detach().cpu().numpy().astype(np.float32),
            "slot_ids": self.slot_ids,
            "slot_features": self.slot_features,
            "memory_frames": self.memory.frames,
            "memory_centers": self.memory.centers,
            "memory_length": self.memory.length,
            "rng": self.rng.get_state().numpy(),
        }
        return blobio.encode(meta, arrays)

    @classmethod
    def restore(cls, raw: bytes) -> "OnlineState":
        meta, arrays = blobio.decode(raw)
        if meta.get("version") != _STATE_VERSION:
            raise ValueError(f"unsupported state version {meta.get('version')}")
        n_max, _, d_embed = arrays["prev_clean"].shape
        state = cls(n_max, d_embed, arrays["slot_features"].shape[1], arrays["memory_frames"].shape[1], meta["frame_interval"])
        state.prev_clean = torch.from_numpy(arrays["prev_clean"])
        state.has_prev = bool(meta["has_prev"])
        state.last_frame = int(meta["last_frame"])
        state.frames_seen = int(meta["frames_seen"])
        state.next_identity = int(meta["next_identity"])
        state.slot_ids = arrays["slot_ids"]
        state.slot_features = arrays["slot_features"]
        state.memory.frames = arrays["memory_frames"]
        state.memory.centers = arrays["memory_centers"]
        state.memory.length = arrays["memory_length"]
        state.rng.set_state(torch.from_numpy(arrays["rng"]))
        return state
