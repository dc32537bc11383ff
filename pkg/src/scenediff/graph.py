"""Padded relation tensor construction.

Entry ``(i, j)`` of the tensor concatenates the subject's instance feature,
the union-box feature of the ordered pair and a fixed encoding of the
subject's box. Slots without an object are filled with unit-Gaussian noise
so the tensor always has shape ``(n_max, n_max, D)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .synthetic import FrameObservation, GroundTruthGraph

N_MAX = 100
D_EMBED = 128
D_BOX = 32
DESCRIPTOR_SIZE = 9

_TENSOR_MAGIC = b"SDTN"


@dataclass(frozen=True)
class FeatureToggles:
    """Which of the three pair-embedding components are kept (others zeroed)."""

    union: bool = True
    subject_feature: bool = True
    subject_location: bool = True


@dataclass
class AdjacencyTensor:
    data: torch.Tensor
    # slot -> persistent identity, None for padding
    slot_map: list[int | None]
    frame_index: int
    # slot -> index into the frame's observation, -1 for padding
    slot_index: list[int] = field(default_factory=list)

    @property
    def n_max(self) -> int:
        return self.data.shape[0]

    @property
    def valid_count(self) -> int:
        return sum(s is not None for s in self.slot_map)

    def slot_mask(self) -> torch.Tensor:
        return torch.tensor([s is not None for s in self.slot_map], dtype=torch.bool)

    def pair_mask(self) -> torch.Tensor:
        return pair_mask_from_slots(self.slot_mask())

    def clone(self) -> "AdjacencyTensor":
        return AdjacencyTensor(self.data.clone(), list(self.slot_map), self.frame_index, list(self.slot_index))


def pair_mask_from_slots(slot_mask: torch.Tensor) -> torch.Tensor:
    """Valid ordered pairs, diagonal excluded. Works on (..., n) masks."""
    m = slot_mask[..., :, None] & slot_mask[..., None, :]
    eye = torch.eye(slot_mask.shape[-1], dtype=torch.bool)
    return m & ~eye


def box_descriptor(box: Sequence[float], image_size: tuple[int, int] | None = None) -> np.ndarray:
    x, y, w, h = (float(v) for v in box)
    if image_size is not None:
        W, H = image_size
        x, y, w, h = x / W, y / H, w / W, h / H
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(box)}: width and height must be positive")
    return np.array([x, y, x + w, y + h, x + w / 2, y + h / 2, w, h, w * h])


def box_to_feature(box: Sequence[float], image_size: tuple[int, int] | None = None, d_box: int = D_BOX) -> np.ndarray:
    """Fixed sinusoidal expansion of the 9-element box descriptor.

    Component ``m`` reads descriptor ``m % 9`` at octave ``m // 9``; even
    octaves use cosine, odd octaves sine. ``image_size`` is only needed
    when the box is given in pixels.
    """
    desc = box_descriptor(box, image_size)
    m = np.arange(d_box)
    octave = m // DESCRIPTOR_SIZE
    angle = (math.pi / 2) * 2.0**octave * desc[m % DESCRIPTOR_SIZE]
    return np.where(octave % 2 == 0, np.cos(angle), np.sin(angle)).astype(np.float32)


def feature_sources(d_box: int = D_BOX) -> np.ndarray:
    """Descriptor index feeding each box-feature component."""
    return np.arange(d_box) % DESCRIPTOR_SIZE


def pair_embedding(f_subject: torch.Tensor, f_union: torch.Tensor, f_box: torch.Tensor, d_embed: int | None = None) -> torch.Tensor:
    out = torch.cat([f_subject, f_union, f_box], dim=-1)
    if d_embed is not None and out.shape[-1] != d_embed:
        raise ValueError(
            f"pair embedding has {out.shape[-1]} dims "
            f"({f_subject.shape[-1]}+{f_union.shape[-1]}+{f_box.shape[-1]}), expected {d_embed}"
        )
    return out


def embedding_dim(d_obj: int, d_box: int = D_BOX) -> int:
    return 2 * d_obj + d_box


def _valid_block(obs: FrameObservation, d_box: int, toggles: FeatureToggles, dtype: torch.dtype) -> torch.Tensor:
    n = obs.num_objects
    f_o = torch.as_tensor(np.asarray(obs.object_features), dtype=dtype)
    f_u = torch.as_tensor(np.asarray(obs.union_features), dtype=dtype)
    f_b = torch.as_tensor(np.stack([box_to_feature(b, d_box=d_box) for b in obs.boxes]) if n else
                          np.zeros((0, d_box)), dtype=dtype)
    if not toggles.subject_feature:
        f_o = torch.zeros_like(f_o)
    if not toggles.union:
        f_u = torch.zeros_like(f_u)
    if not toggles.subject_location:
        f_b = torch.zeros_like(f_b)
    return pair_embedding(f_o[:, None].expand(n, n, -1), f_u, f_b[:, None].expand(n, n, -1))


def assemble_adjacency(
    obs: FrameObservation,
    n_max: int,
    rng: torch.Generator | None,
    *,
    d_box: int = D_BOX,
    toggles: FeatureToggles = FeatureToggles(),
    dtype: torch.dtype = torch.float32,
    slots: Sequence[int] | None = None,
    identities: Sequence[int] | None = None,
) -> AdjacencyTensor:
    n = obs.num_objects
    if n > n_max:
        raise ValueError(f"frame {obs.frame_index} has {n} objects but N_max is {n_max}; refusing to truncate")
    slots = list(range(n)) if slots is None else [int(s) for s in slots]
    if len(slots) != n or len(set(slots)) != n or any(not 0 <= s < n_max for s in slots):
        raise ValueError(f"invalid slot assignment {slots} for {n} objects and N_max {n_max}")
    ids = [int(t) for t in obs.track_ids] if identities is None else [int(t) for t in identities]
    d_embed = embedding_dim(obs.object_features.shape[-1], d_box)
    data = torch.randn((n_max, n_max, d_embed), generator=rng, dtype=dtype)
    if n:
        idx = torch.tensor(slots)
        data[idx[:, None], idx[None, :]] = _valid_block(obs, d_box, toggles, dtype)
    slot_map: list[int | None] = [None] * n_max
    slot_index = [-1] * n_max
    for k, s in enumerate(slots):
        slot_map[s] = ids[k]
        slot_index[s] = k
    return AdjacencyTensor(data, slot_map, obs.frame_index, slot_index)


def relation_mask(triplets: Sequence[tuple[int, int, int]], n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    for s, _, o in triplets:
        mask[s, o] = True
    return mask


def assemble_gt_adjacency(
    gt: GroundTruthGraph,
    obs: FrameObservation | None,
    n_max: int,
    rng: torch.Generator | None,
    **kwargs,
) -> AdjacencyTensor:
    """Ground-truth tensor: as ``assemble_adjacency`` on ground-truth boxes, with
    unrelated ordered pairs zeroed. The diagonal keeps its self-pair embedding."""
    obs = gt.oracle if obs is None else obs
    adj = assemble_adjacency(obs, n_max, rng, **kwargs)
    n = obs.num_objects
    empty = ~relation_mask(gt.triplets, n)
    np.fill_diagonal(empty, False)
    if empty.any():
        slot_of = torch.empty(n, dtype=torch.long)
        for s, k in enumerate(adj.slot_index):
            if k >= 0:
                slot_of[k] = s
        rows, cols = torch.nonzero(torch.as_tensor(empty), as_tuple=True)
        adj.data[slot_of[rows], slot_of[cols]] = 0
    return adj


def repad(data: torch.Tensor, slot_mask: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Resample every entry whose row or column is a padding slot. Batched or not."""
    keep = slot_mask[..., :, None] & slot_mask[..., None, :]
    noise = torch.randn(data.shape, generator=generator, dtype=data.dtype)
    return torch.where(keep[..., None], data, noise)


def dump_tensor(tensor: torch.Tensor, path: str | Path) -> None:
    """Portable blob: magic, uint32 ndim, uint32 dims, little-endian float32 row-major data."""
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor dump")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    arr = np.frombuffer(raw, dtype="<f4", offset=8 + 4 * ndim).reshape(shape)
    return torch.from_numpy(arr.copy())
