"""Predicate, object and box heads on the denoised relation tensor, and the
second-stage training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph import pair_mask_from_slots
from .synthetic import GroundTruthGraph

READOUT_MODES = ("row", "element")
BOX_WEIGHT = 0.5


@dataclass
class ReadoutConfig:
    d_embed: int = 128
    hidden: int = 256
    num_predicates: int = 25
    num_objects: int = 35
    mode: str = "row"

    def validate(self) -> None:
        if self.mode not in READOUT_MODES:
            raise ValueError(f"mode must be one of {READOUT_MODES}")
        if min(self.d_embed, self.hidden, self.num_predicates, self.num_objects) < 1:
            raise ValueError("head sizes must be positive")


def mlp_head(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


@dataclass
class ReadoutOutput:
    pred_logits: torch.Tensor  # (..., N, N, P)
    obj_logits: torch.Tensor  # (..., N, C)
    boxes: torch.Tensor  # (..., N, 4), in (0, 1)
    slot_mask: torch.Tensor  # (..., N)


def aggregate_rows(a0: torch.Tensor, slot_mask: torch.Tensor, mode: str = "row") -> torch.Tensor:
    """Per-slot vectors from the rows of ``a0`` (shape (..., N, N, D)).

    row: mean over the row's valid off-diagonal entries.
    element: the entry for the lowest-index valid partner.
    A slot with no valid partner falls back to its diagonal entry.
    """
    if mode not in READOUT_MODES:
        raise ValueError(f"unknown readout mode {mode!r}")
    pairs = pair_mask_from_slots(slot_mask).to(a0.dtype)
    n = a0.shape[-2]
    diag = torch.diagonal(a0, dim1=-3, dim2=-2).transpose(-1, -2)
    if mode == "row":
        count = pairs.sum(-1, keepdim=True)
        agg = (a0 * pairs[..., None]).sum(-2) / count.clamp_min(1)
    else:
        # first valid column per row: argmax over a descending ramp
        ramp = torch.arange(n, 0, -1, dtype=a0.dtype)
        first = (pairs * ramp).argmax(-1)
        agg = torch.gather(a0, -2, first[..., None, None].expand(*first.shape, 1, a0.shape[-1])).squeeze(-2)
        count = pairs.sum(-1, keepdim=True)
    return torch.where(count > 0, agg, diag)


class ReadoutHeads(nn.Module):
    def __init__(self, config: ReadoutConfig | None = None) -> None:
        super().__init__()
        config = config or ReadoutConfig()
        config.validate()
        self.config = config
        self.pred_head = mlp_head(config.d_embed, config.hidden, config.num_predicates)
        self.obj_head = mlp_head(config.d_embed, config.hidden, config.num_objects)
        self.box_head = mlp_head(config.d_embed, config.hidden, 4)

    def forward(self, a0: torch.Tensor, slot_mask: torch.Tensor) -> ReadoutOutput:
        rows = aggregate_rows(a0, slot_mask, self.config.mode)
        return ReadoutOutput(self.pred_head(a0), self.obj_head(rows), torch.sigmoid(self.box_head(rows)), slot_mask)

    def predict_predicate(self, entry: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.pred_head(entry), dim=-1)

    def _row_vector(self, row: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        valid_mask = torch.as_tensor(valid_mask, dtype=torch.bool)
        if not valid_mask.any():
            raise ValueError("row has no valid entries")
        if self.config.mode == "row":
            return row[valid_mask].mean(0)
        return row[valid_mask][0]

    def predict_object(self, row: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.obj_head(self._row_vector(row, valid_mask)), dim=-1)

    def regress_box(self, row: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.box_head(self._row_vector(row, valid_mask)))


@dataclass
class SceneGraphPrediction:
    """Readout for the valid slots of one frame, in ascending slot order."""

    frame_index: int
    slots: list[int]
    # observation index per valid slot (-1 when unknown)
    object_index: list[int]
    pred_probs: np.ndarray  # (n, n, P), diagonal unused
    obj_probs: np.ndarray  # (n, C)
    boxes: np.ndarray  # (n, 4)
    video_id: int = -1

    @property
    def num_objects(self) -> int:
        return len(self.slots)

    def in_observation_order(self) -> "SceneGraphPrediction":
        """Rows reordered by observation index (slots without one are dropped)."""
        order = [r for r in np.argsort(self.object_index, kind="stable") if self.object_index[r] >= 0]
        idx = np.asarray(order, dtype=np.int64)
        return SceneGraphPrediction(
            self.frame_index, [self.slots[r] for r in order], [self.object_index[r] for r in order],
            self.pred_probs[np.ix_(idx, idx)], self.obj_probs[idx], self.boxes[idx], self.video_id,
        )


def to_prediction(out: ReadoutOutput, frame_index: int, slot_index: list[int], video_id: int = -1) -> SceneGraphPrediction:
    """Unbatched readout output -> normalized distributions over the valid slots."""
    slots = [int(s) for s in torch.nonzero(out.slot_mask).flatten()]
    idx = torch.tensor(slots, dtype=torch.long)
    with torch.no_grad():
        pred = torch.softmax(out.pred_logits[idx][:, idx].double(), dim=-1).numpy()
        obj = torch.softmax(out.obj_logits[idx].double(), dim=-1).numpy()
        boxes = out.boxes[idx].double().numpy()
    return SceneGraphPrediction(frame_index, slots, [int(slot_index[s]) for s in slots], pred, obj, boxes, video_id)


@dataclass
class Stage2Target:
    """Ground truth of one frame expressed in slot coordinates."""

    triplets: list[tuple[int, int, int]]  # (subject slot, predicate, object slot)
    labels: dict[int, int]  # slot -> object class
    boxes: dict[int, tuple[float, float, float, float]]
    missing: int = 0  # gt objects without a slot
    skipped_triplets: int = 0


def align_targets(gt: GroundTruthGraph, slot_tracks: list[int | None]) -> Stage2Target:
    """Map gt objects to slots by track identity; unmatched objects are counted, not fatal."""
    slot_of = {int(t): s for s, t in enumerate(slot_tracks) if t is not None}
    local = [slot_of.get(int(t)) for t in gt.track_ids]
    labels = {s: int(gt.labels[i]) for i, s in enumerate(local) if s is not None}
    boxes = {s: tuple(float(v) for v in gt.boxes[i]) for i, s in enumerate(local) if s is not None}
    triplets, skipped = [], 0
    for si, p, oi in gt.triplets:
        if local[si] is None or local[oi] is None:
            skipped += 1
        else:
            triplets.append((local[si], int(p), local[oi]))
    return Stage2Target(triplets, labels, boxes, sum(s is None for s in local), skipped)


@dataclass
class Stage2Loss:
    total: torch.Tensor
    pred: torch.Tensor
    obj: torch.Tensor
    box: torch.Tensor
    coverage: dict = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "pred", "obj", "box")}


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def stage2_loss_from_log_probs(
    pred_log_probs: torch.Tensor,
    obj_log_probs: torch.Tensor,
    boxes: torch.Tensor,
    targets: list[Stage2Target],
) -> Stage2Loss:
    """Batched (B, N, N, P) / (B, N, C) / (B, N, 4) inputs, one target per frame.

    Each term is a mean over its gt items pooled across the batch; a term with
    no items contributes 0. total = pred + obj + 0.5 * box.
    """
    zero = pred_log_probs.sum() * 0
    pb, ps, pp, po = [], [], [], []
    ob, os_, ol = [], [], []
    bb, bs, bt = [], [], []
    for b, t in enumerate(targets):
        for s, p, o in t.triplets:
            pb.append(b), ps.append(s), pp.append(p), po.append(o)
        for s, label in t.labels.items():
            ob.append(b), os_.append(s), ol.append(label)
        for s, box in t.boxes.items():
            bb.append(b), bs.append(s), bt.append(box)
    pred = -pred_log_probs[pb, ps, po, pp].mean() if pb else zero
    obj = -obj_log_probs[ob, os_, ol].mean() if ob else zero
    if bb:
        target = torch.tensor(bt, dtype=boxes.dtype)
        box = smooth_l1(boxes[bb, bs] - target).mean()
    else:
        box = zero
    coverage = {
        "triplets": len(pb),
        "objects": len(ob),
        "missing_objects": sum(t.missing for t in targets),
        "skipped_triplets": sum(t.skipped_triplets for t in targets),
    }
    return Stage2Loss(pred + obj + BOX_WEIGHT * box, pred, obj, box, coverage)


def stage2_loss(out: ReadoutOutput, targets: list[Stage2Target] | Stage2Target) -> Stage2Loss:
    """Cross-entropy on gt predicates and object labels plus weighted smooth-L1 on boxes."""
    if isinstance(targets, Stage2Target):
        out = ReadoutOutput(out.pred_logits[None], out.obj_logits[None], out.boxes[None], out.slot_mask[None])
        targets = [targets]
    return stage2_loss_from_log_probs(
        F.log_softmax(out.pred_logits, dim=-1), F.log_softmax(out.obj_logits, dim=-1), out.boxes, targets
    )
