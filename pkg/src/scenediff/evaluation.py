"""Recall@K and mean Recall@K for ranked relation triplets.

Protocols
    PredCLS: ground-truth boxes, labels and pairs given; only gt pairs are ranked.
    SGCLS:   ground-truth boxes given; object labels are predicted.
    SGDET:   boxes and labels predicted; boxes must overlap gt by IoU > threshold.
R@K is averaged over frames with gt; the per-class recall behind mR@K pools
hits and counts over all frames.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .readout import SceneGraphPrediction
from .synthetic import GroundTruthGraph

PROTOCOLS = ("PredCLS", "SGCLS", "SGDET")
CONSTRAINT_MODES = ("with", "without")


class InvariantError(AssertionError):
    pass


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (10, 20, 50)
    constraint_mode: str = "with"
    protocol: str = "PredCLS"
    iou_threshold: float = 0.5

    def validate(self) -> None:
        if not self.ks or any(k <= 0 for k in self.ks) or list(self.ks) != sorted(set(self.ks)):
            raise ValueError("ks must be positive and strictly ascending")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """IoU of two (x, y, w, h) boxes; 0 (with a warning) for a degenerate box."""
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        warnings.warn("degenerate box in IoU", RuntimeWarning, stacklevel=2)
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass(frozen=True)
class RankedTriplet:
    score: float
    subject: int
    predicate: int
    object: int
    pair_index: int
    subject_label: int
    object_label: int

    def sort_key(self) -> tuple[float, int, int]:
        return (-self.score, self.pair_index, self.predicate)


def rank_triplets(
    pred: SceneGraphPrediction,
    constraint_mode: str = "with",
    protocol: str = "PredCLS",
    gt: GroundTruthGraph | None = None,
) -> list[RankedTriplet]:
    """Candidate triplets sorted by score (ties: pair index, then predicate id).

    Pairs are enumerated row-major over ordered (subject, object) with
    subject != object; PredCLS keeps only the gt pairs and uses gt labels.
    """
    n = pred.num_objects
    if n == 0:
        return []
    if protocol == "PredCLS":
        if gt is None:
            raise ValueError("PredCLS ranking needs the ground truth pairs")
        wanted = {(s, o) for s, _, o in gt.triplets}
        labels = [int(v) for v in gt.labels]
        obj_conf = np.ones(n)
    else:
        wanted = None
        labels = [int(v) for v in pred.obj_probs.argmax(1)]
        obj_conf = pred.obj_probs.max(1)
    out = []
    pair_index = 0
    for s in range(n):
        for o in range(n):
            if s == o:
                continue
            if wanted is None or (s, o) in wanted:
                probs = pred.pred_probs[s, o]
                preds = [int(np.argmax(probs))] if constraint_mode == "with" else range(len(probs))
                for p in preds:
                    score = float(probs[p]) if protocol == "PredCLS" else float(probs[p] * obj_conf[s] * obj_conf[o])
                    out.append(RankedTriplet(score, s, p, o, pair_index, labels[s], labels[o]))
            pair_index += 1
    out.sort(key=RankedTriplet.sort_key)
    return out


def triplet_matches(
    cand: RankedTriplet,
    gt_triplet: tuple[int, int, int],
    gt: GroundTruthGraph,
    protocol: str,
    pred_boxes: np.ndarray | None = None,
    iou_threshold: float = 0.5,
) -> bool:
    s, p, o = gt_triplet
    if cand.predicate != p:
        return False
    if protocol == "PredCLS":
        return cand.subject == s and cand.object == o
    labels_ok = cand.subject_label == int(gt.labels[s]) and cand.object_label == int(gt.labels[o])
    if protocol == "SGCLS":
        return labels_ok and cand.subject == s and cand.object == o
    return (
        labels_ok
        and iou(pred_boxes[cand.subject], gt.boxes[s]) > iou_threshold
        and iou(pred_boxes[cand.object], gt.boxes[o]) > iou_threshold
    )


@dataclass
class FrameRecall:
    recall: float
    hits: int
    total: int
    class_hits: dict[int, int]
    class_total: dict[int, int]


def recall_at_k(
    ranked: Sequence[RankedTriplet],
    gt: GroundTruthGraph,
    k: int,
    protocol: str = "PredCLS",
    iou_threshold: float = 0.5,
    pred_boxes: np.ndarray | None = None,
) -> FrameRecall | None:
    """Greedy one-to-one matching of the top-k candidates in rank order.

    Each candidate takes the first still-unmatched gt triplet (in gt order)
    it matches. Returns None for a frame without gt.
    """
    if not gt.triplets:
        return None
    if protocol == "SGDET" and pred_boxes is None:
        raise ValueError("SGDET needs predicted boxes")
    matched = [False] * len(gt.triplets)
    for cand in ranked[:k]:
        for g, trip in enumerate(gt.triplets):
            if not matched[g] and triplet_matches(cand, trip, gt, protocol, pred_boxes, iou_threshold):
                matched[g] = True
                break
    class_total: dict[int, int] = {}
    class_hits: dict[int, int] = {}
    for (_, p, _), hit in zip(gt.triplets, matched):
        class_total[p] = class_total.get(p, 0) + 1
        class_hits[p] = class_hits.get(p, 0) + int(hit)
    hits = sum(matched)
    return FrameRecall(hits / len(gt.triplets), hits, len(gt.triplets), class_hits, class_total)


@dataclass
class MetricReport:
    protocol: str
    constraint_mode: str
    ks: tuple[int, ...]
    recall: dict[int, float]
    mean_recall: dict[int, float]
    class_recall: dict[int, dict[int, float]]
    frames: int
    skipped_frames: int
    videos: int
    empty: bool = False
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "constraint_mode": self.constraint_mode,
            "ks": list(self.ks),
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "class_recall": {str(k): {str(c): r for c, r in v.items()} for k, v in self.class_recall.items()},
            "frames": self.frames,
            "skipped_frames": self.skipped_frames,
            "videos": self.videos,
            "empty": self.empty,
            "notes": self.notes,
        }


def aggregate(
    per_k: dict[int, list[FrameRecall | None]],
    protocol: str = "PredCLS",
    constraint_mode: str = "with",
    videos: int = 0,
) -> MetricReport:
    ks = tuple(sorted(per_k))
    recall, mean_recall, class_recall = {}, {}, {}
    frames = skipped = 0
    for k in ks:
        rows = [r for r in per_k[k] if r is not None]
        frames, skipped = len(rows), len(per_k[k]) - len(rows)
        recall[k] = float(np.mean([r.recall for r in rows])) if rows else 0.0
        hits: dict[int, int] = {}
        total: dict[int, int] = {}
        for r in rows:
            for c, n in r.class_total.items():
                total[c] = total.get(c, 0) + n
                hits[c] = hits.get(c, 0) + r.class_hits[c]
        class_recall[k] = {c: hits[c] / total[c] for c in sorted(total)}
        mean_recall[k] = float(np.mean(list(class_recall[k].values()))) if total else 0.0
    notes = {"recall_average": "per frame", "class_recall_average": "pooled over frames"}
    return MetricReport(protocol, constraint_mode, ks, recall, mean_recall, class_recall, frames, skipped, videos,
                        empty=frames == 0, notes=notes)


def evaluate(
    predictions: Iterable[SceneGraphPrediction],
    gts: Iterable[GroundTruthGraph],
    config: EvalConfig,
) -> MetricReport:
    """Predictions and gts are paired in order; prediction rows follow gt object order."""
    config.validate()
    per_k: dict[int, list] = {k: [] for k in config.ks}
    videos = set()
    for pred, gt in zip(predictions, gts, strict=True):
        videos.add(pred.video_id)
        ranked = rank_triplets(pred, config.constraint_mode, config.protocol, gt)
        for k in config.ks:
            per_k[k].append(recall_at_k(ranked, gt, k, config.protocol, config.iou_threshold, pred.boxes))
    return aggregate(per_k, config.protocol, config.constraint_mode, len(videos))


def check_invariants(with_report: MetricReport, without_report: MetricReport, tol: float = 1e-12) -> dict:
    """K-monotonicity of both reports and with <= without at every K."""
    checks = {}
    for rep in (with_report, without_report):
        vals = [rep.recall[k] for k in rep.ks]
        mvals = [rep.mean_recall[k] for k in rep.ks]
        checks[f"recall_monotone_in_k[{rep.constraint_mode}]"] = all(b >= a - tol for a, b in zip(vals, vals[1:]))
        checks[f"mean_recall_monotone_in_k[{rep.constraint_mode}]"] = all(b >= a - tol for a, b in zip(mvals, mvals[1:]))
    checks["with_le_without"] = all(
        with_report.recall[k] <= without_report.recall[k] + tol for k in with_report.ks
    )
    return checks


def write_report(
    with_report: MetricReport,
    without_report: MetricReport,
    path: str | Path,
    *,
    extra: dict | None = None,
    strict: bool = True,
) -> dict:
    """Write both constraint modes as JSON (plus a CSV next to it) after checking invariants.

    Raises InvariantError when ``strict`` and a check fails; the file is written
    either way so the failure can be inspected.
    """
    checks = check_invariants(with_report, without_report)
    payload = {
        "with": with_report.to_dict(),
        "without": without_report.to_dict(),
        "invariants": checks,
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_csv([with_report, without_report], path.with_suffix(".csv"))
    if strict and not all(checks.values()):
        failed = [name for name, ok in checks.items() if not ok]
        raise InvariantError(f"evaluation invariants failed: {failed}")
    return payload


def write_csv(reports: Sequence[MetricReport], path: str | Path) -> None:
    """One row per report: protocol, constraint, R@K..., mR@K..."""
    ks = reports[0].ks
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "constraint"] + [f"R@{k}" for k in ks] + [f"mR@{k}" for k in ks])
        for r in reports:
            w.writerow([r.protocol, r.constraint_mode] + [f"{100 * r.recall[k]:.2f}" for k in ks]
                       + [f"{100 * r.mean_recall[k]:.2f}" for k in ks])


# --------------------------------------------------------------------------
# prediction interchange


def prediction_to_json(pred: SceneGraphPrediction, top_k: int = 50) -> str:
    ranked = rank_triplets(pred, "with", "SGCLS")[:top_k]
    rec = {
        "video_id": pred.video_id,
        "frame_index": pred.frame_index,
        "slots": pred.slots,
        "object_index": pred.object_index,
        "boxes": np.round(pred.boxes, 9).tolist(),
        "labels": pred.obj_probs.argmax(1).tolist() if pred.num_objects else [],
        "num_classes": int(pred.obj_probs.shape[-1]),
        "num_predicates": int(pred.pred_probs.shape[-1]),
        "obj_probs": np.round(pred.obj_probs, 9).tolist(),
        "pred_probs": np.round(pred.pred_probs, 9).tolist(),
        "top_triplets": [[t.subject, t.predicate, t.object, round(t.score, 9)] for t in ranked],
    }
    return json.dumps(rec, separators=(",", ":"))


def prediction_from_json(line: str) -> SceneGraphPrediction:
    r = json.loads(line)
    n = len(r["slots"])
    pred_probs = np.asarray(r["pred_probs"], dtype=np.float64).reshape(n, n, r["num_predicates"])
    obj_probs = np.asarray(r["obj_probs"], dtype=np.float64).reshape(n, r["num_classes"])
    boxes = np.asarray(r["boxes"], dtype=np.float64)
    return SceneGraphPrediction(r["frame_index"], r["slots"], r["object_index"], pred_probs, obj_probs,
                                boxes.reshape(n, 4), r["video_id"])


def write_predictions(preds: Iterable[SceneGraphPrediction], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in preds:
            fh.write(prediction_to_json(p) + "\n")
    return path


def read_predictions(path: str | Path) -> list[SceneGraphPrediction]:
    with open(path) as fh:
        return [prediction_from_json(line) for line in fh if line.strip()]
