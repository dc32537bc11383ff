"""Deterministic desk-scale video generator with geometry-derived scene graphs.

Each video is a handful of axis-aligned boxes moving on linear-plus-jitter
trajectories inside the unit square. Predicates are assigned by fixed
geometric rules (see ``PREDICATE_RULES``) and the resulting frames are
exposed through the same interface an off-the-shelf detector would give:
boxes, class scores, per-object features and per-pair union features.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

TAXONOMY_FILE = "predicates_v1.json"
DATASET_FORMAT_VERSION = 1

CLASS_EMBED_NORM = 4.0
BOX_ENCODING_SCALE = 0.3
UNION_SUBJECT_WEIGHT = 0.5
UNION_OBJECT_WEIGHT = 0.25
# rng stream tags, keep stable: changing them changes every dataset
_OBJ_STREAM = 1
_UNION_STREAM = 2


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass(frozen=True)
class Predicate:
    id: int
    name: str
    group: str
    priority: int


@dataclass(frozen=True)
class Taxonomy:
    version: int
    groups: tuple[str, ...]
    group_precedence: tuple[str, ...]
    predicates: tuple[Predicate, ...]

    def by_name(self, name: str) -> Predicate:
        for p in self.predicates:
            if p.name == name:
                return p
        raise KeyError(name)

    def select(self, count: int | None = None, names: Sequence[str] | None = None) -> tuple[Predicate, ...]:
        """Active predicates in global-id order."""
        if names:
            chosen = [self.by_name(n) for n in names]
            if len({p.id for p in chosen}) != len(chosen):
                raise ConfigError("duplicate predicate names")
            return tuple(sorted(chosen, key=lambda p: p.id))
        count = len(self.predicates) if count is None else count
        if not 1 <= count <= len(self.predicates):
            raise ConfigError(f"predicate_classes must be in [1, {len(self.predicates)}], got {count}")
        return tuple(sorted(self.predicates, key=lambda p: p.id)[:count])


@lru_cache(maxsize=1)
def load_taxonomy() -> Taxonomy:
    raw = json.loads(resources.files("scenediff").joinpath("data").joinpath(TAXONOMY_FILE).read_text())
    preds = tuple(Predicate(**p) for p in raw["predicates"])
    return Taxonomy(raw["version"], tuple(raw["groups"]), tuple(raw["group_precedence"]), preds)


@dataclass(frozen=True)
class RuleParams:
    margin: float = 0.05
    motion_eps: float = 0.02
    touch_gap: float = 0.02
    stack_gap: float = 0.05
    next_to_dist: float = 0.2
    near_dist: float = 0.25
    far_dist: float = 0.85
    far_axis: float = 0.65
    strong_iou: float = 0.3
    size_ratio: float = 1.5


@dataclass
class SceneConfig:
    num_videos: int = 200
    frames_per_video: int = 5
    image_size: tuple[int, int] = (640, 480)
    max_objects: int = 6
    min_objects: int = 2
    object_classes: int = 35
    predicate_classes: int = 25
    predicate_names: tuple[str, ...] | None = None
    rng_seed: int = 0
    frame_interval: float = 1.0
    d_obj: int = 48
    feature_noise: float = 0.05
    class_noise: float = 0.1
    box_jitter: float = 0.01
    trajectory_jitter: float = 0.002
    static_prob: float = 0.3
    speed_range: tuple[float, float] = (0.01, 0.05)
    size_range: tuple[float, float] = (0.08, 0.3)
    entry_prob: float = 0.0
    skew: float = 0.0
    single_label: bool = True
    rules: RuleParams = field(default_factory=RuleParams)

    def __post_init__(self) -> None:
        self.image_size = tuple(self.image_size)
        self.speed_range = tuple(self.speed_range)
        self.size_range = tuple(self.size_range)
        if self.predicate_names is not None:
            self.predicate_names = tuple(self.predicate_names)
        if isinstance(self.rules, dict):
            self.rules = RuleParams(**self.rules)

    def validate(self, n_max: int | None = None) -> None:
        problems = []
        for name in ("num_videos", "frames_per_video", "object_classes", "predicate_classes", "d_obj"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.frames_per_video < 2:
            problems.append("frames_per_video must be >= 2")
        if self.max_objects < 2:
            problems.append("max_objects must be >= 2")
        if not 2 <= self.min_objects <= self.max_objects:
            problems.append("need 2 <= min_objects <= max_objects")
        if n_max is not None and self.max_objects > n_max:
            problems.append(f"max_objects {self.max_objects} exceeds N_max {n_max}")
        if self.object_classes > self.d_obj:
            problems.append("object_classes must not exceed d_obj (class embeddings are orthogonal)")
        if min(self.image_size) <= 0:
            problems.append("image_size must be positive")
        if self.frame_interval <= 0:
            problems.append("frame_interval must be positive")
        lo, hi = self.size_range
        if not 0 < lo <= hi < 0.5:
            problems.append("size_range must satisfy 0 < lo <= hi < 0.5")
        if not 0 <= self.class_noise < 1:
            problems.append("class_noise must be in [0, 1)")
        if self.skew < 0:
            problems.append("skew must be non-negative")
        if problems:
            raise ConfigError("invalid SceneConfig: " + "; ".join(problems))

    def active_predicates(self) -> tuple[Predicate, ...]:
        return load_taxonomy().select(self.predicate_classes, self.predicate_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["speed_range"] = list(self.speed_range)
        d["size_range"] = list(self.size_range)
        if self.predicate_names is not None:
            d["predicate_names"] = list(self.predicate_names)
        return d


@dataclass
class FrameObservation:
    """Detector-style output for one frame (boxes are normalized x, y, w, h)."""

    frame_index: int
    boxes: np.ndarray
    class_labels: np.ndarray
    class_scores: np.ndarray
    object_features: np.ndarray
    union_features: np.ndarray
    track_ids: np.ndarray

    @property
    def num_objects(self) -> int:
        return len(self.boxes)

    def subset(self, indices: Sequence[int]) -> "FrameObservation":
        idx = np.asarray(indices, dtype=np.int64)
        return FrameObservation(
            self.frame_index,
            self.boxes[idx],
            self.class_labels[idx],
            self.class_scores[idx],
            self.object_features[idx],
            self.union_features[np.ix_(idx, idx)],
            self.track_ids[idx],
        )


@dataclass
class GroundTruthGraph:
    frame_index: int
    triplets: list[tuple[int, int, int]]
    boxes: np.ndarray
    labels: np.ndarray
    track_ids: np.ndarray
    prev_centers: np.ndarray
    # features re-extracted at the ground-truth boxes
    oracle: FrameObservation


@dataclass
class FrameRecord:
    video_id: int
    frame_index: int
    obs: FrameObservation
    gt: GroundTruthGraph


@dataclass
class Dataset:
    config: SceneConfig
    predicates: tuple[Predicate, ...]
    videos: list[list[FrameRecord]]

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    def frames(self) -> Iterator[FrameRecord]:
        for video in self.videos:
            yield from video


# --------------------------------------------------------------------------
# feature synthesis


def union_box(b_i: Sequence[float], b_j: Sequence[float]) -> tuple[float, float, float, float]:
    x1 = min(b_i[0], b_j[0])
    y1 = min(b_i[1], b_j[1])
    x2 = max(b_i[0] + b_i[2], b_j[0] + b_j[2])
    y2 = max(b_i[1] + b_i[3], b_j[1] + b_j[3])
    return (x1, y1, x2 - x1, y2 - y1)


@lru_cache(maxsize=8)
def class_embedding_table(num_classes: int, dim: int) -> np.ndarray:
    """Orthogonal class embeddings, identical for every dataset of this shape."""
    if num_classes > dim:
        raise ConfigError("cannot build orthogonal embeddings with num_classes > dim")
    rng = np.random.default_rng([7919, num_classes, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    table = (q.T * CLASS_EMBED_NORM).astype(np.float32)
    table.setflags(write=False)
    return table


def box_encoding(box: Sequence[float], dim: int) -> np.ndarray:
    """Smooth sinusoidal code of (cx, cy, w, h), tiled or cut to ``dim``."""
    x, y, w, h = (float(v) for v in box)
    coords = np.array([x + w / 2, y + h / 2, w, h])
    freqs = (math.pi / 2) * 2.0 ** np.arange(6)
    angles = coords[:, None] * freqs[None, :]
    code = np.concatenate([np.sin(angles), np.cos(angles)], axis=1).ravel()
    reps = -(-dim // code.size)
    return (BOX_ENCODING_SCALE * np.tile(code, reps)[:dim]).astype(np.float32)


def synth_features(
    box: Sequence[float],
    class_label: int,
    rng: np.random.Generator,
    *,
    dim: int = 48,
    num_classes: int = 35,
    noise: float = 0.05,
) -> np.ndarray:
    """Instance feature: class embedding + box encoding + bounded uniform noise."""
    emb = class_embedding_table(num_classes, dim)[class_label]
    jitter = rng.uniform(-noise, noise, size=dim) if noise > 0 else np.zeros(dim)
    return (emb + box_encoding(box, dim) + jitter).astype(np.float32)


def synth_union_features(
    box: Sequence[float],
    subject_label: int,
    object_label: int,
    rng: np.random.Generator,
    *,
    dim: int = 48,
    num_classes: int = 35,
    noise: float = 0.05,
) -> np.ndarray:
    table = class_embedding_table(num_classes, dim)
    jitter = rng.uniform(-noise, noise, size=dim) if noise > 0 else np.zeros(dim)
    feat = (
        box_encoding(box, dim)
        + UNION_SUBJECT_WEIGHT * table[subject_label]
        + UNION_OBJECT_WEIGHT * table[object_label]
        + jitter
    )
    return feat.astype(np.float32)


# --------------------------------------------------------------------------
# geometric predicate rules


@dataclass(frozen=True)
class PairGeometry:
    box_i: tuple[float, float, float, float]
    box_j: tuple[float, float, float, float]
    prev_center_i: tuple[float, float]
    prev_center_j: tuple[float, float]

    @property
    def center_i(self) -> tuple[float, float]:
        x, y, w, h = self.box_i
        return (x + w / 2, y + h / 2)

    @property
    def center_j(self) -> tuple[float, float]:
        x, y, w, h = self.box_j
        return (x + w / 2, y + h / 2)


def _iou(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _inside(a, b) -> bool:
    """True iff box a lies within box b."""
    return a[0] >= b[0] and a[1] >= b[1] and a[0] + a[2] <= b[0] + b[2] and a[1] + a[3] <= b[1] + b[3]


def _axis_gap(a0, a1, b0, b1) -> float:
    return max(0.0, max(a0, b0) - min(a1, b1))


def _rule_context(g: PairGeometry, p: RuleParams) -> dict:
    (cxi, cyi), (cxj, cyj) = g.center_i, g.center_j
    dx, dy = cxj - cxi, cyj - cyi
    px, py = g.prev_center_j[0] - g.prev_center_i[0], g.prev_center_j[1] - g.prev_center_i[1]
    vi = (cxi - g.prev_center_i[0], cyi - g.prev_center_i[1])
    vj = (cxj - g.prev_center_j[0], cyj - g.prev_center_j[1])
    bi, bj = g.box_i, g.box_j
    gap_x = _axis_gap(bi[0], bi[0] + bi[2], bj[0], bj[0] + bj[2])
    gap_y = _axis_gap(bi[1], bi[1] + bi[3], bj[1], bj[1] + bj[3])
    return {
        "dx": dx,
        "dy": dy,
        "d": math.hypot(dx, dy),
        "d_prev": math.hypot(px, py),
        "speed_i": math.hypot(*vi),
        "speed_j": math.hypot(*vj),
        "rel_speed": math.hypot(vi[0] - vj[0], vi[1] - vj[1]),
        "iou": _iou(bi, bj),
        "gap_x": gap_x,
        "gap_y": gap_y,
        "area_i": bi[2] * bi[3],
        "area_j": bj[2] * bj[3],
        "p": p,
        "g": g,
    }


def _horizontal(c) -> bool:
    return abs(c["dx"]) >= abs(c["dy"])


PREDICATE_RULES: dict[str, Callable[[dict], bool]] = {
    "approaching": lambda c: c["d"] < c["d_prev"] - c["p"].motion_eps,
    "receding": lambda c: c["d"] > c["d_prev"] + c["p"].motion_eps,
    "moving_with": lambda c: c["speed_i"] > c["p"].motion_eps
    and c["speed_j"] > c["p"].motion_eps
    and c["rel_speed"] <= c["p"].motion_eps,
    "passing_by": lambda c: max(c["speed_i"], c["speed_j"]) > c["p"].motion_eps,
    "left_of": lambda c: c["dx"] > c["p"].margin and _horizontal(c),
    "right_of": lambda c: -c["dx"] > c["p"].margin and _horizontal(c),
    "above": lambda c: c["dy"] > c["p"].margin and not _horizontal(c),
    "below": lambda c: -c["dy"] > c["p"].margin and not _horizontal(c),
    "far_left_of": lambda c: c["dx"] > c["p"].far_axis and _horizontal(c),
    "far_right_of": lambda c: -c["dx"] > c["p"].far_axis and _horizontal(c),
    "far_above": lambda c: c["dy"] > c["p"].far_axis and not _horizontal(c),
    "far_below": lambda c: -c["dy"] > c["p"].far_axis and not _horizontal(c),
    "next_to": lambda c: c["d"] < c["p"].next_to_dist and abs(c["dy"]) < c["p"].margin,
    "near": lambda c: c["d"] < c["p"].near_dist,
    "far_from": lambda c: c["d"] > c["p"].far_dist,
    "stacked_above": lambda c: c["gap_x"] == 0.0 and c["dy"] > 0 and 0.0 < c["gap_y"] <= c["p"].stack_gap,
    "stacked_below": lambda c: c["gap_x"] == 0.0 and c["dy"] < 0 and 0.0 < c["gap_y"] <= c["p"].stack_gap,
    "overlapping": lambda c: c["iou"] > 0,
    "contains": lambda c: _inside(c["g"].box_j, c["g"].box_i),
    "inside": lambda c: _inside(c["g"].box_i, c["g"].box_j),
    "touching": lambda c: c["iou"] == 0 and max(c["gap_x"], c["gap_y"]) <= c["p"].touch_gap,
    "in_front_of": lambda c: c["iou"] > 0 and c["area_i"] > c["p"].size_ratio * c["area_j"],
    "behind": lambda c: c["iou"] > 0 and c["area_j"] > c["p"].size_ratio * c["area_i"],
    "covering": lambda c: c["iou"] >= c["p"].strong_iou and c["area_i"] >= c["area_j"],
    "covered_by": lambda c: c["iou"] >= c["p"].strong_iou and c["area_i"] < c["area_j"],
}


def satisfied_predicates(geom: PairGeometry, active: Sequence[Predicate], params: RuleParams) -> list[Predicate]:
    ctx = _rule_context(geom, params)
    return [p for p in active if PREDICATE_RULES[p.name](ctx)]


def precedence_key(pred: Predicate) -> tuple[int, int]:
    order = load_taxonomy().group_precedence
    return (order.index(pred.group), pred.priority)


def thinning_uniform(seed: int, video_id: int, frame_index: int, track_i: int, track_j: int, pred_id: int) -> float:
    """Deterministic U[0,1) draw used by the long-tail annotation thinning."""
    key = f"{seed}:{video_id}:{frame_index}:{track_i}:{track_j}:{pred_id}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2.0**64


def annotate_frame(
    boxes: np.ndarray,
    prev_centers: np.ndarray,
    track_ids: np.ndarray,
    *,
    video_id: int,
    frame_index: int,
    config: SceneConfig,
) -> tuple[list[tuple[int, int, int]], int]:
    """Apply the published rules to one frame.

    Returns the sorted triplet list (local predicate ids) and the number of
    candidate triplets before thinning.
    """
    active = config.active_predicates()
    local = {p.id: k for k, p in enumerate(active)}
    candidates = []
    n = len(boxes)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            geom = PairGeometry(
                tuple(float(v) for v in boxes[i]),
                tuple(float(v) for v in boxes[j]),
                (float(prev_centers[i, 0]), float(prev_centers[i, 1])),
                (float(prev_centers[j, 0]), float(prev_centers[j, 1])),
            )
            hits = satisfied_predicates(geom, active, config.rules)
            if config.single_label and hits:
                hits = [min(hits, key=precedence_key)]
            candidates.extend((i, local[p.id], j) for p in hits)
    kept = []
    for s, r, o in candidates:
        keep_prob = (r + 1.0) ** (-config.skew)
        u = thinning_uniform(config.rng_seed, video_id, frame_index, int(track_ids[s]), int(track_ids[o]), active[r].id)
        if u < keep_prob:
            kept.append((s, r, o))
    if candidates and not kept:
        kept = [min(candidates, key=lambda t: (t[1], t[0], t[2]))]
    return sorted(kept), len(candidates)


# --------------------------------------------------------------------------
# generation


def _simulate_video(config: SceneConfig, video_id: int, attempt: int):
    rng = np.random.default_rng([config.rng_seed, video_id, attempt])
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    steps = config.frames_per_video + 1  # one pre-roll frame for motion rules
    labels = rng.integers(0, config.object_classes, size=n)
    sizes = rng.uniform(*config.size_range, size=(n, 2))
    centers = np.empty((steps, n, 2))
    for k in range(n):
        half = sizes[k] / 2
        c = rng.uniform(half, 1 - half)
        static = rng.random() < config.static_prob
        angle = rng.uniform(0, 2 * math.pi)
        speed = 0.0 if static else rng.uniform(*config.speed_range)
        v = speed * np.array([math.cos(angle), math.sin(angle)])
        for t in range(steps):
            centers[t, k] = c
            step = v + (rng.normal(0, config.trajectory_jitter, 2) if not static else 0.0)
            c = c + step
            for a in range(2):
                if c[a] - half[a] < 0 or c[a] + half[a] > 1:
                    v[a] = -v[a]
                    c[a] = min(max(c[a], half[a]), 1 - half[a])
    entry = np.zeros(n, dtype=np.int64)
    for k in range(2, n):
        if rng.random() < config.entry_prob:
            entry[k] = int(rng.integers(1, config.frames_per_video))
    return rng, labels, sizes, centers, entry


def _boxes_from(centers: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    return np.concatenate([centers - sizes / 2, sizes], axis=1)


def _detector_boxes(gt: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    out = gt + rng.normal(0, sigma, size=gt.shape) if sigma > 0 else gt.copy()
    out[:, 2:] = np.clip(out[:, 2:], 0.01, 1.0)
    out[:, 0] = np.clip(out[:, 0], 0.0, 1.0 - out[:, 2])
    out[:, 1] = np.clip(out[:, 1], 0.0, 1.0 - out[:, 3])
    return out


def _observe(
    config: SceneConfig,
    video_id: int,
    frame_index: int,
    boxes: np.ndarray,
    labels: np.ndarray,
    track_ids: np.ndarray,
    scores: np.ndarray,
) -> FrameObservation:
    """Extract features at the given boxes; noise streams are keyed by track, not box."""
    n = len(boxes)
    d, c = config.d_obj, config.object_classes
    feats = np.empty((n, d), dtype=np.float32)
    unions = np.empty((n, n, d), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([config.rng_seed, video_id, frame_index, _OBJ_STREAM, int(track_ids[i])])
        feats[i] = synth_features(boxes[i], int(labels[i]), rng, dim=d, num_classes=c, noise=config.feature_noise)
        for j in range(n):
            rng = np.random.default_rng(
                [config.rng_seed, video_id, frame_index, _UNION_STREAM, int(track_ids[i]), int(track_ids[j])]
            )
            unions[i, j] = synth_union_features(
                union_box(boxes[i], boxes[j]), int(labels[i]), int(labels[j]), rng,
                dim=d, num_classes=c, noise=config.feature_noise,
            )
    return FrameObservation(frame_index, boxes.astype(np.float32), labels.astype(np.int64),
                            scores.astype(np.float32), feats, unions, track_ids.astype(np.int64))


def _generate_video(config: SceneConfig, video_id: int, max_attempts: int = 200) -> list[FrameRecord]:
    for attempt in range(max_attempts):
        rng, labels, sizes, centers, entry = _simulate_video(config, video_id, attempt)
        frames = []
        for t in range(config.frames_per_video):
            present = np.flatnonzero(entry <= t)
            tracks = present.astype(np.int64)
            gt_boxes = _boxes_from(centers[t + 1, present], sizes[present]).astype(np.float32)
            prev = centers[t, present].astype(np.float32)
            triplets, _ = annotate_frame(gt_boxes, prev, tracks, video_id=video_id, frame_index=t, config=config)
            if not triplets:
                break
            det_boxes = _detector_boxes(gt_boxes.astype(np.float64), config.box_jitter, rng).astype(np.float32)
            onehot = np.eye(config.object_classes)[labels[present]]
            mix = rng.random((len(present), config.object_classes))
            mix /= mix.sum(axis=1, keepdims=True)
            scores = (1 - config.class_noise) * onehot + config.class_noise * mix
            obs = _observe(config, video_id, t, det_boxes, labels[present], tracks, scores)
            oracle = _observe(config, video_id, t, gt_boxes, labels[present], tracks, onehot)
            gt = GroundTruthGraph(t, triplets, gt_boxes, labels[present].astype(np.int64), tracks, prev, oracle)
            frames.append(FrameRecord(video_id, t, obs, gt))
        else:
            return frames
    raise ConfigError(
        f"video {video_id}: no trajectory with a triplet in every frame after {max_attempts} attempts; "
        "the active predicate set is probably too restrictive"
    )


def generate_dataset(config: SceneConfig, n_max: int | None = None) -> Dataset:
    config.validate(n_max)
    videos = [_generate_video(config, v) for v in range(config.num_videos)]
    return Dataset(config, config.active_predicates(), videos)


# --------------------------------------------------------------------------
# JSONL serialization


def _fmt(a) -> str:
    arr = np.asarray(a)
    if arr.ndim == 0:
        v = arr.item()
        return f"{v:.9g}" if isinstance(v, float) else str(v)
    return "[" + ",".join(_fmt(x) for x in arr) + "]"


def frame_to_json(rec: FrameRecord) -> str:
    o, g = rec.obs, rec.gt
    parts = [
        ("video_id", str(rec.video_id)),
        ("frame_index", str(rec.frame_index)),
        ("track_ids", _fmt(o.track_ids)),
        ("boxes", _fmt(o.boxes)),
        ("labels", _fmt(g.labels)),
        ("scores", _fmt(o.class_scores)),
        ("features", _fmt(o.object_features)),
        ("unions", _fmt(o.union_features)),
        ("gt_boxes", _fmt(g.boxes)),
        ("gt_features", _fmt(g.oracle.object_features)),
        ("gt_unions", _fmt(g.oracle.union_features)),
        ("prev_centers", _fmt(g.prev_centers)),
        ("triplets", json.dumps([list(t) for t in g.triplets], separators=(",", ":"))),
    ]
    return "{" + ",".join(f'"{k}":{v}' for k, v in parts) + "}"


def frame_from_json(line: str, config: SceneConfig) -> FrameRecord:
    r = json.loads(line)
    f32 = lambda key, shape_tail: np.asarray(r[key], dtype=np.float32).reshape((-1,) + shape_tail)
    n = len(r["track_ids"])
    tracks = np.asarray(r["track_ids"], dtype=np.int64)
    labels = np.asarray(r["labels"], dtype=np.int64)
    d = config.d_obj
    unions = np.asarray(r["unions"], dtype=np.float32).reshape(n, n, d)
    gt_unions = np.asarray(r["gt_unions"], dtype=np.float32).reshape(n, n, d)
    obs = FrameObservation(r["frame_index"], f32("boxes", (4,)), labels, f32("scores", (config.object_classes,)),
                           f32("features", (d,)), unions, tracks)
    onehot = np.eye(config.object_classes, dtype=np.float32)[labels]
    oracle = FrameObservation(r["frame_index"], f32("gt_boxes", (4,)), labels, onehot,
                              f32("gt_features", (d,)), gt_unions, tracks)
    gt = GroundTruthGraph(r["frame_index"], [tuple(t) for t in r["triplets"]], oracle.boxes, labels, tracks,
                          f32("prev_centers", (2,)), oracle)
    return FrameRecord(r["video_id"], r["frame_index"], obs, gt)


def manifest(dataset: Dataset) -> dict:
    tax = load_taxonomy()
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "taxonomy_version": tax.version,
        "group_precedence": list(tax.group_precedence),
        "predicates": [
            {"local_id": k, "id": p.id, "name": p.name, "group": p.group, "priority": p.priority}
            for k, p in enumerate(dataset.predicates)
        ],
        "config": dataset.config.to_dict(),
        "num_frames": sum(len(v) for v in dataset.videos),
    }


def write_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write ``<path>`` (JSONL, one frame per line) and ``<path>.manifest.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in dataset.frames():
            fh.write(frame_to_json(rec) + "\n")
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest(dataset), indent=2, sort_keys=True) + "\n")
    return path


def scene_config_from_dict(d: dict) -> SceneConfig:
    return SceneConfig(**d)


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".manifest.json").read_text())
    if meta["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta['format_version']}")
    config = scene_config_from_dict(meta["config"])
    videos: dict[int, list[FrameRecord]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = frame_from_json(line, config)
                videos.setdefault(rec.video_id, []).append(rec)
    return Dataset(config, config.active_predicates(), [videos[k] for k in sorted(videos)])


def iter_frames(datasets: Iterable[Dataset]) -> Iterator[FrameRecord]:
    for ds in datasets:
        yield from ds.frames()
