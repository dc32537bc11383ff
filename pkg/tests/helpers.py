"""Small fixtures shared across test modules."""

import numpy as np

from scenediff.config import desk_config
from scenediff.synthetic import FrameObservation, GroundTruthGraph


def make_obs(n, d_obj=4, frame_index=0, seed=0, boxes=None, num_classes=5, track_ids=None):
    rng = np.random.default_rng(seed)
    if boxes is None:
        wh = rng.uniform(0.05, 0.3, size=(n, 2))
        xy = rng.uniform(0, 1, size=(n, 2)) * (1 - wh)
        boxes = np.concatenate([xy, wh], axis=1)
    labels = rng.integers(0, num_classes, size=n)
    scores = rng.dirichlet(np.ones(num_classes), size=n) if n else np.zeros((0, num_classes))
    return FrameObservation(
        frame_index,
        np.asarray(boxes, dtype=np.float32).reshape(n, 4),
        labels.astype(np.int64),
        scores.astype(np.float32),
        rng.normal(size=(n, d_obj)).astype(np.float32),
        rng.normal(size=(n, n, d_obj)).astype(np.float32),
        np.arange(n, dtype=np.int64) if track_ids is None else np.asarray(track_ids, dtype=np.int64),
    )


def make_gt(obs, triplets):
    centers = obs.boxes[:, :2] + obs.boxes[:, 2:] / 2
    return GroundTruthGraph(obs.frame_index, list(triplets), obs.boxes, obs.class_labels, obs.track_ids,
                            centers, obs)


def tiny_config(**extra):
    sections = dict(
        scene={"num_videos": 4, "frames_per_video": 3, "max_objects": 4, "d_obj": 8, "object_classes": 8},
        graph={"n_max": 4, "d_box": 8},
        denoiser={"depth": 1, "base_width": 8, "time_dim": 8, "groups": 4},
        readout={"hidden": 16},
        stage1={"epochs": 2, "pairs_per_batch": 64, "eval_frames": 8},
        stage2={"epochs": 2, "batch_frames": 4},
    )
    for key, value in extra.items():
        sections[key] = {**sections.get(key, {}), **value}
    return desk_config(**sections)
