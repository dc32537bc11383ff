"""Desk-scale experiments: training sanity and the temporal-conditioning study."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, desk_config, merge
from .runner import evaluate_model, permutation_baseline
from .synthetic import generate_dataset
from .training import load_model, train_stage1, train_stage2


@dataclass
class SanityResult:
    eval_losses: list[float]
    loss_drop: float  # 1 - final / initial
    recall: float
    baseline: float
    baseline_std: float
    k: int
    seconds: float
    checkpoint: Path

    @property
    def ratio(self) -> float:
        return self.recall / self.baseline if self.baseline > 0 else float("inf")


def training_sanity(out_dir: str | Path, config: RunConfig | None = None, eval_videos: int = 50,
                    shuffles: int = 100) -> SanityResult:
    """Two-stage training on the default desk dataset, then held-out PredCLS R@K (with constraint)
    against the predicate-shuffle baseline."""
    t0 = time.time()
    out_dir = Path(out_dir)
    cfg = config or desk_config()
    train = generate_dataset(cfg.scene, cfg.graph.n_max)
    s1 = train_stage1(train, cfg, out_dir / "stage1.ckpt")
    train_stage2(train, out_dir / "stage1.ckpt", cfg, out_dir / "stage2.ckpt")
    net, heads, schedule, cfg = load_model(out_dir / "stage2.ckpt")
    held = generate_dataset(dataclasses.replace(cfg.scene, rng_seed=cfg.scene.rng_seed + 1, num_videos=eval_videos),
                            cfg.graph.n_max)
    with_rep, _, preds = evaluate_model(held, cfg, net, heads, schedule, "PredCLS", out_dir / "predcls_report.json")
    gts = [rec.gt for video in held.videos for rec in video]
    k = cfg.eval.ks[0]
    base = permutation_baseline(preds, gts, dataclasses.replace(cfg.eval, protocol="PredCLS"), k, shuffles, cfg.seed)
    losses = s1.eval_losses
    return SanityResult(losses, 1 - losses[-1] / losses[0], with_rep.recall[k], base.mean, base.std, k,
                        time.time() - t0, out_dir / "stage2.ckpt")


MOTION_PREDICATES = ("approaching", "receding")


def temporal_config(seed: int, num_videos: int = 60, epochs: int = 12) -> RunConfig:
    return desk_config(**merge(
        {"scene": {"predicate_names": list(MOTION_PREDICATES), "num_videos": num_videos, "rng_seed": 100 + seed}},
        {"stage1": {"epochs": epochs, "seed": seed}, "stage2": {"seed": seed}, "seed": seed},
    ))


@dataclass
class TemporalReplicate:
    seed: int
    unconditioned: float
    conditioned: float
    conditioned_motion: float
    seconds: float


def temporal_replicate(seed: int, out_dir: str | Path, num_videos: int = 60, epochs: int = 12,
                       eval_videos: int = 40) -> TemporalReplicate:
    """R@K (PredCLS, with constraint) on approaching/receding data for three settings sharing all seeds:
    unconditioned, conditioned, and conditioned with motion injection."""
    t0 = time.time()
    out_dir = Path(out_dir)
    base = temporal_config(seed, num_videos, epochs)
    train = generate_dataset(base.scene, base.graph.n_max)
    held = generate_dataset(dataclasses.replace(base.scene, rng_seed=1000 + seed, num_videos=eval_videos),
                            base.graph.n_max)
    k = base.eval.ks[0]
    scores = {}
    for name, conditioning, motion in [("unconditioned", False, False), ("conditioned", True, False),
                                       ("conditioned_motion", True, True)]:
        cfg = dataclasses.replace(base, temporal=dataclasses.replace(base.temporal, conditioning=conditioning,
                                                                     motion=motion))
        s1_path = out_dir / f"stage1_cond{int(conditioning)}.ckpt"
        if not s1_path.exists():
            train_stage1(train, cfg, s1_path)
        s2_path = out_dir / f"stage2_{name}.ckpt"
        train_stage2(train, s1_path, cfg, s2_path)
        net, heads, schedule, used = load_model(s2_path)
        with_rep, _, _ = evaluate_model(held, used, net, heads, schedule, "PredCLS", out_dir / f"{name}_report.json")
        scores[name] = with_rep.recall[k]
    return TemporalReplicate(seed, scores["unconditioned"], scores["conditioned"], scores["conditioned_motion"],
                             time.time() - t0)
