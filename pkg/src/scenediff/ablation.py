"""Ablation runner: train and evaluate every combination of a set of toggles.

Runs that differ only in inference-side settings (motion injection, readout
mode) reuse one stage-1 training, and all runs share the same seeds.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, config_from_dict, nested_get, nested_set
from .evaluation import MetricReport
from .runner import evaluate_model
from .synthetic import ConfigError, Dataset
from .training import load_model, stage1_key, train_stage1, train_stage2

log = logging.getLogger(__name__)

# toggle name -> the single config field it controls
TOGGLE_FIELDS = {
    "conditioning": "temporal.conditioning",
    "motion": "temporal.motion",
    "union": "graph.union",
    "subject_feature": "graph.subject_feature",
    "subject_location": "graph.subject_location",
    "steps": "diffusion.steps",
    "depth": "denoiser.depth",
    "readout": "readout.mode",
}


@dataclass
class AblationSpec:
    toggles: dict[str, list] = field(default_factory=dict)

    def validate(self) -> None:
        for name, values in self.toggles.items():
            if name not in TOGGLE_FIELDS:
                raise ConfigError(f"unknown ablation toggle {name!r}; choose from {sorted(TOGGLE_FIELDS)}")
            if not values:
                raise ConfigError(f"toggle {name!r} has no values")

    def combinations(self) -> list[dict]:
        self.validate()
        names = list(self.toggles)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.toggles[n] for n in names))]

    @classmethod
    def from_dict(cls, data: dict | None) -> "AblationSpec":
        return cls({k: list(v) for k, v in (data or {}).get("toggles", data or {}).items()})


def apply_toggles(config: RunConfig, setting: dict) -> RunConfig:
    cfg = config_from_dict(copy.deepcopy(config.to_dict()))
    for name, value in setting.items():
        nested_set(cfg, TOGGLE_FIELDS[name], value)
        if name == "steps":
            cfg.diffusion.reverse_steps_at_inference = value
    cfg.validate()
    return cfg


@dataclass
class AblationRow:
    setting: dict
    with_report: MetricReport
    without_report: MetricReport

    def metric(self, mode: str, kind: str, k: int) -> float:
        rep = self.with_report if mode == "with" else self.without_report
        return (rep.recall if kind == "R" else rep.mean_recall)[k]


@dataclass
class AblationTable:
    toggles: list[str]
    ks: tuple[int, ...]
    rows: list[AblationRow]

    def columns(self) -> list[tuple[str, str, int]]:
        return [(mode, kind, k) for mode in ("with", "without") for kind in ("R", "mR") for k in self.ks]

    def deltas(self) -> list[dict]:
        """Each row's metrics minus the first (baseline) row's."""
        base = self.rows[0]
        return [
            {f"{kind}@{k}[{mode}]": row.metric(mode, kind, k) - base.metric(mode, kind, k)
             for mode, kind, k in self.columns()}
            for row in self.rows
        ]

    def to_markdown(self) -> str:
        cols = self.columns()
        head = self.toggles + [f"{kind}@{k} {mode}" for mode, kind, k in cols]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for i, (row, delta) in enumerate(zip(self.rows, self.deltas())):
            cells = [str(row.setting.get(t)) for t in self.toggles]
            for mode, kind, k in cols:
                v = 100 * row.metric(mode, kind, k)
                d = 100 * delta[f"{kind}@{k}[{mode}]"]
                cells.append(f"{v:.1f}" if i == 0 else f"{v:.1f} ({d:+.1f})")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "toggles": self.toggles,
            "ks": list(self.ks),
            "rows": [
                {"setting": r.setting, "with": r.with_report.to_dict(), "without": r.without_report.to_dict(), "delta": d}
                for r, d in zip(self.rows, self.deltas())
            ],
        }


def run_ablation(
    spec: AblationSpec,
    train_set: Dataset,
    eval_set: Dataset,
    config: RunConfig,
    out_dir: str | Path,
    protocol: str | None = None,
) -> AblationTable:
    """Train and evaluate each toggle combination; the first combination is the baseline row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = spec.combinations() or [{}]
    stage1_ckpts: dict[str, Path] = {}
    rows = []
    for idx, setting in enumerate(settings):
        cfg = apply_toggles(config, setting)
        key = stage1_key(cfg)
        if key not in stage1_ckpts:
            path = out_dir / f"stage1_{len(stage1_ckpts)}.ckpt"
            train_stage1(train_set, cfg, path)
            stage1_ckpts[key] = path
        s2_path = out_dir / f"run_{idx}.ckpt"
        train_stage2(train_set, stage1_ckpts[key], cfg, s2_path)
        net, heads, schedule, _ = load_model(s2_path)
        with_rep, without_rep, _ = evaluate_model(
            eval_set, cfg, net, heads, schedule, protocol, out_dir / f"run_{idx}_report.json"
        )
        log.info("ablation %s: R@%d %.4f", setting, cfg.eval.ks[0], with_rep.recall[cfg.eval.ks[0]])
        rows.append(AblationRow(setting, with_rep, without_rep))
    table = AblationTable(list(spec.toggles), tuple(config.eval.ks), rows)
    (out_dir / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "ablation.md").write_text(table.to_markdown())
    return table


def current_values(config: RunConfig, names) -> dict:
    return {n: nested_get(config, TOGGLE_FIELDS[n]) for n in names}
