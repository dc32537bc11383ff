"""Command line entry point.

Relative output paths land under the artifact root (``$SCENEDIFF_ARTIFACTS``,
default ``./artifacts``). Every command exits 0 only on full success.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import yaml

from . import evaluation
from .ablation import AblationSpec, run_ablation
from .config import RunConfig, config_from_dict, dump_config, load_config, resolve_artifact
from .evaluation import InvariantError, write_predictions
from .plots import plot_losses, plot_recall
from .runner import evaluate_both, infer_dataset, permutation_baseline
from .synthetic import ConfigError, Dataset, generate_dataset, read_dataset, write_dataset
from .training import TrainingDiverged, load_model, train_stage1, train_stage2

log = logging.getLogger("scenediff")


def _config(args) -> RunConfig:
    cfg = load_config(args.config, desk=args.desk)
    for item in args.set or []:
        key, _, raw = item.partition("=")
        section, _, name = key.partition(".")
        data = cfg.to_dict()
        if section not in data or (name and name not in data[section]):
            raise ConfigError(f"unknown config field {key}")
        if name:
            data[section][name] = yaml.safe_load(raw)
        else:
            data[section] = yaml.safe_load(raw)
        cfg = config_from_dict(data)
    cfg.validate()
    return cfg


def _with_scene(cfg: RunConfig, dataset: Dataset) -> RunConfig:
    """The dataset's own scene settings win over the config file's."""
    cfg = dataclasses.replace(cfg, scene=dataset.config)
    cfg.validate()
    return cfg


def _echo(cfg: RunConfig, artifact: Path) -> None:
    dump_config(cfg, artifact.with_name(artifact.name + ".config.yaml"))


def cmd_synth(args) -> None:
    cfg = _config(args)
    scene = cfg.scene
    if args.seed is not None:
        scene = dataclasses.replace(scene, rng_seed=args.seed)
    if args.videos is not None:
        scene = dataclasses.replace(scene, num_videos=args.videos)
    ds = generate_dataset(scene, cfg.graph.n_max)
    out = write_dataset(ds, resolve_artifact(args.out))
    print(f"wrote {sum(len(v) for v in ds.videos)} frames to {out}")


def cmd_train_stage1(args) -> None:
    ds = read_dataset(resolve_artifact(args.data))
    cfg = _with_scene(_config(args), ds)
    out = resolve_artifact(args.out)
    resume = resolve_artifact(args.resume) if args.resume else None
    res = train_stage1(ds, cfg, out, resume_from=resume)
    _echo(cfg, out)
    plot_losses({"train (per step)": res.step_losses}, out.with_name(out.name + ".loss.png"))
    plot_losses({"eval": res.eval_losses}, out.with_name(out.name + ".eval_loss.png"), xlabel="epoch")
    print(f"stage1 eval loss {res.eval_losses[0]:.4f} -> {res.eval_losses[-1]:.4f}; checkpoint {out}")


def cmd_train_stage2(args) -> None:
    ds = read_dataset(resolve_artifact(args.data))
    stage1 = resolve_artifact(args.stage1)
    cfg = None
    if args.config or args.set:
        cfg = _with_scene(_config(args), ds)
    out = resolve_artifact(args.out)
    res = train_stage2(ds, stage1, cfg, out, resume_from=resolve_artifact(args.resume) if args.resume else None)
    _, _, _, used = load_model(out)
    _echo(used, out)
    curves = {k: [d[k] for d in res.step_losses] for k in ("total", "pred", "obj", "box")}
    plot_losses(curves, out.with_name(out.name + ".loss.png"))
    print(f"stage2 final loss {res.step_losses[-1]['total']:.4f}; lr {res.lrs[0]:.2e} -> {res.lrs[-1]:.2e}; checkpoint {out}")


def cmd_infer(args) -> None:
    net, heads, schedule, cfg = load_model(resolve_artifact(args.checkpoint))
    ds = read_dataset(resolve_artifact(args.data))
    preds, _ = infer_dataset(ds, cfg, net, heads, schedule, args.protocol)
    out = write_predictions(preds, resolve_artifact(args.out))
    print(f"wrote {len(preds)} frame predictions to {out}")


def cmd_eval(args) -> None:
    net, heads, schedule, cfg = load_model(resolve_artifact(args.checkpoint))
    ds = read_dataset(resolve_artifact(args.data))
    protocol = args.protocol or cfg.eval.protocol
    eval_cfg = dataclasses.replace(cfg.eval, protocol=protocol)
    preds, gts = infer_dataset(ds, cfg, net, heads, schedule, protocol)
    with_rep, without_rep = evaluate_both(preds, gts, eval_cfg)
    extra = {"config": cfg.to_dict()}
    if args.baseline_shuffles:
        k = eval_cfg.ks[0]
        base = permutation_baseline(preds, gts, eval_cfg, k, args.baseline_shuffles, cfg.seed)
        extra["permutation_baseline"] = {"k": k, "mean": base.mean, "std": base.std, "shuffles": args.baseline_shuffles}
    out = resolve_artifact(args.out)
    try:
        evaluation.write_report(with_rep, without_rep, out, extra=extra, strict=not args.no_strict)
    finally:
        plot_recall([with_rep, without_rep], out.with_suffix(".png"))
    ks = ", ".join(f"R@{k} {with_rep.recall[k]:.4f}/{without_rep.recall[k]:.4f}" for k in eval_cfg.ks)
    print(f"{protocol} (with/without): {ks}; report {out}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    train = read_dataset(resolve_artifact(args.data))
    held = read_dataset(resolve_artifact(args.eval_data))
    cfg = _with_scene(cfg, train)
    spec_data = yaml.safe_load(Path(args.spec).read_text()) if args.spec else {}
    spec = AblationSpec.from_dict(spec_data)
    out_dir = resolve_artifact(args.out)
    table = run_ablation(spec, train, held, cfg, out_dir, args.protocol)
    print(table.to_markdown())


def cmd_config(args) -> None:
    cfg = _config(args)
    sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenediff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML or JSON run config (missing keys take defaults)")
            sp.add_argument("--desk", action="store_true", help="layer the single-CPU preset under the config")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--videos", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train-stage1", help="train the denoiser"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train_stage1)

    sp = common(sub.add_parser("train-stage2", help="train the readout heads on a frozen denoiser"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train_stage2)

    sp = common(sub.add_parser("infer", help="online inference to prediction JSONL"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", default="SGDET", choices=evaluation.PROTOCOLS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("eval", help="recall report for a trained model"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", choices=evaluation.PROTOCOLS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--baseline-shuffles", type=int, default=0)
    sp.add_argument("--no-strict", action="store_true", help="write the report even if an invariant fails")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="train and evaluate toggle combinations"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--spec", help="YAML mapping toggle -> list of values")
    sp.add_argument("--protocol", choices=evaluation.PROTOCOLS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("config", help="print the fully defaulted config"))
    sp.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
