"""Command line entry point: ``xltransfer <command> ...``.

Phase commands share ``--config/--seed/--output-dir/--preset``. A preset
builds the config; ``--config`` loads one from YAML or JSON instead.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ExperimentConfig, PhaseConfig, load_config, save_config
from .exceptions import CheckpointError, ConfigurationError, SchemaError
from .report import TaskResult, delta_table, render, results_from_manifest, select_best


def _reseed(cfg: ExperimentConfig, seed):
    """Preset seeding scheme: encoder/pretrain ``seed``, intermediate ``seed+1``, targets ``seed+2``."""
    cfg.encoder_seed = seed
    if isinstance(cfg.pretrain, PhaseConfig):
        cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=seed)
    if cfg.intermediate is not None:
        cfg.intermediate = dataclasses.replace(cfg.intermediate, seed=seed + 1)
    cfg.targets = [dataclasses.replace(t, phase=dataclasses.replace(t.phase, seed=seed + 2)) if t.phase else t
                   for t in cfg.targets]
    return cfg


def build_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.seed is not None:
            _reseed(cfg, args.seed)
    else:
        cfg = PRESETS[args.preset](seed=args.seed or 0)
    if getattr(args, "world", None):
        cfg.world = args.world
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def _phase_config(args, command):
    cfg = build_config(args)
    ckpt = getattr(args, "checkpoint", None)
    if command == "pretrain":
        cfg.intermediate, cfg.targets = None, []
    elif command == "intermediate":
        if cfg.intermediate is None:
            raise ConfigurationError("the config has no intermediate phase")
        cfg.targets = []
    elif command == "target":
        cfg.intermediate = None
    if command in ("intermediate", "target"):
        if not ckpt:
            raise ConfigurationError(f"{command} needs --checkpoint (output of the previous phase)")
        cfg.pretrain = str(ckpt)
    return cfg


def cmd_gen_data(args):
    from .trainer import build_world
    cfg = build_config(args)
    if isinstance(cfg.world, str):
        raise ConfigurationError("gen-data needs a world config, not a saved world")
    out = Path(args.output_dir or "world")
    world = build_world(cfg)
    path = world.save(out)
    print(json.dumps({"world": str(path), "languages": world.languages,
                      "tasks": sorted(world.tasks), "vocab_size": len(world.tokenizer)}))
    return 0


def _summary(manifest):
    rows = []
    for task, rec in manifest.get("targets", {}).items():
        for r in rec.get("metrics", []):
            if r.get("split", "test") == "test":
                rows.append(f"{task:12s} {r['language']:4s} {r['metric']:9s} {r['value']:7.2f}")
    return "\n".join(rows)


def cmd_phase(args):
    from .trainer import run_experiment
    cfg = _phase_config(args, args.command)
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        save_config(cfg, Path(cfg.output_dir) / "config.yaml")
    manifest, _ = run_experiment(cfg)
    text = _summary(manifest)
    if text:
        print(text)
    print(json.dumps({"status": manifest["status"], "config_hash": manifest["config_hash"],
                      "output_dir": cfg.output_dir}))
    return 0


def _load_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return json.loads(p.read_text(encoding="utf-8"))


def _run_specs(specs):
    """``label=path`` or bare ``path`` (label: the manifest's directory name)."""
    out = {}
    for spec in specs:
        label, sep, path = spec.partition("=")
        if not sep:
            path = label
            p = Path(path)
            label = (p if p.is_dir() else p.parent).name or path
        if label in out:
            raise ConfigurationError(f"duplicate run label {label!r}")
        out[label] = path
    return out


def _load_results(path, split):
    """Task results from a run manifest or a plain ``{task: {metric: {lang: value}}}`` file."""
    data = _load_manifest(path)
    if "targets" in data:
        return results_from_manifest(data, split)
    return {t: TaskResult(t, v, split) for t, v in data.items()}


def cmd_report(args):
    if args.action == "best":
        runs = {label: results_from_manifest(_load_manifest(path), "dev")
                for label, path in _run_specs(args.runs).items()}
        sel = select_best(runs)
        if args.format == "data":
            print(json.dumps({t: dataclasses.asdict(s) for t, s in sel.items()}, indent=1, sort_keys=True))
            return 0
        for task, s in sel.items():
            flags = [f for f, on in (("tie", s.tie), ("not-dev-split", s.eval_split_flag)) if on]
            print(f"{task:12s} {s.run:20s} {s.score:7.2f}" + (f"  [{', '.join(flags)}]" if flags else ""))
        return 0
    if not args.baseline:
        raise ConfigurationError("report needs --baseline")
    base = _load_results(args.baseline, args.split)
    runs, prov = {}, {}
    for label, path in _run_specs(args.runs).items():
        runs[label] = _load_results(path, args.split)
        prov[label] = {"source": str(path)}
    prov[args.baseline_label] = {"source": str(args.baseline)}
    table = delta_table(base, runs, args.baseline_label, prov)
    sys.stdout.write(render(table, args.format))
    if args.format == "data":
        sys.stdout.write("\n")
    return 0


def _common(p):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")


def make_parser():
    parser = argparse.ArgumentParser(prog="xltransfer",
                                     description="Intermediate-task transfer experiments on a synthetic multilingual world.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the synthetic world")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    for name, helptext in (("pretrain", "MLM pretraining only"),
                           ("intermediate", "intermediate-task training from a checkpoint"),
                           ("target", "target fine-tuning and evaluation from a checkpoint"),
                           ("run", "every configured phase")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--world", help="saved world.json to use instead of generating one")
        if name in ("intermediate", "target"):
            p.add_argument("--checkpoint", help="checkpoint from the previous phase")
        p.set_defaults(func=cmd_phase)

    p = sub.add_parser("report", help="delta tables against a baseline, or best-run selection")
    p.add_argument("action", nargs="?", choices=["best"], help="'best': pick the best run per task on dev")
    p.add_argument("--baseline", help="baseline manifest (or results JSON)")
    p.add_argument("--baseline-label", default="baseline")
    p.add_argument("--runs", nargs="+", required=True, help="manifests, optionally as label=path")
    p.add_argument("--format", choices=["plain", "markdown", "data"], default="plain")
    p.add_argument("--split", default="test", help="split to report (falls back per task)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, SchemaError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
