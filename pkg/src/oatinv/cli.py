"""Command line entry point: ``oatinv {simulate,train,evaluate,reproduce,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import KINDS, ConfigError, ExperimentConfig, load_config, parse_config, template_dict
from .errors import OatError
from .io import write_json, write_tensor
from .seeding import master_seed

def _tau_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from exc


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file or template, then command-line and ``OAT_SEED`` overrides."""
    experiment = getattr(args, "experiment", None)
    if args.config:
        doc = load_config(args.config).to_dict()
    elif experiment:
        doc = template_dict(experiment)
    else:
        raise ConfigError("give --config PATH or --experiment KIND")
    if experiment and doc["kind"] != experiment:
        raise ConfigError(f"config kind {doc['kind']!r} does not match --experiment {experiment}", "kind")
    doc["seed"] = args.seed if args.seed is not None else master_seed(doc.get("seed", 0))
    if args.out:
        doc["output_dir"] = str(args.out)
    if getattr(args, "tau", None):
        doc["taus"] = args.tau
    if args.threads:
        doc["workers"] = args.threads
    return parse_config(doc)


def cmd_simulate(args) -> int:
    from .harness import build_test_data, build_training_data

    config = resolve_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for env, split in zip(config.training_envs, build_training_data(config)):
        for part in ("train", "validation"):
            if not getattr(split, part):
                continue
            x, y = split.arrays(part)
            stem = f"{env.label or 'env'}_{part}".replace(" ", "_").replace("%", "pct")
            write_tensor(out / f"{stem}_lbp.oat", x, {"environment": env.model_dump(), "split": part})
            write_tensor(out / f"{stem}_target.oat", y, {"environment": env.model_dump(), "split": part})
    for label, test in build_test_data(config).items():
        write_tensor(out / f"test_{label}_lbp.oat", np.stack([s.lbp.data for s in test]), {"test": label})
        write_tensor(out / f"test_{label}_target.oat", np.stack([s.target for s in test]), {"test": label})
    write_json(out / "simulate_config.json", config.to_dict())
    print(f"wrote datasets to {out}")
    return 0


def cmd_train(args) -> int:
    from .harness import RunSeeds, build_training_data, method_name
    from .network import save_checkpoint
    from .training import pool_datasets, train_andmask, train_benchmark

    config = resolve_config(args)
    out = Path(config.output_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    seeds = RunSeeds(config.seed)
    network = config.network_obj()
    datasets = build_training_data(config)
    jobs = [(method_name(t), t) for t in config.taus] + ([("benchmark", None)] if config.benchmark else [])
    for name, tau in jobs:
        train_cfg = config.train.build(config.taus[0] if tau is None else tau, seeds.train(name))
        if tau is None:
            params, history = train_benchmark(train_cfg, network, pool_datasets(datasets))
        else:
            params, history = train_andmask(train_cfg, network, datasets)
        save_checkpoint(out / f"{name}.oat", params, network, {"method": name, "tau": tau})
        write_json(out / f"{name}_history.json", history.to_dict())
        print(f"{name}: {history.epochs_run} epochs, best epoch {history.best_epoch}")
    write_json(Path(config.output_dir) / "train_config.json", config.to_dict())
    return 0


def cmd_evaluate(args) -> int:
    from .harness import build_test_data, evaluate_models
    from .network import load_checkpoint

    config = resolve_config(args)
    models = {}
    for path in sorted(Path(args.checkpoints).glob("*.oat")):
        params, network, _ = load_checkpoint(path)
        if network != config.network_obj():
            raise ConfigError(f"{path.name} was trained with a different network config", "network")
        models[path.stem] = params
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate_models(config, models, build_test_data(config), out)
    report.to_csv(out / "report.csv")
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    return 0


def cmd_reproduce(args) -> int:
    from .harness import run_experiment

    config = resolve_config(args)
    result = run_experiment(config)
    print(result.report.to_markdown())
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.suite or None)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides OAT_SEED and the config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads and data-synthesis workers")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="oatinv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize datasets and test sets")
    p.add_argument("--experiment", choices=KINDS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train ANDMask and benchmark models")
    p.add_argument("--experiment", choices=KINDS)
    p.add_argument("--tau", type=_tau_list, help="comma-separated agreement thresholds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on lax/challenging sets")
    p.add_argument("--experiment", choices=KINDS)
    p.add_argument("--checkpoints", type=Path, required=True, help="directory of .oat checkpoints")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", parents=[common], help="run a full experiment template")
    p.add_argument("--experiment", choices=KINDS, required=True)
    p.add_argument("--tau", type=_tau_list, help="comma-separated agreement thresholds")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in verification suites")
    p.add_argument("--suite", action="append", choices=["adjoint", "gradient", "mask", "snr", "metrics"])
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    limit = nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except OatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
