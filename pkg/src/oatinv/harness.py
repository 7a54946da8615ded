"""Run a full experiment: data, training, evaluation and artifacts on disk."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import REFERENCE_VALUES, ExperimentConfig
from .errors import OatError
from .io import export_png, sha256_file, write_json
from .metrics import MetricRow, MetricsReport
from .network import NetworkConfig, ParameterSet, predict, save_checkpoint
from .phantoms import DatasetSplit, Sample, build_environment_dataset, build_test_set
from .seeding import derive_seed
from .training import pool_datasets, train_andmask, train_benchmark

log = logging.getLogger(__name__)


class ExperimentError(OatError, RuntimeError):
    """A run failed; ``stage`` names where."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"experiment failed during {stage}: {cause}")
        self.stage = stage


def method_name(tau: float | None) -> str:
    return "benchmark" if tau is None else f"andmask_tau{tau:g}"


@dataclass
class RunSeeds:
    master: int

    def env(self, i: int) -> int:
        return derive_seed(self.master, "env", i)

    @property
    def test(self) -> int:
        return derive_seed(self.master, "test")

    def train(self, method: str) -> int:
        return derive_seed(self.master, "train", method)

    def to_dict(self, n_envs: int, methods: list[str]) -> dict:
        return {"master": self.master,
                "environments": [self.env(i) for i in range(n_envs)],
                "test": self.test,
                "training": {m: self.train(m) for m in methods}}


@dataclass
class RunResult:
    out_dir: Path
    report: MetricsReport
    manifest: dict
    models: dict[str, ParameterSet] = field(default_factory=dict)


class _Manifest:
    def __init__(self, out_dir: Path, config: ExperimentConfig, seeds: dict):
        self.out_dir = out_dir
        self.data = {"status": "incomplete", "stage": "start", "config": config.to_dict(),
                     "seeds": seeds, "artifacts": {}, "timings_s": {}}

    def stage(self, name: str) -> None:
        self.data["stage"] = name
        self.flush()

    def timing(self, name: str, seconds: float) -> None:
        self.data["timings_s"][name] = round(seconds, 3)

    def artifact(self, path: Path) -> None:
        rel = path.relative_to(self.out_dir).as_posix()
        self.data["artifacts"][rel] = sha256_file(path)

    def flush(self) -> None:
        write_json(self.out_dir / "manifest.json", self.data)


def _evaluate(report: MetricsReport, label: str, algorithm: str, test: list[Sample],
              params: ParameterSet | None, network: NetworkConfig) -> np.ndarray:
    x = np.stack([s.lbp.data for s in test])
    y = np.stack([s.target for s in test])
    pred = x if params is None else predict(params, network, x)
    report.add(MetricRow.from_images(label, algorithm, pred, y))
    return pred


def _write_panels(out_dir: Path, label: str, test: list[Sample], preds: dict[str, np.ndarray],
                  n: int) -> list[Path]:
    """Ground truth, LBP and each model side by side, one PNG per test image."""
    paths = []
    for i in range(min(n, len(test))):
        tiles = [test[i].target] + [p[i] for p in preds.values()]
        gap = np.full((tiles[0].shape[0], 2), 1.0)
        strip = np.concatenate([t if j == 0 else np.concatenate([gap, t], axis=1)
                                for j, t in enumerate(tiles)], axis=1)
        path = out_dir / "panels" / f"{label}_{i:02d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        mapping = export_png(path, strip, 0.0, 1.0)
        write_json(path.with_name(path.name + ".json"),
                   dict(mapping, columns=["ground_truth"] + list(preds)))
        paths.append(path)
    return paths


def build_training_data(config: ExperimentConfig) -> list[DatasetSplit]:
    """One train/validation split per training environment."""
    seeds = RunSeeds(config.seed)
    grid, nominal = config.grid_obj(), config.acquisition_obj()
    out = []
    for i, spec in enumerate(config.env_specs()):
        out.append(build_environment_dataset(
            spec, config.data.n_base, config.data.augment_factor, config.data.split_fraction,
            seeds.env(i), grid, nominal, config.data.phantom.build(), workers=config.workers,
            keep_sinograms=False))
        log.info("environment %r: %d train / %d validation", spec.label, *out[-1].counts)
    return out


def build_test_data(config: ExperimentConfig) -> dict[str, list[Sample]]:
    """Lax and challenging test sets, paired through a shared seed."""
    seed = RunSeeds(config.seed).test
    grid, nominal, params = config.grid_obj(), config.acquisition_obj(), config.data.phantom.build()
    return {label: build_test_set(env.build(), config.data.n_test, seed, grid, nominal, params,
                                  config.workers)
            for label, env in (("lax", config.lax), ("challenging", config.challenging))}


def evaluate_models(config: ExperimentConfig, models: dict[str, ParameterSet],
                    tests: dict[str, list[Sample]],
                    out_dir: Path | None = None) -> tuple[MetricsReport, list[Path]]:
    """LBP plus every model on every test set; panels are written when ``out_dir`` is given."""
    network = config.network_obj()
    report = MetricsReport()
    for ref in REFERENCE_VALUES.get(config.kind, []):
        report.references.append(dict(zip(("environment", "algorithm", "ssim", "pc", "rmse", "psnr"), ref)))
    panels: list[Path] = []
    for env_label, test in tests.items():
        preds = {"lbp": _evaluate(report, env_label, "lbp", test, None, network)}
        for name, params in models.items():
            preds[name] = _evaluate(report, env_label, name, test, params, network)
        if out_dir is not None:
            panels += _write_panels(out_dir, env_label, test, preds, config.n_panels)
    return report, panels


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Build datasets, train every method, evaluate, and write all artifacts.

    Writes ``report.csv``, ``report.md``, ``manifest.json``, checkpoints,
    training histories and example panels under ``out_dir``. On failure the
    manifest stays ``incomplete`` and names the failing stage.
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    for sub in ("", "checkpoints", "histories"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seeds = RunSeeds(config.seed)
    methods = [method_name(t) for t in config.taus] + (["benchmark"] if config.benchmark else [])
    manifest = _Manifest(out, config, seeds.to_dict(len(config.training_envs), methods))
    manifest.flush()

    network = config.network_obj()
    stage = "datasets"
    try:
        t = time.perf_counter()
        manifest.stage(stage)
        datasets = build_training_data(config)
        tests = build_test_data(config)
        manifest.timing(stage, time.perf_counter() - t)

        models: dict[str, ParameterSet] = {}
        jobs = [(method_name(t), t) for t in config.taus] + ([("benchmark", None)] if config.benchmark else [])
        for name, tau in jobs:
            stage = f"train:{name}"
            manifest.stage(stage)
            t = time.perf_counter()
            if tau is None:
                params, history = train_benchmark(config.train.build(config.taus[0], seeds.train(name)),
                                                  network, pool_datasets(datasets))
            else:
                params, history = train_andmask(config.train.build(tau, seeds.train(name)),
                                                network, datasets)
            manifest.timing(stage, time.perf_counter() - t)
            models[name] = params
            ckpt = save_checkpoint(out / "checkpoints" / f"{name}.oat", params, network,
                                   {"method": name, "tau": tau, "seed": seeds.train(name)})
            hist = write_json(out / "histories" / f"{name}.json", history.to_dict())
            for p in (ckpt, ckpt.with_name(ckpt.name + ".json"), hist):
                manifest.artifact(p)

        stage = "evaluation"
        manifest.stage(stage)
        report, panels = evaluate_models(config, models, tests, out)
        for p in panels:
            manifest.artifact(p)
            manifest.artifact(p.with_name(p.name + ".json"))

        stage = "report"
        csv_path, md_path = out / "report.csv", out / "report.md"
        report.to_csv(csv_path)
        md_path.write_text(report.to_markdown())
        manifest.artifact(csv_path)
        manifest.artifact(md_path)
        manifest.data["status"] = "complete"
        manifest.stage("done")
    except Exception as exc:
        manifest.data["error"] = f"{type(exc).__name__}: {exc}"
        manifest.stage(stage)
        raise ExperimentError(stage, exc) from exc
    return RunResult(out, report, manifest.data, models)
