"""Image quality metrics, environment risks and report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, UndefinedMetric
from .network import NetworkConfig, ParameterSet, predict
from .phantoms import Sample

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _gaussian_window() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _smooth(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
    return ndimage.correlate1d(out, w, axis=1, mode="reflect")


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _check_pair(a, b)
    if a.ndim != 2 or min(a.shape) < 2 * SSIM_RADIUS + 1:
        raise InvalidArgument(f"SSIM needs 2-D images of at least 11x11, got {a.shape}")
    w = _gaussian_window()
    mu_a, mu_b = _smooth(a, w), _smooth(b, w)
    var_a = _smooth(a * a, w) - mu_a**2
    var_b = _smooth(b * b, w) - mu_b**2
    cov = _smooth(a * b, w) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    r = SSIM_RADIUS
    return (num / den)[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), border excluded."""
    return float(np.mean(ssim_map(a, b, data_range)))


def pearson_correlation(a, b) -> float:
    a, b = _check_pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na, nb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise UndefinedMetric("Pearson correlation is undefined for a constant image")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def rmse(a, b) -> float:
    a, b = _check_pair(a, b)
    return math.sqrt(float(np.mean((a - b) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _pairs(test_pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(test_pairs, tuple) and len(test_pairs) == 2:
        x, y = (np.asarray(t, dtype=np.float64) for t in test_pairs)
    else:
        samples: list[Sample] = list(test_pairs)
        if not samples:
            raise InvalidArgument("empty test set")
        x = np.stack([s.lbp.data for s in samples])
        y = np.stack([s.target for s in samples])
    if len(x) == 0:
        raise InvalidArgument("empty test set")
    return x, y


def environment_risk(params: ParameterSet, config: NetworkConfig, test_pairs) -> float:
    """Mean per-example squared error of the network over one environment's pairs."""
    x, y = _pairs(test_pairs)
    pred = predict(params, config, x)
    return float(np.sum((pred - y) ** 2) / len(x))


def ood_risk(params: ParameterSet, config: NetworkConfig, env_test_sets) -> float:
    """Worst environment risk over the given environments."""
    env_test_sets = list(env_test_sets)
    if not env_test_sets:
        raise InvalidArgument("need at least one environment")
    return max(environment_risk(params, config, t) for t in env_test_sets)


METRICS = ("ssim", "pc", "rmse", "psnr")


def image_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    return {"ssim": ssim(pred, target), "pc": pearson_correlation(pred, target),
            "rmse": rmse(pred, target), "psnr": psnr(pred, target)}


@dataclass
class MetricRow:
    environment: str
    algorithm: str
    n_images: int
    ssim_mean: float
    ssim_std: float
    pc_mean: float
    pc_std: float
    rmse_mean: float
    rmse_std: float
    psnr_mean: float
    psnr_std: float
    risk: float = math.nan

    @classmethod
    def from_images(cls, environment: str, algorithm: str, preds: np.ndarray,
                    targets: np.ndarray) -> "MetricRow":
        if len(preds) < 1 or len(preds) != len(targets):
            raise InvalidArgument("need matching, non-empty prediction and target stacks")
        per_image = [image_metrics(p, t) for p, t in zip(preds, targets)]
        stats = {}
        for m in METRICS:
            values = np.array([r[m] for r in per_image])
            stats[f"{m}_mean"] = float(values.mean())
            stats[f"{m}_std"] = float(values.std())
        risk = float(np.sum((np.asarray(preds) - targets) ** 2) / len(preds))
        return cls(environment, algorithm, len(preds), risk=risk, **stats)


_COLUMNS = [f.name for f in fields(MetricRow)]


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    references: list[dict] = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def row(self, environment: str, algorithm: str) -> MetricRow:
        for r in self.rows:
            if r.environment == environment and r.algorithm == algorithm:
                return r
        raise KeyError((environment, algorithm))

    @property
    def environments(self) -> list[str]:
        return list(dict.fromkeys(r.environment for r in self.rows))

    @property
    def algorithms(self) -> list[str]:
        return list(dict.fromkeys(r.algorithm for r in self.rows))

    def ood_risk(self) -> dict[str, float]:
        """Worst risk across the report's environments, per algorithm."""
        return {a: max(r.risk for r in self.rows if r.algorithm == a) for a in self.algorithms}

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(v) for v in asdict(r).values()])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "MetricsReport":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        reader = csv.DictReader(io.StringIO(text))
        report = cls()
        for rec in reader:
            kw = {}
            for f in fields(MetricRow):
                raw = rec[f.name]
                kw[f.name] = raw if f.type == "str" else (int(raw) if f.type == "int" else float(raw))
            report.add(MetricRow(**kw))
        return report

    def to_markdown(self) -> str:
        lines = ["| Environment | Algorithm | SSIM | PC | RMSE | PSNR |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.environment} | {r.algorithm} | {r.ssim_mean:.3f} ± {r.ssim_std:.3f} "
                         f"| {r.pc_mean:.3f} ± {r.pc_std:.3f} | {r.rmse_mean:.3f} ± {r.rmse_std:.3f} "
                         f"| {r.psnr_mean:.3f} ± {r.psnr_std:.3f} |")
        lines += ["", "| Algorithm | OOD risk (max over environments) |", "|---|---|"]
        for algo, value in self.ood_risk().items():
            lines.append(f"| {algo} | {value:.4g} |")
        if self.references:
            lines += ["", "Reference values reported for the full-scale setup (not reproduced here):", "",
                      "| Environment | Algorithm | SSIM | PC | RMSE | PSNR |", "|---|---|---|---|---|---|"]
            for ref in self.references:
                lines.append(f"| {ref['environment']} | {ref['algorithm']} | {ref['ssim']:.3f} | {ref['pc']:.3f} "
                             f"| {ref['rmse']:.3f} | {ref['psnr']:.3f} |")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
