"""Built-in verification suites run by ``oatinv selftest``."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .forward import (
    ForwardOperator,
    Sinogram,
    add_noise,
    adjoint_time_derivative,
    apply_adjoint,
    apply_forward,
    build_system_matrix,
)
from .geometry import build_grid, place_sensors
from .metrics import pearson_correlation, psnr, rmse, ssim
from .network import NetworkConfig, init_network, loss_and_grad, predict
from .training import andmask_mask

ADJOINT_TOL = 1e-12
GRADIENT_TOL = 1e-5
SNR_TOL_DB = 0.5


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def adjoint_defect(forward: Callable[[np.ndarray], np.ndarray],
                   adjoint: Callable[[np.ndarray], np.ndarray],
                   n_in: int, out_shape: tuple[int, ...], n_pairs: int = 20,
                   seed: int = 0) -> float:
    """Worst |<Ax, y> - <x, A^T y>| / (|Ax| |y|) over random vector pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(n_in)
        y = rng.standard_normal(out_shape)
        ax = forward(x)
        lhs = float(np.vdot(ax, y))
        rhs = float(np.vdot(x, adjoint(y)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)))
    return worst


def small_operator() -> ForwardOperator:
    grid = build_grid(32, 32, 100e-6, 100e-6)
    sensors = place_sensors(8, 4e-3)
    return build_system_matrix(grid, sensors, 1490.0, 256, 20e-9)


def operator_adjoint_defect(op: ForwardOperator, n_pairs: int = 20, seed: int = 0) -> float:
    shape = op.grid.shape
    return adjoint_defect(lambda x: apply_forward(op, x.reshape(shape)).data,
                          lambda y: apply_adjoint(op, y).ravel(),
                          op.grid.n_pixels, op.sinogram_shape, n_pairs, seed)


def corrupted_adjoint(op: ForwardOperator) -> Callable[[np.ndarray], np.ndarray]:
    """Back-projection through a shell matrix with one entry moved to a wrong pixel."""
    bad = op.shell_matrix.copy().tocsr()
    bad.indices = bad.indices.copy()
    row = int(np.argmax(np.diff(bad.indptr) > 0))
    k = bad.indptr[row]
    bad.indices[k] = (bad.indices[k] + op.grid.nx // 2 + 1) % op.grid.n_pixels
    bad = sparse.csr_matrix((bad.data, bad.indices, bad.indptr), shape=bad.shape)

    def adjoint(y: np.ndarray) -> np.ndarray:
        s = adjoint_time_derivative(np.asarray(y))
        return bad.T @ s.ravel()

    return adjoint


def suite_adjoint() -> list[SuiteResult]:
    op = small_operator()
    defect = operator_adjoint_defect(op)
    shape = op.grid.shape
    mutant = adjoint_defect(lambda x: apply_forward(op, x.reshape(shape)).data, corrupted_adjoint(op),
                            op.grid.n_pixels, op.sinogram_shape)
    return [SuiteResult("adjoint", defect < ADJOINT_TOL, f"max relative defect {defect:.2e}"),
            SuiteResult("adjoint mutation", mutant > 1e3 * ADJOINT_TOL,
                        f"corrupted adjoint defect {mutant:.2e} (must be detected)")]


def gradient_check(config: NetworkConfig | None = None, n_check: int = 200, h: float = 1e-6,
                   seed: int = 0, batch: int = 2) -> tuple[float, int]:
    """Largest relative error between backprop and central differences.

    Returns ``(max_error, n_params)``. The relative error of one component is
    ``|a - n| / max(|a|, |n|, 1e-7)``; the floor keeps components whose true
    derivative is numerically zero from dividing by nothing. The loss
    difference is formed as ``sum((r+ - r-) * (r+ + r-)) / B``, which equals
    ``L(theta + h) - L(theta - h)`` exactly in real arithmetic but avoids
    subtracting two large sums.
    """
    config = config or NetworkConfig(n_scales=2, base_channels=4, dense_growth_rate=2,
                                     dense_layers_per_block=1, input_shape=(16, 16))
    rng = np.random.default_rng(seed)
    params = init_network(config, seed)
    params = params.with_values(params.values + 0.01 * rng.standard_normal(params.n_params))
    x = rng.standard_normal((batch,) + config.input_shape)
    y = rng.standard_normal((batch,) + config.input_shape)
    _, grad = loss_and_grad(params, config, x, y)
    idx = rng.choice(params.n_params, size=min(n_check, params.n_params), replace=False)
    worst = 0.0
    for i in idx:
        values = params.values.copy()
        values[i] += h
        r_up = predict(params.with_values(values), config, x) - y
        values[i] -= 2 * h
        r_down = predict(params.with_values(values), config, x) - y
        numeric = np.sum((r_up - r_down) * (r_up + r_down)) / batch / (2 * h)
        analytic = grad.values[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return worst, params.n_params


def suite_gradient() -> list[SuiteResult]:
    err, n = gradient_check()
    return [SuiteResult("gradient", err < GRADIENT_TOL and n <= 10_000,
                        f"max relative error {err:.2e} over 200 of {n} parameters")]


def mask_oracle(signs: tuple[int, ...], tau: float) -> bool:
    """Agreement table for d = 5: tau in (0.6, 1] needs 5-0, (0.2, 0.6] needs 4-1 or better."""
    pos = sum(s > 0 for s in signs)
    majority = max(pos, len(signs) - pos)
    if tau > 0.6:
        return majority == 5
    if tau > 0.2:
        return majority >= 4
    return True


MASK_TAUS = (0.0, 0.1, 0.2, 0.2000001, 0.3, 0.4, 0.5, 0.6, 0.6000001, 0.7, 0.8, 0.9, 1.0)


def suite_mask() -> list[SuiteResult]:
    patterns = np.array(list(itertools.product((-1.0, 1.0), repeat=5)))  # (32, 5)
    mismatches = 0
    for tau in MASK_TAUS:
        got = andmask_mask(patterns.T, tau)
        want = np.array([mask_oracle(tuple(p), tau) for p in patterns])
        mismatches += int(np.sum(got != want))
    return [SuiteResult("mask oracle", mismatches == 0,
                        f"{mismatches} mismatches over 32 sign patterns x {len(MASK_TAUS)} thresholds")]


def realized_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return 10.0 * math.log10(np.mean(clean**2) / np.mean(noise**2))


def suite_snr(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    clean = Sinogram(rng.standard_normal((64, 2048)) * np.hanning(2048), 20e-9)
    out = []
    for target in (40.0, 50.0, 60.0):
        got = realized_snr(clean.data, add_noise(clean, target, seed + int(target)).data)
        out.append(SuiteResult(f"snr {target:g} dB", abs(got - target) <= SNR_TOL_DB,
                               f"realized {got:.3f} dB over {clean.data.size} samples"))
    return out


def suite_metrics(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    x = rng.random((32, 32))
    checks = {
        "ssim(x, x) = 1": abs(ssim(x, x) - 1.0) < 1e-12,
        "rmse(x, x) = 0": rmse(x, x) == 0.0,
        "pc affine invariance": abs(pearson_correlation(x, 3.0 * x - 2.0) - 1.0) < 1e-12
        and abs(pearson_correlation(x, -0.5 * x + 1.0) + 1.0) < 1e-12,
        "psnr at rmse 0.1 = 20 dB": abs(psnr(np.zeros(4), np.full(4, 0.1)) - 20.0) < 1e-12,
    }
    pairs = [(x, x + rng.normal(0, s, x.shape)) for s in rng.uniform(0.01, 0.5, 20)]
    by_rmse = sorted(pairs, key=lambda p: rmse(*p))
    values = [psnr(*p) for p in by_rmse]
    checks["psnr decreasing in rmse"] = all(a > b for a, b in zip(values, values[1:]))
    return [SuiteResult(f"metric {k}", bool(v), "ok" if v else "violated") for k, v in checks.items()]


SUITES = {
    "adjoint": suite_adjoint,
    "gradient": suite_gradient,
    "mask": suite_mask,
    "snr": suite_snr,
    "metrics": suite_metrics,
}


def run_selftest(suites: list[str] | None = None) -> list[SuiteResult]:
    results = []
    for name in suites or list(SUITES):
        results.extend(SUITES[name]())
    return results
