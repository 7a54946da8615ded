"""Discrete optoacoustic forward operator and sinogram synthesis.

The operator is ``A = A_oa @ A_s``. ``A_s`` maps the initial pressure on the
grid to point-detector signals: pixel ``j`` contributes
``dV / (4 pi vs^2 dt^2 |r_l - r_j|)`` to the single time bin ``k`` with
``|k dt - |r_l - r_j| / vs| < dt/2``. ``A_oa`` is a central-difference time
derivative per channel; its ``1/dt`` is already carried by ``A_s``.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import signal, sparse

from .errors import InvalidArgument, InvalidGeometry
from .geometry import ImagingGrid, RealizedEnvironment, SensorArray, place_sensors


@dataclass(frozen=True)
class Sinogram:
    data: np.ndarray  # (n_detectors, n_t)
    dt: float

    @property
    def n_detectors(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]

    def __add__(self, other: "Sinogram") -> "Sinogram":
        return Sinogram(self.data + other.data, self.dt)


@dataclass(frozen=True)
class Acquisition:
    """Nominal acquisition parameters shared by every environment."""

    vs: float = 1490.0
    radius: float = 10e-3
    n_t: int = 1024
    dt: float = 10e-9
    f_lo: float = 0.1e6
    f_hi: float = 15e6
    bandpass: bool = True

    def __post_init__(self):
        if not (self.vs > 0 and self.radius > 0 and self.dt > 0):
            raise InvalidArgument("vs, radius and dt must be positive")
        if self.n_t < 3:
            raise InvalidArgument("n_t must be >= 3")


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    shell_matrix: sparse.csr_matrix  # (n_d * n_t, N), rows l * n_t + k
    vs: float
    dt: float
    n_t: int
    n_d: int
    grid: ImagingGrid
    sensors: SensorArray
    dropped: int = 0  # (detector, pixel) events beyond the recording window

    @property
    def shape(self) -> tuple[int, int]:
        return self.shell_matrix.shape

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_d, self.n_t)


def arrival_bins(distances: np.ndarray, vs: float, dt: float) -> np.ndarray:
    """Time bin hit by each distance; an exact half-step tie goes to the lower bin."""
    return np.ceil(distances / (vs * dt) - 0.5).astype(np.int64)


def build_system_matrix(grid: ImagingGrid, sensors: SensorArray, vs: float, n_t: int,
                        dt: float) -> ForwardOperator:
    if n_t < 3:
        raise InvalidArgument(f"n_t must be >= 3, got {n_t}")
    if not (vs > 0 and dt > 0):
        raise InvalidArgument("vs and dt must be positive")
    inside = grid.contains(sensors.positions)
    if inside.any():
        raise InvalidGeometry(f"sensors {np.flatnonzero(inside).tolist()} lie inside the imaging region")

    rj = grid.pixel_centers()
    n_d, n_pix = len(sensors), grid.n_pixels
    scale = grid.voxel_volume / (4.0 * math.pi * vs**2 * dt**2)

    rows, cols, vals = [], [], []
    dropped = 0
    for l, rd in enumerate(sensors.positions):
        dist = np.hypot(rj[:, 0] - rd[0], rj[:, 1] - rd[1])
        k = arrival_bins(dist, vs, dt)
        keep = k < n_t
        dropped += int(n_pix - keep.sum())
        j = np.flatnonzero(keep)
        rows.append(l * n_t + k[keep])
        cols.append(j)
        vals.append(scale / dist[keep])
    a_s = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_d * n_t, n_pix),
    ).tocsr()
    a_s.sort_indices()
    return ForwardOperator(a_s, float(vs), float(dt), int(n_t), n_d, grid, sensors, dropped)


def _derivative(x: np.ndarray) -> np.ndarray:
    y = np.zeros_like(x)
    y[..., 1:-1] = 0.5 * (x[..., 2:] - x[..., :-2])
    y[..., 0] = 0.5 * x[..., 1]
    y[..., -1] = -0.5 * x[..., -2]
    return y


def _derivative_t(y: np.ndarray) -> np.ndarray:
    x = np.zeros_like(y)
    x[..., :-1] -= 0.5 * y[..., 1:]
    x[..., 1:] += 0.5 * y[..., :-1]
    return x


def _as_channels(sino: Sinogram | np.ndarray) -> tuple[np.ndarray, float | None]:
    if isinstance(sino, Sinogram):
        return sino.data, sino.dt
    return np.asarray(sino, dtype=np.float64), None


def apply_time_derivative(sinogram: Sinogram | np.ndarray) -> Sinogram | np.ndarray:
    """Per-channel central difference ``(x[k+1] - x[k-1]) / 2`` with zero padding."""
    data, dt = _as_channels(sinogram)
    if data.shape[-1] < 3:
        raise InvalidArgument("time derivative needs at least 3 samples")
    out = _derivative(data)
    return out if dt is None else Sinogram(out, dt)


def adjoint_time_derivative(sinogram: Sinogram | np.ndarray) -> Sinogram | np.ndarray:
    data, dt = _as_channels(sinogram)
    if data.shape[-1] < 3:
        raise InvalidArgument("time derivative needs at least 3 samples")
    out = _derivative_t(data)
    return out if dt is None else Sinogram(out, dt)


def apply_forward(op: ForwardOperator, image: np.ndarray) -> Sinogram:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != op.grid.shape:
        raise InvalidArgument(f"image shape {image.shape} does not match grid {op.grid.shape}")
    shells = (op.shell_matrix @ image.ravel()).reshape(op.n_d, op.n_t)
    return Sinogram(_derivative(shells), op.dt)


def apply_adjoint(op: ForwardOperator, sinogram: Sinogram | np.ndarray) -> np.ndarray:
    data, _ = _as_channels(sinogram)
    if data.shape != op.sinogram_shape:
        raise InvalidArgument(f"sinogram shape {data.shape} does not match operator {op.sinogram_shape}")
    return (op.shell_matrix.T @ _derivative_t(data).ravel()).reshape(op.grid.shape)


def bandpass_filter(sinogram: Sinogram, f_lo: float = 0.1e6, f_hi: float = 15e6) -> Sinogram:
    """Zero-phase 4th-order Butterworth band-pass, applied forward and backward."""
    nyquist = 0.5 / sinogram.dt
    if not 0 < f_lo < f_hi < nyquist:
        raise InvalidArgument(f"cutoffs must satisfy 0 < {f_lo} < {f_hi} < {nyquist}")
    sos = _butter_sos(f_lo, f_hi, sinogram.dt)
    return Sinogram(signal.sosfiltfilt(sos, sinogram.data, axis=-1), sinogram.dt)


_SOS_CACHE: dict[tuple[float, float, float], np.ndarray] = {}


def _butter_sos(f_lo: float, f_hi: float, dt: float) -> np.ndarray:
    key = (f_lo, f_hi, dt)
    if key not in _SOS_CACHE:
        _SOS_CACHE[key] = signal.butter(4, [f_lo, f_hi], btype="bandpass", fs=1.0 / dt, output="sos")
    return _SOS_CACHE[key]


def add_noise(sinogram: Sinogram, snr_db: float, seed: int) -> Sinogram:
    """Additive white Gaussian noise at ``snr_db`` relative to the mean signal power.

    ``snr_db = inf`` returns the input unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return sinogram
    power = float(np.mean(sinogram.data**2))
    if power == 0.0:
        raise InvalidArgument("SNR is undefined for a zero-power sinogram")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = np.random.default_rng(seed).standard_normal(sinogram.data.shape)
    return Sinogram(sinogram.data + sigma * noise, sinogram.dt)


class OperatorCache:
    """Small LRU of assembled operators keyed by geometry and timing."""

    def __init__(self, maxsize: int = 32):
        self.maxsize = maxsize
        self._items: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, grid: ImagingGrid, sensors: SensorArray, vs: float, n_t: int,
            dt: float) -> ForwardOperator:
        key = (grid, sensors.key(), float(vs), int(n_t), float(dt))
        with self._lock:
            op = self._items.get(key)
            if op is not None:
                self._items.move_to_end(key)
                return op
        op = build_system_matrix(grid, sensors, vs, n_t, dt)
        with self._lock:
            self._items[key] = op
            if len(self._items) > self.maxsize:
                self._items.popitem(last=False)
        return op


_operators = OperatorCache()


def nominal_operator(grid: ImagingGrid, nominal: Acquisition, n_detectors: int,
                     coverage_deg: float = 360.0) -> ForwardOperator:
    sensors = place_sensors(n_detectors, nominal.radius, coverage_deg)
    return _operators.get(grid, sensors, nominal.vs, nominal.n_t, nominal.dt)


def synthesize_sinogram(image: np.ndarray, env: RealizedEnvironment, grid: ImagingGrid,
                        nominal: Acquisition, seed: int) -> Sinogram:
    """Measured sinogram under the environment's true sensors and speed of sound.

    Forward model, then transducer band-pass, then white noise at ``env.snr_db``.
    """
    op = _operators.get(grid, env.sensors_true, env.vs_true, nominal.n_t, nominal.dt)
    sino = apply_forward(op, image)
    if nominal.bandpass:
        sino = bandpass_filter(sino, nominal.f_lo, nominal.f_hi)
    return add_noise(sino, env.snr_db, seed)


def subdivide_sensor(sensor_position, aperture_length: float, n_elements: int) -> SensorArray:
    """Split a flat sensor into point elements spread along its tangent.

    The tangent is perpendicular to the line joining the origin and the sensor.
    """
    if n_elements < 1:
        raise InvalidArgument("n_elements must be >= 1")
    p = np.asarray(sensor_position, dtype=np.float64)
    radius = float(np.hypot(*p))
    if radius == 0:
        raise InvalidGeometry("cannot orient a sensor placed at the origin")
    tangent = np.array([-p[1], p[0]]) / radius
    if n_elements == 1:
        offsets = np.zeros(1)
    else:
        offsets = np.linspace(-aperture_length / 2, aperture_length / 2, n_elements)
    positions = p[None, :] + offsets[:, None] * tangent[None, :]
    return SensorArray(positions, radius, 360.0, 0.0, perturbed=n_elements > 1)


def build_finite_aperture_operator(grid: ImagingGrid, sensors: SensorArray, vs: float,
                                   n_t: int, dt: float, aperture_length: float,
                                   n_elements: int) -> ForwardOperator:
    """Operator whose channels average ``n_elements`` point elements per sensor.

    The shell matrix no longer has one entry per (detector, pixel) pair.
    """
    shells, dropped = None, 0
    for e in range(n_elements):
        elems = [subdivide_sensor(p, aperture_length, n_elements).positions[e] for p in sensors.positions]
        sub = SensorArray(np.array(elems), sensors.radius, sensors.coverage_deg,
                          sensors.offset_deg, perturbed=True)
        op = build_system_matrix(grid, sub, vs, n_t, dt)
        shells = op.shell_matrix if shells is None else shells + op.shell_matrix
        dropped += op.dropped
    return ForwardOperator((shells / n_elements).tocsr(), float(vs), float(dt), int(n_t),
                           len(sensors), grid, sensors, dropped)
