"""Imaging grid, detector placement and acquisition environments.

Coordinates are in meters, angles in degrees. Images are stored with axis 0
along x and axis 1 along y, so pixel ``(i, j)`` has center
``center + ((i - (nx-1)/2) * dx, (j - (ny-1)/2) * dy)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class ImagingGrid:
    nx: int
    ny: int
    dx: float
    dy: float
    center: tuple[float, float] = (0.0, 0.0)
    slab_thickness: float | None = None

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvalidArgument(f"grid needs at least 2x2 pixels, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise InvalidArgument(f"pixel pitch must be positive, got dx={self.dx}, dy={self.dy}")
        if self.slab_thickness is not None and not self.slab_thickness > 0:
            raise InvalidArgument("slab_thickness must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def voxel_volume(self) -> float:
        dz = self.dx if self.slab_thickness is None else self.slab_thickness
        return self.dx * self.dy * dz

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the pixel-covered region."""
        cx, cy = self.center
        hx, hy = self.nx * self.dx / 2, self.ny * self.dy / 2
        return (cx - hx, cx + hx, cy - hy, cy + hy)

    def axis_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.center[0] + (np.arange(self.nx) - (self.nx - 1) / 2) * self.dx
        y = self.center[1] + (np.arange(self.ny) - (self.ny - 1) / 2) * self.dy
        return x, y

    def pixel_centers(self) -> np.ndarray:
        """Pixel centers as an (nx*ny, 2) array in row-major (x-major) order."""
        x, y = self.axis_coordinates()
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.extent
        p = np.atleast_2d(points)
        return (p[:, 0] >= xmin) & (p[:, 0] <= xmax) & (p[:, 1] >= ymin) & (p[:, 1] <= ymax)


def build_grid(nx: int, ny: int, dx: float, dy: float) -> ImagingGrid:
    return ImagingGrid(int(nx), int(ny), float(dx), float(dy))


@dataclass(frozen=True, eq=False)
class SensorArray:
    positions: np.ndarray
    radius: float
    coverage_deg: float
    offset_deg: float = 0.0
    perturbed: bool = False

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(pos) < 1:
            raise InvalidArgument("a sensor array needs at least one position")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_detectors(self) -> int:
        return len(self.positions)

    def key(self) -> bytes:
        return self.positions.tobytes()


def sensor_angles(n_detectors: int, coverage_deg: float, offset_deg: float = 0.0) -> np.ndarray:
    if n_detectors < 1:
        raise InvalidArgument(f"n_detectors must be >= 1, got {n_detectors}")
    if not 0 < coverage_deg <= 360:
        raise InvalidArgument(f"coverage must lie in (0, 360], got {coverage_deg}")
    l = np.arange(n_detectors)
    if coverage_deg == 360:
        return offset_deg + 360.0 * l / n_detectors
    if n_detectors == 1:
        return np.array([float(offset_deg)])
    return offset_deg + coverage_deg * l / (n_detectors - 1)


def place_sensors(n_detectors: int, radius: float, coverage_deg: float = 360.0,
                  offset_deg: float = 0.0) -> SensorArray:
    """Equidistant point detectors on an arc of the given radius.

    Full coverage omits the duplicate endpoint; partial arcs include both ends.
    """
    if not radius > 0:
        raise InvalidArgument(f"radius must be positive, got {radius}")
    theta = np.deg2rad(sensor_angles(n_detectors, coverage_deg, offset_deg))
    pos = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return SensorArray(pos, float(radius), float(coverage_deg), float(offset_deg))


@dataclass(frozen=True)
class EnvironmentSpec:
    """Distribution of acquisition conditions for one environment."""

    n_detectors: int = 16
    coverage_deg: float = 360.0
    position_uncertainty_pct: float = 0.0
    vs_uncertainty_pct: float = 0.0
    snr_range_db: tuple[float, float] = (40.0, 60.0)
    label: str = ""

    def __post_init__(self):
        if self.n_detectors < 1:
            raise InvalidArgument("n_detectors must be >= 1")
        if not 0 < self.coverage_deg <= 360:
            raise InvalidArgument("coverage_deg must lie in (0, 360]")
        if self.position_uncertainty_pct < 0 or self.vs_uncertainty_pct < 0:
            raise InvalidArgument("uncertainties must be non-negative")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise InvalidArgument(f"snr range ({lo}, {hi}) is reversed")
        object.__setattr__(self, "snr_range_db", (float(lo), float(hi)))


@dataclass(frozen=True)
class RealizedEnvironment:
    sensors_true: SensorArray
    vs_true: float
    snr_db: float
    spec: EnvironmentSpec = field(compare=False)
    seed: int = 0


def realize_environment(spec: EnvironmentSpec, vs_nominal: float, radius: float,
                        seed: int) -> RealizedEnvironment:
    """Draw one concrete acquisition from ``spec``.

    Every coordinate of every sensor gets an independent Gaussian offset with
    std ``pct/100 * radius``; the speed of sound is scaled by ``1 + g`` with
    ``g ~ N(0, vs_pct/100)``; the SNR is uniform on the configured range. The draw
    order is fixed so that two specs differing only in magnitudes share the
    same underlying variates for a given seed.
    """
    rng = np.random.default_rng(seed)
    nominal = place_sensors(spec.n_detectors, radius, spec.coverage_deg)
    z = rng.standard_normal(nominal.positions.shape)
    g = rng.standard_normal()
    u = rng.random()

    pos_std = spec.position_uncertainty_pct / 100.0 * radius
    if pos_std > 0:
        sensors = SensorArray(nominal.positions + pos_std * z, nominal.radius,
                              nominal.coverage_deg, nominal.offset_deg, perturbed=True)
    else:
        sensors = nominal
    vs_true = vs_nominal * (1.0 + spec.vs_uncertainty_pct / 100.0 * g)
    lo, hi = spec.snr_range_db
    snr = lo if lo == hi else lo + (hi - lo) * u
    return RealizedEnvironment(sensors, float(vs_true), float(snr), spec, int(seed))
