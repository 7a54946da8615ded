"""Vessel phantoms, augmentation, image import and per-environment datasets."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgument, UnsupportedImage
from .forward import Acquisition, Sinogram, nominal_operator, synthesize_sinogram
from .geometry import EnvironmentSpec, ImagingGrid, realize_environment
from .lbp import LbpImage, lbp_reconstruct
from .seeding import derive_seed

MIN_FOREGROUND = 0.005
MAX_FOREGROUND = 0.30
FOREGROUND_LEVEL = 0.1


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    provenance: dict
    augmentation: tuple = ()

    @property
    def foreground_fraction(self) -> float:
        return foreground_fraction(self.image)


def foreground_fraction(image: np.ndarray) -> float:
    return float(np.mean(image > FOREGROUND_LEVEL))


@dataclass(frozen=True)
class VesselParams:
    branches: int = 4
    step_px: float = 1.0
    thickness_px: float = 2.0
    branch_prob: float = 0.03
    curvature: float = 0.15  # std of the heading change per step, radians
    max_depth: int = 2

    def validate(self):
        if self.branches < 1:
            raise InvalidArgument("a vessel tree needs at least one branch")
        if not 2 <= self.branches <= 8:
            raise InvalidArgument(f"branches must lie in [2, 8], got {self.branches}")
        if not 1.0 <= self.thickness_px <= 3.0:
            raise InvalidArgument(f"thickness must lie in [1, 3] px, got {self.thickness_px}")
        if not self.step_px > 0:
            raise InvalidArgument("step_px must be positive")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise InvalidArgument("branch_prob must be a probability")


def _walk_tree(shape: tuple[int, int], params: VesselParams, rng: np.random.Generator) -> np.ndarray:
    """Segments (x0, y0, x1, y1, radius) in pixel-index units."""
    nx, ny = shape
    side = min(nx, ny)
    root = np.array([nx, ny]) / 2 + rng.uniform(-0.3, 0.3, size=2) * np.array([nx, ny])
    start = rng.uniform(0, 2 * math.pi)
    max_steps = int(0.9 * side / params.step_px)

    # stack of (position, heading, radius, steps left, depth)
    stack = []
    for b in range(params.branches):
        heading = start + 2 * math.pi * b / params.branches + rng.normal(0, 0.3)
        stack.append((root.copy(), heading, params.thickness_px / 2, max_steps, 0))

    segments = []
    while stack and len(segments) < 4000:
        pos, heading, radius, steps, depth = stack.pop()
        for _ in range(steps):
            heading += rng.normal(0, params.curvature)
            nxt = pos + params.step_px * np.array([math.cos(heading), math.sin(heading)])
            segments.append((pos[0], pos[1], nxt[0], nxt[1], radius))
            pos = nxt
            if not (-2 <= pos[0] <= nx + 1 and -2 <= pos[1] <= ny + 1):
                break
            if depth < params.max_depth and rng.random() < params.branch_prob:
                turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0)
                stack.append((pos.copy(), heading + turn, max(0.5, 0.7 * radius),
                              max_steps // 2, depth + 1))
    return np.array(segments, dtype=np.float64).reshape(-1, 5)


def render_segments(shape: tuple[int, int], segments: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Anti-aliased strokes: a pixel at distance ``d`` from a segment of radius
    ``r`` gets ``clip(r + 0.5 - d, 0, 1)``; overlapping strokes take the max."""
    nx, ny = shape
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), indexing="ij")
    px, py = ii.ravel()[:, None], jj.ravel()[:, None]
    out = np.zeros(nx * ny)
    for s in range(0, len(segments), chunk):
        x0, y0, x1, y1, r = (segments[s:s + chunk, c][None, :] for c in range(5))
        vx, vy = x1 - x0, y1 - y0
        length2 = np.maximum(vx * vx + vy * vy, 1e-12)
        t = np.clip(((px - x0) * vx + (py - y0) * vy) / length2, 0.0, 1.0)
        d = np.hypot(px - (x0 + t * vx), py - (y0 + t * vy))
        out = np.maximum(out, np.clip(r + 0.5 - d, 0.0, 1.0).max(axis=1))
    return out.reshape(nx, ny)


def generate_vessel_phantom(grid: ImagingGrid, seed: int, params: VesselParams | None = None,
                            max_attempts: int = 50) -> Phantom:
    """Random branching vessel tree rendered on the grid, values in [0, 1].

    Trees whose foreground fraction falls outside [0.5%, 30%] are redrawn from
    a derived seed, so the result is still a pure function of ``seed``.
    """
    params = params or VesselParams()
    params.validate()
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed if attempt == 0 else derive_seed(seed, "redraw", attempt))
        image = render_segments(grid.shape, _walk_tree(grid.shape, params, rng))
        if MIN_FOREGROUND <= foreground_fraction(image) <= MAX_FOREGROUND:
            return Phantom(image, {"kind": "procedural", "seed": int(seed), "attempt": attempt})
    raise InvalidArgument(f"could not draw a non-degenerate phantom with {params}")


def shift_zero_fill(image: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    out = np.zeros_like(image)
    sx, sy = int(shift[0]), int(shift[1])
    nx, ny = image.shape
    if abs(sx) >= nx or abs(sy) >= ny:
        return out
    src_x = slice(max(0, -sx), nx - max(0, sx))
    dst_x = slice(max(0, sx), nx - max(0, -sx))
    src_y = slice(max(0, -sy), ny - max(0, sy))
    dst_y = slice(max(0, sy), ny - max(0, -sy))
    out[dst_x, dst_y] = image[src_x, src_y]
    return out


def apply_augmentation(image: np.ndarray, rot90: int = 0, flip: str = "none",
                       shift: tuple[int, int] = (0, 0)) -> np.ndarray:
    out = np.rot90(image, k=rot90)
    if flip == "h":
        out = out[:, ::-1]
    elif flip == "v":
        out = out[::-1, :]
    elif flip != "none":
        raise InvalidArgument(f"unknown flip {flip!r}")
    return shift_zero_fill(np.ascontiguousarray(out), shift)


def augment(phantom: Phantom, seed: int) -> Phantom:
    """Random quarter-turn, optional flip and integer shift of up to 10% of the side."""
    rng = np.random.default_rng(seed)
    rot = int(rng.integers(4))
    flip = ("none", "h", "v")[int(rng.integers(3))]
    mx, my = (int(0.1 * n) for n in phantom.image.shape)
    shift = (int(rng.integers(-mx, mx + 1)), int(rng.integers(-my, my + 1)))
    record = {"rot90": rot, "flip": flip, "shift": list(shift), "seed": int(seed)}
    image = apply_augmentation(phantom.image, rot, flip, shift)
    return Phantom(image, phantom.provenance, phantom.augmentation + (record,))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row ``o`` averages the input cells overlapping output cell ``o``."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(lo + 1, edges_out[1:, None]) - np.maximum(lo, edges_out[:-1, None]), 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resample_area(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    wx = _area_weights(image.shape[0], shape[0])
    wy = _area_weights(image.shape[1], shape[1])
    return wx @ image @ wy.T


def import_image(path: str | Path, grid: ImagingGrid) -> Phantom:
    """Load an 8- or 16-bit grayscale PNG/PGM, rescale to [0, 1], area-resample to the grid."""
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            data = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise UnsupportedImage(f"cannot read {path}: {exc}") from exc
    if mode == "L":
        full_scale = 255.0
    elif mode.startswith("I;16") or mode == "I":
        full_scale = 65535.0
        if data.min() < 0 or data.max() > 65535:
            raise UnsupportedImage(f"{path}: values exceed 16 bits")
    else:
        raise UnsupportedImage(f"{path}: mode {mode!r} is not 8- or 16-bit grayscale")
    image = data.astype(np.float64) / full_scale
    if image.shape != grid.shape:
        image = resample_area(image, grid.shape)
    return Phantom(np.clip(image, 0.0, 1.0), {"kind": "imported", "path": str(path)})


@dataclass
class Sample:
    phantom: Phantom
    sinogram: Sinogram | None
    lbp: LbpImage
    base_index: int
    realization_seed: int

    @property
    def target(self) -> np.ndarray:
        return self.phantom.image


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    validation: list[Sample] = field(default_factory=list)
    label: str = ""

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.train), len(self.validation)

    def arrays(self, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Stacked (LBP inputs, ground-truth targets) for one split."""
        samples = self.train if which == "train" else self.validation
        return stack_samples(samples)


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise InvalidArgument("empty sample list")
    x = np.stack([s.lbp.data for s in samples])
    y = np.stack([s.target for s in samples])
    return x, y


def split_counts(n_base: int, augment_factor: int, split_fraction: float) -> tuple[int, int]:
    n_train_base = int(round(split_fraction * n_base))
    return n_train_base * augment_factor, (n_base - n_train_base) * augment_factor


def _make_samples(base: int, env_spec: EnvironmentSpec, augment_factor: int, seed: int,
                  grid: ImagingGrid, nominal: Acquisition, params: VesselParams | None,
                  keep_sinograms: bool) -> list[Sample]:
    op = nominal_operator(grid, nominal, env_spec.n_detectors, env_spec.coverage_deg)
    phantom = generate_vessel_phantom(grid, derive_seed(seed, "phantom", base), params)
    out = []
    for c in range(augment_factor):
        ph = phantom if c == 0 else augment(phantom, derive_seed(seed, "augment", base, c))
        rs = derive_seed(seed, "realize", base, c)
        env = realize_environment(env_spec, nominal.vs, nominal.radius, rs)
        sino = synthesize_sinogram(ph.image, env, grid, nominal, derive_seed(seed, "noise", base, c))
        out.append(Sample(ph, sino if keep_sinograms else None, lbp_reconstruct(op, sino), base, rs))
    return out


def build_environment_dataset(env_spec: EnvironmentSpec, n_base: int, augment_factor: int,
                              split_fraction: float, seed: int, grid: ImagingGrid,
                              nominal: Acquisition, params: VesselParams | None = None,
                              workers: int = 1, keep_sinograms: bool = True) -> DatasetSplit:
    """Phantoms, augmentations, measured sinograms and nominal-operator LBP inputs.

    Augmented copies of a base phantom always land in the same split.
    """
    if n_base < 1 or augment_factor < 1:
        raise InvalidArgument("n_base and augment_factor must be >= 1")
    if not 0.0 <= split_fraction <= 1.0:
        raise InvalidArgument("split_fraction must lie in [0, 1]")

    def work(base):
        return _make_samples(base, env_spec, augment_factor, seed, grid, nominal, params, keep_sinograms)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_base = list(pool.map(work, range(n_base)))
    else:
        per_base = [work(b) for b in range(n_base)]

    n_train_base = int(round(split_fraction * n_base))
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n_base)
    train_bases = set(order[:n_train_base].tolist())
    split = DatasetSplit(label=env_spec.label)
    for base, samples in enumerate(per_base):
        (split.train if base in train_bases else split.validation).extend(samples)
    return split


def build_test_set(env_spec: EnvironmentSpec, n_images: int, seed: int, grid: ImagingGrid,
                   nominal: Acquisition, params: VesselParams | None = None,
                   workers: int = 1) -> list[Sample]:
    """Unaugmented test samples. Two specs built with the same seed share
    phantoms, noise and realization variates, which pairs their comparison."""
    split = build_environment_dataset(env_spec, n_images, 1, 1.0, seed, grid, nominal, params,
                                      workers=workers, keep_sinograms=False)
    return split.train
