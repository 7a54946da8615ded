"""Linear back-projection, the network's input image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ForwardOperator, Sinogram, apply_adjoint


@dataclass(frozen=True)
class LbpImage:
    data: np.ndarray  # normalized to max |value| = 1 unless identically zero
    scale: float

    def denormalized(self) -> np.ndarray:
        return self.data * self.scale


def lbp_reconstruct(op: ForwardOperator, sinogram: Sinogram | np.ndarray) -> LbpImage:
    """Back-project with the nominal operator and normalize by the max magnitude.

    Negative values are kept; they carry information the network must remove.
    """
    raw = apply_adjoint(op, sinogram)
    peak = float(np.max(np.abs(raw)))
    if peak == 0.0:
        return LbpImage(raw, 1.0)
    return LbpImage(raw / peak, peak)
