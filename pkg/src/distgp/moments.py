"""Containers for diagonal Gaussian moments.

Hidden activations are Gaussian measures carried by their first two
moments; covariance is diagonal throughout, so `var` always matches
`mean` in shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch


@dataclass
class GaussianMoments:
    """Flat collection of diagonal Gaussians, shape (..., D)."""

    mean: object
    var: object

    def __post_init__(self):
        if ad.value_of(self.mean).shape != ad.value_of(self.var).shape:
            raise DimensionMismatch("mean and var must have identical shapes")

    @property
    def shape(self):
        return ad.value_of(self.mean).shape

    def values(self) -> "GaussianMoments":
        return GaussianMoments(ad.value_of(self.mean), ad.value_of(self.var))


@dataclass
class MomentMap:
    """Spatial field of diagonal Gaussians, shape (N, H, W, C)."""

    mean: object
    var: object

    def __post_init__(self):
        mshape = ad.value_of(self.mean).shape
        if mshape != ad.value_of(self.var).shape:
            raise DimensionMismatch("mean and var must have identical shapes")
        if len(mshape) != 4:
            raise DimensionMismatch(f"MomentMap expects (N,H,W,C), got {mshape}")

    @property
    def shape(self):
        return ad.value_of(self.mean).shape

    def rows(self) -> GaussianMoments:
        """Flatten spatial structure to (N*H*W, C) rows."""
        n, h, w, c = self.shape
        return GaussianMoments(ad.reshape(self.mean, (n * h * w, c)),
                               ad.reshape(self.var, (n * h * w, c)))

    def values(self) -> "MomentMap":
        return MomentMap(ad.value_of(self.mean), ad.value_of(self.var))


def map_from_rows(rows: GaussianMoments, n: int, h: int, w: int) -> MomentMap:
    c = ad.value_of(rows.mean).shape[-1]
    return MomentMap(ad.reshape(rows.mean, (n, h, w, c)),
                     ad.reshape(rows.var, (n, h, w, c)))


def deterministic_map(x: np.ndarray) -> MomentMap:
    """Lift observed pixels to degenerate Gaussians (zero variance)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    return MomentMap(x, np.zeros_like(x))
