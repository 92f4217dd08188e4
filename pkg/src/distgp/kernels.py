"""Covariance functions on points and on Gaussian measures.

Conventions, fixed across the package:

* squared-exponential ARD  k(x, x') = s2 * exp(-sum_d (x_d - x'_d)^2 / l2_d)
  (no 1/2 factor in the exponent);
* squared 2-Wasserstein distance between univariate Gaussians
  W2^2 = (m - m')^2 + (sqrt(v) - sqrt(v'))^2, summed over dimensions for
  diagonal Gaussians;
* Wasserstein kernel  k(mu, nu) = s2 * exp(-sum_d W2^2_d / l2_d), positive
  definite for this distance;
* hybrid kernel = Euclidean SE factor times the Wasserstein exponential.

All functions are dual-mode (ndarrays or autodiff Tensors). Lengthscale
parameters are stored squared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch
from .moments import GaussianMoments


@dataclass
class KernelParams:
    """variance s2 (scalar) and squared lengthscales l2 (per input dim)."""

    variance: object
    lengthscales_sq: object

    def ard_dim(self) -> int:
        return int(np.atleast_1d(ad.value_of(self.lengthscales_sq)).shape[-1])


def _check_pair(x1, x2):
    s1, s2 = ad.value_of(x1).shape, ad.value_of(x2).shape
    if len(s1) != 2 or len(s2) != 2 or s1[1] != s2[1]:
        raise DimensionMismatch(f"pairwise kernel needs (N,D),(M,D); got {s1} {s2}")


def sqdist(x1, x2):
    """Pairwise squared Euclidean distances, (N,D),(M,D) -> (N,M)."""
    _check_pair(x1, x2)
    n1 = ad.tsum(ad.square(x1), axis=1, keepdims=True)          # (N,1)
    n2 = ad.reshape(ad.tsum(ad.square(x2), axis=1), (1, -1))    # (1,M)
    cross = ad.matmul(x1, ad.transpose(x2))
    return ad.maximum(n1 + n2 - 2.0 * cross, 0.0)


def _scaled(x, lengthscales_sq):
    inv = ad.power(lengthscales_sq, -0.5)
    return ad.mul(x, ad.reshape(inv, (1, -1)))


def se_ard(x1, x2, params: KernelParams):
    """Squared-exponential ARD Gram matrix, (N,M)."""
    d2 = sqdist(_scaled(x1, params.lengthscales_sq), _scaled(x2, params.lengthscales_sq))
    return params.variance * ad.exp(-d2)


def w2_squared(mean1, var1, mean2, var2):
    """Univariate squared 2-Wasserstein distance, elementwise."""
    dm = ad.sub(mean1, mean2)
    ds = ad.sub(ad.sqrt(var1), ad.sqrt(var2))
    return ad.square(dm) + ad.square(ds)


def w2_sq_pairwise(m1: GaussianMoments, m2: GaussianMoments, lengthscales_sq=None):
    """Pairwise sum_d W2^2_d / l2_d over diagonal Gaussians, (N,M).

    With lengthscales_sq None the plain (unweighted) squared distance is
    returned. Decomposes as weighted sqdist on means plus weighted sqdist
    on standard deviations.
    """
    mu1, mu2 = m1.mean, m2.mean
    sd1, sd2 = ad.sqrt(m1.var), ad.sqrt(m2.var)
    if lengthscales_sq is not None:
        mu1, mu2 = _scaled(mu1, lengthscales_sq), _scaled(mu2, lengthscales_sq)
        sd1, sd2 = _scaled(sd1, lengthscales_sq), _scaled(sd2, lengthscales_sq)
    return sqdist(mu1, mu2) + sqdist(sd1, sd2)


def w2_kernel(m1: GaussianMoments, m2: GaussianMoments, params: KernelParams):
    """Wasserstein-2 exponential kernel Gram matrix on diagonal Gaussians."""
    return params.variance * ad.exp(-w2_sq_pairwise(m1, m2, params.lengthscales_sq))


def hybrid_kernel(x1, m1: GaussianMoments, x2, m2: GaussianMoments,
                  euclid: KernelParams, w2_lengthscales_sq):
    """SE factor on coordinates times Wasserstein exponential on moments."""
    return se_ard(x1, x2, euclid) * ad.exp(-w2_sq_pairwise(m1, m2, w2_lengthscales_sq))


def kdiag(params: KernelParams, n: int):
    """Diagonal of a stationary Gram at identical inputs: s2 everywhere."""
    return ad.mul(params.variance, np.ones(n))
