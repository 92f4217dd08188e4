"""Sparse variational GP core.

The predictive law for inducing posterior q(U) = N(m_U, S_U) is

    mean = K_fu K_uu^-1 m_U
    var  = K_ff - K_fu K_uu^-1 (K_uu - S_U) K_uu^-1 K_uf      (diagonal)

which splits exactly into a distributional part  v_h = K_ff - Q_ff
(what the data could not teach the inducing points; the OOD signal) and a
within-data part  v_g = diag(K_fu K_uu^-1 S_U K_uu^-1 K_uf).

All heavy algebra is routed through one Cholesky of K_uu with the shared
jitter ladder; every function is dual-mode over ndarrays / tape Tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NegativeVariance, NonFiniteLoss
from .kernels import KernelParams, kdiag, se_ard, w2_kernel
from .linalg import JITTER_LADDER, cholesky_jitter
from .moments import GaussianMoments

NOISE_FLOOR = 1e-8
VAR_CLAMP_FLOOR = -1e-10
ENTROPY_VAR_FLOOR = 1e-12


class ClampCounter:
    """Counts silent negative-variance clamps; stays 0 on healthy runs."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


CLAMPS = ClampCounter()


@dataclass
class InducingSet:
    """Euclidean points (locations) or distributional points (moments)."""

    kind: str  # "euclidean" | "distributional"
    locations: object = None          # (M, D) when euclidean
    moments: GaussianMoments | None = None  # (M, D) diagonal when distributional

    def __post_init__(self):
        if self.kind not in ("euclidean", "distributional"):
            raise ValueError(f"unknown inducing kind: {self.kind}")
        if self.kind == "euclidean" and self.locations is None:
            raise DimensionMismatch("euclidean inducing set needs locations")
        if self.kind == "distributional" and self.moments is None:
            raise DimensionMismatch("distributional inducing set needs moments")

    def count(self) -> int:
        if self.kind == "euclidean":
            return ad.value_of(self.locations).shape[0]
        return ad.value_of(self.moments.mean).shape[0]


@dataclass
class VariationalPosterior:
    """q(U): mean (M, D_out) and per-output lower Cholesky factors (D_out, M, M)."""

    mean: object
    chol_cov: object

    def n_outputs(self) -> int:
        return ad.value_of(self.mean).shape[1]


@dataclass
class NoiseModel:
    """Homoskedastic Gaussian observation noise variance."""

    variance: object

    def checked(self):
        val = float(np.min(np.atleast_1d(ad.value_of(self.variance))))
        if not np.isfinite(val) or val < NOISE_FLOOR:
            raise NonFiniteLoss(
                f"noise variance {val!r} below floor {NOISE_FLOOR}; "
                "zero-noise limit is not admitted")
        return self.variance


def chol_kuu(kuu):
    """Symmetrize and factor K_uu, picking the jitter eagerly off the ladder."""
    kuu = ad.mul(ad.add(kuu, ad.transpose(kuu)), 0.5)
    eye = np.eye(ad.value_of(kuu).shape[0])
    concrete = ad.value_of(kuu)
    jitter = cholesky_jitter(concrete, JITTER_LADDER).jitter
    boosted = ad.add(kuu, jitter * eye) if jitter else kuu
    return ad.cholesky(boosted), jitter


def _clamp_variance(vh):
    """Enforce the negative-variance policy on concrete values, then clamp."""
    vals = ad.value_of(vh)
    worst = float(vals.min()) if vals.size else 0.0
    if worst < VAR_CLAMP_FLOOR:
        raise NegativeVariance(
            f"predicted variance {worst} fell below the {VAR_CLAMP_FLOOR} floor")
    if worst < 0.0:
        CLAMPS.count += int(np.count_nonzero(vals < 0.0))
        return ad.maximum(vh, 0.0)
    return vh


@dataclass
class MomentPrediction:
    """Predictive moments plus the uncertainty split (all (N, D_out))."""

    mean: object
    var: object
    distributional: object   # v_h, shared across outputs, shape (N, 1)
    within_data: object      # v_g, shape (N, D_out)


def svgp_moments(kff_diag, kfu, luu, posterior: VariationalPosterior) -> MomentPrediction:
    """Predictive algebra given Gram blocks and the K_uu Cholesky factor."""
    a = ad.triangular_solve(luu, ad.transpose(kfu))              # (M, N) = L^-1 K_uf
    b = ad.triangular_solve(luu, posterior.mean)                 # (M, D)
    mean = ad.matmul(ad.transpose(a), b)                         # (N, D)
    qdiag = ad.tsum(ad.square(a), axis=0)                        # (N,)
    vh = _clamp_variance(kff_diag - qdiag)                       # (N,)
    c = ad.triangular_solve(luu, a, trans=True)                  # (M, N) = K_uu^-1 K_uf
    proj = ad.matmul(ad.transpose(posterior.chol_cov, (0, 2, 1)), c)  # (D, M, N)
    sg = ad.transpose(ad.tsum(ad.square(proj), axis=1))          # (N, D)
    vh_col = ad.reshape(vh, (-1, 1))
    return MomentPrediction(mean=mean, var=vh_col + sg,
                            distributional=vh_col, within_data=sg)


def _gram_blocks(inputs, inducing: InducingSet, params: KernelParams):
    if inducing.kind == "euclidean":
        x = inputs
        n = ad.value_of(x).shape[0]
        kfu = se_ard(x, inducing.locations, params)
        kuu = se_ard(inducing.locations, inducing.locations, params)
    else:
        if not isinstance(inputs, GaussianMoments):
            raise DimensionMismatch("distributional inducing points need moment inputs")
        n = ad.value_of(inputs.mean).shape[0]
        kfu = w2_kernel(inputs, inducing.moments, params)
        kuu = w2_kernel(inducing.moments, inducing.moments, params)
    return kdiag(params, n), kfu, kuu


def predict_moments(inputs, inducing: InducingSet, posterior: VariationalPosterior,
                    params: KernelParams) -> MomentPrediction:
    """End-to-end predictive moments for one SVGP (any inducing kind)."""
    kffd, kfu, kuu = _gram_blocks(inputs, inducing, params)
    luu, _ = chol_kuu(kuu)
    return svgp_moments(kffd, kfu, luu, posterior)


def kl_qu_pu(posterior: VariationalPosterior, luu) -> object:
    """KL[q(U) || p(U)] summed over independent output dimensions."""
    m = ad.value_of(posterior.mean).shape[0]
    d = posterior.n_outputs()
    logdet_k = 2.0 * ad.tsum(ad.log(ad.diag_part(luu)))
    # stack the D triangular factors side by side for one solve
    ls_cols = ad.reshape(ad.transpose(posterior.chol_cov, (1, 0, 2)), (m, d * m))
    white_s = ad.triangular_solve(luu, ls_cols)                  # L^-1 [S-facts]
    trace = ad.tsum(ad.square(white_s))
    white_m = ad.triangular_solve(luu, posterior.mean)
    quad = ad.tsum(ad.square(white_m))
    diags = ad.diag_part(posterior.chol_cov)                     # (D, M)
    logdet_s = 2.0 * ad.tsum(ad.log(diags))
    return 0.5 * (trace + quad - d * m + d * logdet_k - logdet_s)


def gaussian_expected_loglik(y, mean, var, noise_variance):
    """E_q [log N(y | f, s2)] with q = N(mean, var), summed over entries."""
    resid = ad.square(ad.sub(y, mean))
    s2 = noise_variance
    n = ad.value_of(y).size
    return (-0.5 * n * np.log(2.0 * np.pi) - 0.5 * n * ad.log(s2)
            - ad.tsum(resid + var) / (2.0 * s2))


def elbo_svgp(x, y, inducing: InducingSet, posterior: VariationalPosterior,
              params: KernelParams, noise: NoiseModel, scale: float = 1.0):
    """Uncollapsed single-layer bound.

    scale multiplies only the data terms (minibatch N/B correction); the
    KL is never scaled. Returns (elbo, datafit, kl) as a triple.
    """
    s2 = noise.checked()
    kffd, kfu, kuu = _gram_blocks(x, inducing, params)
    luu, _ = chol_kuu(kuu)
    pred = svgp_moments(kffd, kfu, luu, posterior)
    datafit = scale * gaussian_expected_loglik(y, pred.mean, pred.var, s2)
    kl = kl_qu_pu(posterior, luu)
    return datafit - kl, datafit, kl


def decompose_uncertainty(pred: MomentPrediction):
    """Return (distributional, within_data) and check the additive identity."""
    total = ad.value_of(pred.var)
    parts = ad.value_of(pred.distributional) + ad.value_of(pred.within_data)
    gap = float(np.max(np.abs(total - parts))) if total.size else 0.0
    if gap > 1e-8:
        raise NonFiniteLoss(f"uncertainty split violates additivity by {gap}")
    return pred.distributional, pred.within_data


def distributional_differential_entropy(var):
    """Per-output Gaussian differential entropy 0.5 ln(2 pi v) + 0.5."""
    v = ad.maximum(var, ENTROPY_VAR_FLOOR)
    return 0.5 * ad.log(2.0 * np.pi * v) + 0.5


@dataclass
class CollapsedResult:
    bound: object
    datafit_quad: object       # 0.5 * y^T (Q_ff + s2 I)^-1 y
    trace_term: object         # (1/(2 s2)) tr(K_ff - Q_ff)
    optimal_mean: object       # (M, D_out)
    optimal_cov: object        # (M, M), shared across outputs


def collapsed_sgpr(x, y, z, params: KernelParams, noise: NoiseModel) -> CollapsedResult:
    """Collapsed (optimal-q) sparse regression bound, dense N x N route.

    bound = log N(y | 0, Q_ff + s2 I) - tr(K_ff - Q_ff) / (2 s2), with the
    optimal q(U) moments returned alongside. Desk-scale N only.
    """
    s2 = noise.checked()
    yv = ad.value_of(y)
    if yv.ndim != 2:
        raise DimensionMismatch("y must be (N, D)")
    n = yv.shape[0]
    kuu = se_ard(z, z, params)
    luu, _ = chol_kuu(kuu)
    kfu = se_ard(x, z, params)
    a = ad.triangular_solve(luu, ad.transpose(kfu))              # (M, N)
    qff = ad.matmul(ad.transpose(a), a)
    kffd = kdiag(params, n)
    trace_term = ad.tsum(kffd - ad.diag_part(qff)) / (2.0 * s2)

    cov = qff + ad.diag_embed(ad.mul(s2, np.ones(n)))
    lcov, _ = chol_kuu(cov)
    alpha = ad.triangular_solve(lcov, y)
    quad = 0.5 * ad.tsum(ad.square(alpha))
    logdet = 2.0 * ad.tsum(ad.log(ad.diag_part(lcov)))
    d_out = yv.shape[1]
    bound = (-0.5 * n * d_out * np.log(2.0 * np.pi) - 0.5 * d_out * logdet
             - quad - trace_term)

    # optimal q(U): m* = s2^-1 K_uu Sig^-1 K_uf y, S* = K_uu Sig^-1 K_uu,
    # with Sig = K_uu + s2^-1 K_uf K_fu
    sig = kuu + ad.matmul(ad.transpose(kfu), kfu) / s2
    lsig, _ = chol_kuu(sig)
    half_k = ad.triangular_solve(lsig, kuu)                      # Lsig^-1 K_uu
    s_star = ad.matmul(ad.transpose(half_k), half_k)
    kufy = ad.matmul(ad.transpose(kfu), y)
    m_star = ad.matmul(
        ad.transpose(half_k),
        ad.triangular_solve(lsig, kufy)) / s2
    return CollapsedResult(bound=bound, datafit_quad=quad, trace_term=trace_term,
                           optimal_mean=m_star, optimal_cov=s_star)
