"""Network layers on moment maps.

A network is a pipeline over MomentMap fields (N, H, W, C). Dense data
rides along as 1x1 spatial maps so every layer sees the same carrier.

Layer kinds
-----------
ConvSVGP          patch-based sparse GP on raw pixels (first layer only)
DenseSVGP         sparse GP on raw feature rows (first layer only)
AffineConv        moment convolution: mean by A, variance by A*A
DistGPActivation  1x1 Wasserstein-kernel sparse GP on moments
BarycentrePool    closed-form Wasserstein barycentre average pooling
DenseDistGP       dense Wasserstein-kernel sparse GP head

Affine operators carry the Lipschitz machinery: `normalize_affine`
projects each output column to sqrt(C) * ||A_col||^2 <= 1, and
`lipschitz_bound_affine` / `lipschitz_bound_distgp` report the constants
the audits check. `collapse_check` evaluates the small-weight inequalities
in both published transcriptions.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateWeights, DimensionMismatch
from .kernels import KernelParams, kdiag, se_ard, w2_kernel
from .linalg import JITTER_LADDER, cholesky_jitter
from .moments import GaussianMoments, MomentMap, map_from_rows
from .svgp import VariationalPosterior, chol_kuu, kl_qu_pu, svgp_moments

# keeps sqrt(var) differentiable if an affine column collapses to zero
ACTIVATION_VAR_FLOOR = 1e-12


def conv_output_size(size: int, k: int, stride: int, dilation: int) -> int:
    span = dilation * (k - 1) + 1
    out = (size - span) // stride + 1
    if out < 1:
        raise DimensionMismatch(
            f"kernel span {span} exceeds input size {size} (valid padding)")
    return out


def _patch_index(h: int, w: int, k: int, stride: int, dilation: int) -> tuple[np.ndarray, int, int]:
    """Flat (row*W + col) gather indices, shape (P, k*k)."""
    oh = conv_output_size(h, k, stride, dilation)
    ow = conv_output_size(w, k, stride, dilation)
    dy, dx = np.meshgrid(np.arange(k) * dilation, np.arange(k) * dilation, indexing="ij")
    oy, ox = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    rows = oy.reshape(-1, 1) + dy.reshape(1, -1)      # (P, k*k)
    cols = ox.reshape(-1, 1) + dx.reshape(1, -1)
    return rows * w + cols, oh, ow


def extract_patches(x, k: int, stride: int, dilation: int = 1):
    """(N,H,W,C) -> ((N, P, k*k, C), out_h, out_w), valid padding."""
    n, h, w, c = ad.value_of(x).shape
    pidx, oh, ow = _patch_index(h, w, k, stride, dilation)
    flat = ad.reshape(x, (n, h * w, c))
    by_pos = ad.transpose(flat, (1, 0, 2))            # (H*W, N, C)
    gathered = ad.gather0(by_pos, pidx)               # (P, k*k, N, C)
    return ad.transpose(gathered, (2, 0, 1, 3)), oh, ow


def patch_rows(x, k: int, stride: int, dilation: int = 1):
    """(N,H,W,C) -> ((N*P, k*k*C) rows, out_h, out_w)."""
    patches, oh, ow = extract_patches(x, k, stride, dilation)
    n, p, kk, c = ad.value_of(patches).shape
    return ad.reshape(patches, (n * p, kk * c)), oh, ow


# --------------------------------------------------------------- operators

def affine_moment_conv(mean, var, weights, stride: int = 1, dilation: int = 1):
    """Moment convolution of a Gaussian field by a deterministic filter.

    mean' = conv(mean, A); var' = conv(var, A*A). The Hadamard square
    keeps variances nonnegative for any filter.
    """
    k, _, c_in, c_out = ad.value_of(weights).shape
    if ad.value_of(mean).shape[-1] != c_in:
        raise DimensionMismatch("filter input channels do not match the field")
    w2d = ad.reshape(weights, (-1, c_out))
    mrows, oh, ow = patch_rows(mean, k, stride, dilation)
    vrows, _, _ = patch_rows(var, k, stride, dilation)
    n = ad.value_of(mean).shape[0]
    mean_out = ad.matmul(mrows, w2d)
    var_out = ad.matmul(vrows, ad.square(w2d))
    shape = (n, oh, ow, c_out)
    return ad.reshape(mean_out, shape), ad.reshape(var_out, shape)


def normalize_affine(weights: np.ndarray) -> np.ndarray:
    """Project each output column to A / (sqrt(C) * ||A_col||), C = fan-in.

    Idempotent: columns end up with norm 1/sqrt(C) exactly, so a second
    pass divides by one. Raises DegenerateWeights on a vanishing column.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cols = weights.reshape(-1, weights.shape[-1])
    fan_in = cols.shape[0]
    norms = np.sqrt((cols ** 2).sum(axis=0))
    if np.any(norms < 1e-12):
        raise DegenerateWeights("affine column norm below 1e-12; cannot normalize")
    scaled = cols / (np.sqrt(fan_in) * norms)
    return scaled.reshape(weights.shape)


def lipschitz_bound_affine(weights: np.ndarray):
    """Per-column constants sqrt(C) * ||A_col||^2 and their max.

    Stated for a single output column; multi-output operators aggregate
    with the max.
    """
    cols = np.asarray(weights, dtype=np.float64).reshape(-1, np.asarray(weights).shape[-1])
    fan_in = cols.shape[0]
    per_col = np.sqrt(fan_in) * (cols ** 2).sum(axis=0)
    return float(per_col.max()), per_col


def lipschitz_bound_distgp(variance: float, lengthscales_sq: np.ndarray,
                           kuu: np.ndarray, q_mean: np.ndarray,
                           q_chols: np.ndarray):
    """Per-output constants (4 s2 / l)^2 (||K^-1 m||^2 + ||K^-1 (K-S) K^-1||_2).

    Uses the smallest squared lengthscale for ARD kernels (the resulting
    constant dominates every per-dimension one, so the audited inequality
    stays valid). Exact spectral norms; inducing counts here are small.
    """
    s2 = float(variance)
    l2 = float(np.min(np.atleast_1d(lengthscales_sq)))
    m = kuu.shape[0]
    res = cholesky_jitter(0.5 * (kuu + kuu.T), JITTER_LADDER)
    kuu_j = kuu + res.jitter * np.eye(m)
    out = []
    for d in range(q_mean.shape[1]):
        km = np.linalg.solve(kuu_j, q_mean[:, d])
        s = q_chols[d] @ q_chols[d].T
        mid = np.linalg.solve(kuu_j, (kuu_j - s))
        mid = np.linalg.solve(kuu_j, mid.T).T          # K^-1 (K - S) K^-1
        spec = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (mid + mid.T)))))
        out.append((16.0 * s2 * s2 / l2) * (float(km @ km) + spec))
    per_out = np.asarray(out)
    return float(per_out.max()), per_out


def barycentre_pool_moments(mean, var, window: int):
    """Closed-form Wasserstein barycentre average pooling.

    Uniform weights 1/window^2, non-overlapping valid windows:
    mean' = avg(mean), std' = avg(std), var' = std'^2. window=1 is the
    identity.
    """
    if window == 1:
        return mean, var
    n = ad.value_of(mean).shape[0]
    mpatch, oh, ow = extract_patches(mean, window, window)
    spatch, _, _ = extract_patches(ad.sqrt(var), window, window)
    inv = 1.0 / float(window * window)
    mean_out = ad.tsum(mpatch, axis=2) * inv          # (N, P, C)
    std_out = ad.tsum(spatch, axis=2) * inv
    c = ad.value_of(mean).shape[-1]
    shape = (n, oh, ow, c)
    return ad.reshape(mean_out, shape), ad.reshape(ad.square(std_out), shape)


def barycentre_fixed_point(variances: np.ndarray, weights: np.ndarray,
                           tol: float = 1e-14, max_iter: int = 200) -> float:
    """Univariate Wasserstein barycentre variance by fixed-point iteration.

    S <- S^-1/2 (sum_k w_k (S^1/2 V_k S^1/2)^1/2)^2 S^-1/2, scalars.
    Independent oracle for the closed form (sum_k w_k sqrt(V_k))^2.
    """
    s = 1.0
    for _ in range(max_iter):
        inner = np.sum(weights * np.sqrt(s * variances))
        nxt = inner ** 2 / s
        if abs(nxt - s) <= tol * max(1.0, s):
            return float(nxt)
        s = nxt
    return float(s)


# ------------------------------------------------------------------ layers

def _chol_raw_init(scale_chol: np.ndarray) -> np.ndarray:
    """Raw storage for a lower factor: strict-lower free, diag softplus."""
    raw = np.tril(scale_chol, -1)
    raw[np.diag_indices_from(raw)] = ad.softplus_inverse(np.diag(scale_chol))
    return raw


def _posterior_from_raw(q_mean, q_chol_raw):
    strict = ad.tril(q_chol_raw, -1)
    diag = ad.softplus(ad.diag_part(q_chol_raw))
    chol = strict + ad.diag_embed(diag)
    return VariationalPosterior(mean=q_mean, chol_cov=chol)


class _SparseGPLayer:
    """Shared plumbing for layers that own a variational sparse GP."""

    def __init__(self, store, name: str, n_inducing: int, in_dim: int,
                 channels: int, rng, ard_dims: int):
        self.name = name
        self.store = store
        self.n_inducing = n_inducing
        self.channels = channels
        self.in_dim = in_dim
        self.p_variance = store.add(f"{name}/variance_raw",
                                    ad.softplus_inverse(np.array(1.0)))
        self.p_lengths = store.add(f"{name}/lengthscales_raw",
                                   np.full(ard_dims, ad.softplus_inverse(np.array(1.0))))
        self.p_qmean = store.add(f"{name}/q_mean", np.zeros((n_inducing, channels)))
        raw = np.stack([_chol_raw_init(0.1 * np.eye(n_inducing))] * channels)
        self.p_qchol = store.add(f"{name}/q_chol_raw", raw)

    def kernel_params(self) -> KernelParams:
        return KernelParams(variance=ad.softplus(self.p_variance),
                            lengthscales_sq=ad.softplus(self.p_lengths))

    def posterior(self) -> VariationalPosterior:
        return _posterior_from_raw(self.p_qmean, self.p_qchol)

    def kernel_values(self) -> KernelParams:
        return KernelParams(variance=float(ad.value_of(ad.softplus(self.p_variance))),
                            lengthscales_sq=ad.value_of(ad.softplus(self.p_lengths)))

    def posterior_values(self) -> VariationalPosterior:
        post = self.posterior()
        return VariationalPosterior(mean=ad.value_of(post.mean),
                                    chol_cov=ad.value_of(post.chol_cov))

    def _predict_rows(self, kffd, kfu, kuu):
        luu, _ = chol_kuu(kuu)
        pred = svgp_moments(kffd, kfu, luu, self.posterior())
        return pred, luu

    def kl(self):
        kuu = self._kuu()
        luu, _ = chol_kuu(kuu)
        return kl_qu_pu(self.posterior(), luu)


class ConvSVGP(_SparseGPLayer):
    kind = "conv_svgp"

    def __init__(self, store, name, in_channels: int, kernel_size: int,
                 stride: int, channels: int, n_inducing: int, rng,
                 dilation: int = 1):
        patch_dim = kernel_size * kernel_size * in_channels
        super().__init__(store, name, n_inducing, patch_dim, channels, rng,
                         ard_dims=patch_dim)
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.p_z = store.add(f"{name}/inducing_points",
                             rng.normal(size=(n_inducing, patch_dim)))

    def _kuu(self):
        return se_ard(self.p_z, self.p_z, self.kernel_params())

    def forward(self, mmap: MomentMap):
        rows, oh, ow = patch_rows(mmap.mean, self.kernel_size, self.stride,
                                  self.dilation)
        params = self.kernel_params()
        kfu = se_ard(rows, self.p_z, params)
        pred, _ = self._predict_rows(kdiag(params, ad.value_of(rows).shape[0]),
                                     kfu, self._kuu())
        n = mmap.shape[0]
        out = map_from_rows(GaussianMoments(pred.mean, pred.var), n, oh, ow)
        return out, {"pred": pred, "rows_in": rows}


class DenseSVGP(_SparseGPLayer):
    kind = "dense_svgp"

    def __init__(self, store, name, in_dim: int, channels: int,
                 n_inducing: int, rng, linear_mean: bool = False):
        super().__init__(store, name, n_inducing, in_dim, channels, rng,
                         ard_dims=in_dim)
        self.p_z = store.add(f"{name}/inducing_points",
                             rng.normal(size=(n_inducing, in_dim)))
        self.linear_mean = linear_mean
        if linear_mean:
            self.p_mean_w = store.add(f"{name}/mean_weights",
                                      np.zeros((in_dim, channels)))

    def _kuu(self):
        return se_ard(self.p_z, self.p_z, self.kernel_params())

    def forward(self, mmap: MomentMap):
        n, h, w, c = mmap.shape
        if (h, w) != (1, 1):
            raise DimensionMismatch("dense layer expects 1x1 spatial maps")
        rows = ad.reshape(mmap.mean, (n, c))
        params = self.kernel_params()
        kfu = se_ard(rows, self.p_z, params)
        pred, _ = self._predict_rows(kdiag(params, n), kfu, self._kuu())
        mean = pred.mean
        if self.linear_mean:
            mean = mean + ad.matmul(rows, self.p_mean_w)
        out = map_from_rows(GaussianMoments(mean, pred.var), n, 1, 1)
        return out, {"pred": pred, "rows_in": rows}


class DistGPActivationBase(_SparseGPLayer):
    """Wasserstein-kernel sparse GP over moment rows."""

    def __init__(self, store, name, in_dim: int, channels: int,
                 n_inducing: int, rng, ard: bool):
        super().__init__(store, name, n_inducing, in_dim, channels, rng,
                         ard_dims=in_dim if ard else 1)
        self.ard = ard
        self.p_zmean = store.add(f"{name}/inducing_mean",
                                 rng.normal(size=(n_inducing, in_dim)))
        self.p_zvar = store.add(f"{name}/inducing_var_raw",
                                np.full((n_inducing, in_dim), -2.0))

    def inducing_moments(self) -> GaussianMoments:
        return GaussianMoments(self.p_zmean, ad.softplus(self.p_zvar))

    def _kuu(self):
        zm = self.inducing_moments()
        return w2_kernel(zm, zm, self.kernel_params())

    def forward_rows(self, rows: GaussianMoments):
        safe = GaussianMoments(rows.mean, ad.maximum(rows.var, ACTIVATION_VAR_FLOOR))
        params = self.kernel_params()
        zm = self.inducing_moments()
        kfu = w2_kernel(safe, zm, params)
        n = ad.value_of(rows.mean).shape[0]
        pred, _ = self._predict_rows(kdiag(params, n), kfu, self._kuu())
        return pred, safe

    def lipschitz_bound(self):
        params = self.kernel_values()
        zm = self.inducing_moments()
        zm = GaussianMoments(ad.value_of(zm.mean), ad.value_of(zm.var))
        kuu = w2_kernel(zm, zm, params)
        post = self.posterior_values()
        return lipschitz_bound_distgp(params.variance, params.lengthscales_sq,
                                      kuu, post.mean, post.chol_cov)


class DistGPActivation(DistGPActivationBase):
    kind = "distgp_activation"

    def __init__(self, store, name, in_channels: int, channels: int,
                 n_inducing: int, rng, ard: bool = False):
        super().__init__(store, name, in_channels, channels, n_inducing, rng, ard)

    def forward(self, mmap: MomentMap):
        n, h, w, _ = mmap.shape
        pred, safe = self.forward_rows(mmap.rows())
        out = map_from_rows(GaussianMoments(pred.mean, pred.var), n, h, w)
        return out, {"pred": pred, "rows_in": safe}


class DenseDistGP(DistGPActivationBase):
    kind = "dense_distgp"

    def __init__(self, store, name, in_dim: int, channels: int,
                 n_inducing: int, rng, ard: bool = True):
        super().__init__(store, name, in_dim, channels, n_inducing, rng, ard)

    def forward(self, mmap: MomentMap):
        n, h, w, _ = mmap.shape
        if (h, w) != (1, 1):
            raise DimensionMismatch("dense layer expects 1x1 spatial maps")
        pred, safe = self.forward_rows(mmap.rows())
        out = map_from_rows(GaussianMoments(pred.mean, pred.var), n, 1, 1)
        return out, {"pred": pred, "rows_in": safe}


class AffineConv:
    kind = "affine_conv"

    def __init__(self, store, name, in_channels: int, out_channels: int,
                 kernel_size: int, rng, stride: int = 1, dilation: int = 1,
                 normalized: bool = True):
        self.name = name
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.normalized = normalized
        fan_in = kernel_size * kernel_size * in_channels
        init = rng.normal(size=(kernel_size, kernel_size, in_channels,
                                out_channels)) / np.sqrt(fan_in)
        if normalized:
            init = normalize_affine(init)
        self.p_weights = store.add(f"{name}/weights", init)

    def forward(self, mmap: MomentMap):
        # inlines affine_moment_conv so the patch rows (the moments the
        # operator actually acts on) can be handed to the audits
        k, _, c_in, c_out = ad.value_of(self.p_weights).shape
        if ad.value_of(mmap.mean).shape[-1] != c_in:
            raise DimensionMismatch("filter input channels do not match the field")
        w2d = ad.reshape(self.p_weights, (-1, c_out))
        mrows, oh, ow = patch_rows(mmap.mean, k, self.stride, self.dilation)
        vrows, _, _ = patch_rows(mmap.var, k, self.stride, self.dilation)
        n = mmap.shape[0]
        shape = (n, oh, ow, c_out)
        out = MomentMap(ad.reshape(ad.matmul(mrows, w2d), shape),
                        ad.reshape(ad.matmul(vrows, ad.square(w2d)), shape))
        return out, {"rows_in": GaussianMoments(mrows, vrows)}

    def project(self) -> None:
        """Post-step Lipschitz projection of the stored weights."""
        self.p_weights.value = normalize_affine(self.p_weights.value)

    def lipschitz_bound(self):
        return lipschitz_bound_affine(ad.value_of(self.p_weights))


class BarycentrePool:
    kind = "barycentre_pool"

    def __init__(self, window: int):
        if window < 1:
            raise ConfigError("pool window must be >= 1")
        self.window = window

    def forward(self, mmap: MomentMap):
        mean, var = barycentre_pool_moments(mmap.mean, mmap.var, self.window)
        return MomentMap(mean, var), {}


# ---------------------------------------------------------- collapse check

def collapse_check(network) -> dict:
    """Evaluate the small-weight (feature-collapse) inequalities.

    For every affine operator, with Wt = W / m (m = affine fan-out) and
    D = channel count of the GP activation whose outputs the affine
    consumes:

    * statement form: D^2 <Wt, Wt> per layer; the affine feeding the last
      GP uses D_last <Wt, Wt> + s2_last / (2 l2_last);
    * remark form: D * m_prev * D_prev * <Wt, Wt> (defined from the second
      affine on); last affine m * D <Wt, Wt> + s2_last / (2 l2_last).

    Verdict per form: collapse-prone iff every inequality holds (<= 1).
    """
    gp_layers = [l for l in network.layers
                 if isinstance(l, (_SparseGPLayer,))]
    entries = []
    seq = network.layers
    for i, layer in enumerate(seq):
        if not isinstance(layer, AffineConv):
            continue
        prev_gp = next((l for l in reversed(seq[:i]) if isinstance(l, _SparseGPLayer)), None)
        next_gp = next((l for l in seq[i + 1:] if isinstance(l, _SparseGPLayer)), None)
        if prev_gp is None or next_gp is None:
            continue
        w = ad.value_of(layer.p_weights)
        m_out = w.shape[-1]
        wt_sq = float((w ** 2).sum()) / (m_out ** 2)
        d_consumed = prev_gp.channels
        entries.append({
            "affine": layer.name,
            "fan_out": m_out,
            "consumed_channels": d_consumed,
            "wt_inner": wt_sq,
            "feeds": next_gp.name,
        })
    if not entries:
        return {"layers": [], "statement": {"verdict": None},
                "remark": {"verdict": None}}

    last_gp = gp_layers[-1]
    kp = last_gp.kernel_values()
    tail = float(kp.variance) / (2.0 * float(np.min(np.atleast_1d(kp.lengthscales_sq))))

    stmt_vals, rem_vals = [], []
    for j, e in enumerate(entries):
        is_last = (j == len(entries) - 1)
        if is_last:
            stmt = last_gp.channels * e["wt_inner"] + tail
        else:
            stmt = e["consumed_channels"] ** 2 * e["wt_inner"]
        e["statement_lhs"] = stmt
        stmt_vals.append(stmt)
        if j == 0 and not is_last:
            e["remark_lhs"] = None
            continue
        if is_last:
            rem = e["fan_out"] * e["consumed_channels"] * e["wt_inner"] + tail
        else:
            prev = entries[j - 1]
            rem = (e["consumed_channels"] * prev["fan_out"]
                   * prev["consumed_channels"] * e["wt_inner"])
        e["remark_lhs"] = rem
        rem_vals.append(rem)

    return {
        "layers": entries,
        "statement": {"lhs": stmt_vals,
                      "verdict": bool(all(v <= 1.0 for v in stmt_vals))},
        "remark": {"lhs": rem_vals,
                   "verdict": bool(all(v <= 1.0 for v in rem_vals))},
        "last_layer_tail": tail,
    }
