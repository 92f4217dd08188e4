"""Model wrappers, data-dependent initialization, and the training loop.

Training is deterministic given the config seed: every random choice
(minibatches, k-means restarts, warmup subsampling) draws from a named
substream, so reruns reproduce metrics bit for bit except wall time.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (ConfigError, DimensionMismatch, EmptyData,
                     NumericalError)
from .kernels import sqdist
from .layers import ConvSVGP, DistGPActivationBase, patch_rows
from .likelihoods import (DEFAULT_ALPHA_EPS, dirichlet_transform,
                          heteroskedastic_expected_loglik, predict_class_probs)
from .network import Network
from .svgp import NoiseModel, chol_kuu, gaussian_expected_loglik


def named_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named purpose under a run seed."""
    key = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(key,)))


# ------------------------------------------------------------------- models

class RegressionModel:
    """Network plus homoskedastic Gaussian observation noise."""

    def __init__(self, network: Network, noise_variance: float = 0.1):
        if network.output_shape[:2] != (1, 1):
            raise ConfigError("regression needs a dense (1x1) network head")
        self.network = network
        self.store = network.store
        name = "likelihood/noise_raw"
        if name in self.store:
            # a loaded model carries its trained noise in the same store
            self.p_noise = self.store[name]
        else:
            self.p_noise = self.store.add(
                name, ad.softplus_inverse(np.array(noise_variance)))

    def noise_variance(self) -> float:
        return float(ad.value_of(ad.softplus(self.p_noise)))

    def elbo(self, x, y, scale: float = 1.0):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[1] != self.network.output_dim:
            raise DimensionMismatch(
                f"y has {y.shape[1]} columns, network emits {self.network.output_dim}")
        mmap, _ = self.network.forward(x)
        rows = mmap.rows()
        noise = NoiseModel(variance=ad.softplus(self.p_noise)).checked()
        datafit = gaussian_expected_loglik(y, rows.mean, rows.var, noise)
        kl = self.network.kl_total()
        return scale * datafit - kl, scale * datafit, kl

    def predict(self, x) -> dict:
        out = self.network.output_moments(x)
        out["noise_variance"] = self.noise_variance()
        return out


class DirichletClassificationModel:
    """Network trained as heteroskedastic regression on Dirichlet targets."""

    def __init__(self, network: Network, n_classes: int,
                 alpha_eps: float = DEFAULT_ALPHA_EPS):
        if network.output_shape[:2] != (1, 1):
            raise ConfigError("classification needs a dense (1x1) network head")
        if network.output_dim != n_classes:
            raise ConfigError(
                f"network emits {network.output_dim} outputs for {n_classes} classes")
        self.network = network
        self.store = network.store
        self.n_classes = n_classes
        self.alpha_eps = alpha_eps

    def targets(self, labels) -> tuple[np.ndarray, np.ndarray]:
        return dirichlet_transform(labels, self.n_classes, self.alpha_eps)

    def elbo(self, x, labels, scale: float = 1.0):
        y_mu, y_sig2 = self.targets(labels)
        mmap, _ = self.network.forward(x)
        rows = mmap.rows()
        datafit = heteroskedastic_expected_loglik(y_mu, y_sig2, rows.mean, rows.var)
        kl = self.network.kl_total()
        return scale * datafit - kl, scale * datafit, kl

    def predict(self, x, seed: int = 0, n_samples: int = 256) -> dict:
        out = self.network.output_moments(x)
        rng = named_rng(seed, "predict/softmax")
        out["probs"] = predict_class_probs(out["mean"], out["var"], rng,
                                           n_samples=n_samples)
        return out


# ------------------------------------------------------------ initialization

def lloyd_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                 n_iter: int = 25) -> np.ndarray:
    """Plain Lloyd iterations; empty clusters reseed to random points.

    With k >= n the data themselves are returned (resampled, slightly
    jittered so duplicated centers stay distinct).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise EmptyData("cannot place inducing points without data")
    if k >= n:
        reps = points[rng.integers(0, n, size=k)]
        return reps + 1e-6 * rng.normal(size=reps.shape)
    centers = points[rng.choice(n, size=k, replace=False)]
    for _ in range(n_iter):
        d2 = sqdist(points, centers)
        assign = np.argmin(d2, axis=1)
        new = np.empty_like(centers)
        for j in range(k):
            members = points[assign == j]
            new[j] = members.mean(axis=0) if len(members) else \
                points[rng.integers(0, n)]
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    return centers


def median_heuristic_sq(points: np.ndarray, rng: np.random.Generator,
                        max_points: int = 500) -> float:
    """Squared median of pairwise Euclidean distances.

    Falls back to 1.0 when the spread is degenerate (all points nearly
    coincide, as happens for warmup moments under zero-mean posteriors);
    a lengthscale below the resolvable distance scale only poisons the
    Gram conditioning.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if n > max_points:
        points = points[rng.choice(n, size=max_points, replace=False)]
        n = max_points
    if n < 2:
        return 1.0
    d2 = sqdist(points, points)
    upper = d2[np.triu_indices(n, k=1)]
    med_sq = float(np.median(np.sqrt(np.maximum(upper, 0.0)))) ** 2
    return med_sq if med_sq > 1e-10 else 1.0


def _input_prior_vars(network: Network) -> list:
    """Per-layer input prior variance vectors, propagated structurally.

    A GP layer emits kdiag = sigma^2 on every channel; an affine layer maps
    variances through the squared weights; pooling preserves them. The
    result is what an input far from all inducing points produces, which
    sets the reachable band for distributional inducing means.
    """
    out: list = []
    pv = None
    for layer in network.layers:
        out.append(pv)
        if layer.kind == "affine_conv":
            w = ad.value_of(layer.p_weights)
            pv = pv @ (w ** 2).sum(axis=(0, 1))
        elif layer.kind != "barycentre_pool":
            sig2 = float(ad.value_of(layer.kernel_params().variance))
            pv = np.full(layer.channels, sig2)
    return out


def _first_layer_rows(network: Network, x: np.ndarray) -> np.ndarray:
    first = network.layers[0]
    if isinstance(first, ConvSVGP):
        mmap = network.lift(x)
        rows, _, _ = patch_rows(ad.value_of(mmap.mean), first.kernel_size,
                                first.stride, first.dilation)
        return rows
    return np.asarray(x, dtype=np.float64)


def _set_scaled_prior_chol(layer, kuu: np.ndarray, scale: float = 0.1) -> None:
    luu, _ = chol_kuu(kuu)
    raw = np.tril(scale * luu, -1)
    raw[np.diag_indices_from(raw)] = ad.softplus_inverse(scale * np.diag(luu))
    layer.p_qchol.value = np.stack([raw] * layer.channels)


def init_model(network: Network, x: np.ndarray, seed: int = 0,
               warmup_points: int = 256, kmeans_rows: int = 2000) -> Network:
    """Data-dependent initialization, in place.

    First layer: k-means inducing inputs, median-heuristic lengthscales.
    Wasserstein layers: a warmup forward pass collects their input
    moments. Zero-mean initial posteriors make every warmup mean
    identically zero, so inducing means are placed equidistantly over the
    reachable prior band [-3s, 3s] per channel (s^2 = the propagated
    prior variance of that input); coincident means at zero would leave
    the kernel's mean-channel gradient exactly zero. Inducing variances
    start at the per-channel median of the warmup input variances, and
    the lengthscale is the median squared distance between warmup rows
    and inducing measures in the (mean, std) embedding where squared
    distances coincide with the 2-Wasserstein metric. A within-data
    heuristic would be degenerate here: the warmup embeds are nearly
    coincident while the inducing grid is not, so a lengthscale fitted
    only to the inputs underflows every cross-covariance and training
    receives exactly zero gradient. Every variational covariance starts
    at 0.1 times the prior factor.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyData("cannot initialize a model from an empty dataset")
    rng = named_rng(seed, "init/kmeans")

    rows = _first_layer_rows(network, x)
    if rows.shape[0] > kmeans_rows:
        rows = rows[rng.choice(rows.shape[0], size=kmeans_rows, replace=False)]
    first = network.layers[0]
    first.p_z.value = lloyd_kmeans(rows, first.n_inducing, rng)
    l2 = median_heuristic_sq(rows, rng)
    first.p_lengths.value = np.full(first.p_lengths.value.shape,
                                    ad.softplus_inverse(np.array(l2)))
    _set_scaled_prior_chol(first, ad.value_of(first._kuu()))

    n_warm = min(warmup_points, x.shape[0])
    warm = x[rng.choice(x.shape[0], size=n_warm, replace=False)] \
        if x.shape[0] > n_warm else x
    _, auxes = network.forward(warm, collect=True)
    prior_vars = _input_prior_vars(network)
    for layer, aux, pv in zip(network.layers, auxes, prior_vars):
        if not isinstance(layer, DistGPActivationBase):
            continue
        rows_in = aux["rows_in"]
        means = ad.value_of(rows_in.mean)
        stds = np.sqrt(ad.value_of(rows_in.var))
        embed = np.concatenate([means, stds], axis=1)
        if embed.shape[0] > kmeans_rows:
            embed = embed[rng.choice(embed.shape[0], size=kmeans_rows, replace=False)]
        scale = np.sqrt(pv)
        m_ind = layer.n_inducing
        grid = np.linspace(-3.0, 3.0, m_ind) if m_ind > 1 else np.zeros(1)
        centers = np.empty((m_ind, means.shape[1]))
        for d in range(means.shape[1]):
            centers[:, d] = scale[d] * rng.permutation(grid)
        layer.p_zmean.value = centers
        med_var = np.maximum(np.median(stds ** 2, axis=0), 1e-6)
        layer.p_zvar.value = ad.softplus_inverse(
            np.broadcast_to(med_var, layer.p_zvar.value.shape))
        zembed = np.concatenate([centers,
                                 np.broadcast_to(np.sqrt(med_var),
                                                 centers.shape)], axis=1)
        cross = ((embed[:, None, :] - zembed[None, :, :]) ** 2).sum(axis=-1)
        l2 = float(np.median(cross))
        if not l2 > 0.0:
            l2 = 1.0
        layer.p_lengths.value = np.full(layer.p_lengths.value.shape,
                                        ad.softplus_inverse(np.array(l2)))
        _set_scaled_prior_chol(layer, ad.value_of(layer._kuu()))
    return network


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, store: ad.ParameterStore, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in store.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.store.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


# ------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    steps: int = 100
    batch_size: int | None = None
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0
    log_every: int = 1
    # parameters whose name contains any of these substrings keep their
    # current value (e.g. pin a hidden-layer amplitude to preserve the
    # distributional-uncertainty contrast)
    freeze: tuple = ()


@dataclass
class TrainResult:
    steps_run: int
    history: list = field(default_factory=list)
    rolled_back: bool = False
    final_elbo: float = float("nan")


def train(model, x, y, config: TrainConfig, metrics_path=None) -> TrainResult:
    """Maximize the evidence bound with Adam.

    Minibatch draws rescale only the data terms. After every accepted
    step the Lipschitz projection is re-applied to normalized affine
    operators. A non-finite loss rolls the parameters back to the last
    good state and stops the run.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if n == 0:
        raise EmptyData("cannot train on an empty dataset")
    if config.batch_size is not None and config.batch_size < 1:
        raise ConfigError("batch_size must be positive")
    store = model.store
    opt = Adam(store, learning_rate=config.learning_rate)
    frozen = [name for name in store.names()
              if any(tag in name for tag in config.freeze)]
    batch_rng = named_rng(config.seed, "train/batches")
    result = TrainResult(steps_run=0)
    last_good = store.snapshot()
    sink = open(metrics_path, "w") if metrics_path is not None else None
    t0 = time.perf_counter()
    try:
        for step in range(config.steps):
            if config.batch_size is None or config.batch_size >= n:
                xb, yb, scale = x, y, 1.0
            else:
                idx = batch_rng.choice(n, size=config.batch_size, replace=False)
                xb, yb = x[idx], np.asarray(y)[idx]
                scale = n / config.batch_size
            stash = {}

            def loss_fn():
                elbo, datafit, kl = model.elbo(xb, yb, scale)
                stash["datafit"] = float(ad.value_of(datafit))
                stash["kl"] = float(ad.value_of(kl))
                return -elbo

            try:
                loss, grads = ad.gradient(loss_fn, store)
            except NumericalError as exc:
                # non-finite loss or an unfactorizable Gram: the last good
                # parameters are the result of the run
                store.restore(last_good)
                result.rolled_back = True
                record = {"step": step, "event": "numerical_rollback",
                          "detail": type(exc).__name__}
                result.history.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                break
            for name in frozen:
                grads[name] = np.zeros_like(grads[name])
            grads, gnorm = clip_global_norm(grads, config.clip_norm)
            opt.step(grads)
            model.network.project()
            last_good = store.snapshot()
            result.steps_run = step + 1
            result.final_elbo = -loss
            if step % config.log_every == 0 or step == config.steps - 1:
                record = {"step": step, "elbo": -loss,
                          "datafit": stash["datafit"], "kl": stash["kl"],
                          "grad_norm": gnorm,
                          "wallclock_ms": 1000.0 * (time.perf_counter() - t0)}
                result.history.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
    finally:
        if sink:
            sink.close()
    return result
