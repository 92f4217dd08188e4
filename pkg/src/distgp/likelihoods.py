"""Observation models.

Classification runs as heteroskedastic regression: one-hot labels are
smoothed into Dirichlet concentrations alpha (alpha_eps for wrong
classes, 1 + alpha_eps for the true class), and each concentration is
moment-matched by a log-normal, giving per-class Gaussian targets

    sig2_c = ln(1/alpha_c + 1)
    mu_c   = ln(alpha_c) - sig2_c / 2.

Class probabilities are then Monte-Carlo softmax integrals over the GP
predictive, which stays a closed-form Gaussian throughout training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import InvalidDistribution

DEFAULT_ALPHA_EPS = 0.01


def dirichlet_transform(labels: np.ndarray, n_classes: int,
                        alpha_eps: float = DEFAULT_ALPHA_EPS):
    """Labels (N,) -> per-class Gaussian regression targets (mu, sig2), each (N, C)."""
    if not (0.0 < alpha_eps < 0.5):
        raise InvalidDistribution(f"alpha_eps must lie in (0, 0.5), got {alpha_eps}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise InvalidDistribution("labels must be integers in [0, n_classes)")
    alpha = np.full((labels.shape[0], n_classes), alpha_eps, dtype=np.float64)
    alpha[np.arange(labels.shape[0]), labels] += 1.0
    sig2 = np.log(1.0 / alpha + 1.0)
    mu = np.log(alpha) - sig2 / 2.0
    return mu, sig2


def heteroskedastic_expected_loglik(y_mu, y_sig2, mean, var):
    """E_q [log N(y_mu | f, y_sig2)] with q = N(mean, var); sums all entries.

    The predictive variance enters as -var / (2 y_sig2): more model
    uncertainty always lowers the bound, and the expression is concave in
    mean.
    """
    y_sig2 = np.asarray(y_sig2, dtype=np.float64)
    resid = ad.square(ad.sub(y_mu, mean))
    quad = ad.tsum((resid + var) / (2.0 * y_sig2))
    const = -0.5 * float(np.sum(np.log(2.0 * np.pi * y_sig2)))
    return const - quad


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_class_probs(mean, var, rng: np.random.Generator,
                        n_samples: int = 256) -> np.ndarray:
    """Monte-Carlo softmax integration of a diagonal Gaussian predictive.

    Zero predictive variance collapses to softmax(mean) exactly; the
    estimate is invariant to shifting every class mean by a constant.
    """
    mean = ad.value_of(mean)
    var = ad.value_of(var)
    if n_samples < 1:
        raise InvalidDistribution("need at least one sample")
    if np.all(var == 0.0):
        return _softmax(mean)
    std = np.sqrt(var)
    acc = np.zeros_like(mean)
    for _ in range(n_samples):
        acc += _softmax(mean + std * rng.standard_normal(mean.shape))
    return acc / n_samples


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy -sum_c p ln p per row, with 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < -1e-12):
        raise InvalidDistribution("negative probabilities")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise InvalidDistribution("rows must sum to one")
    safe = np.where(probs > 0.0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)
