"""Out-of-distribution scoring and evaluation helpers.

The OOD score of a point is the distributional variance reported by the
last sparse-GP layer; classification models additionally expose the
predictive entropy of the averaged softmax.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.stats import rankdata

from .data import rotate_images
from .errors import EmptyScores, InvalidDistribution
from .likelihoods import predictive_entropy


def map_batches(fn, x: np.ndarray, batch_size: int = 512, threads: int = 1) -> list:
    """Apply fn to row chunks of x, in order, optionally with a thread pool."""
    n = x.shape[0]
    chunks = [x[i:i + batch_size] for i in range(0, n, batch_size)]
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def threshold_at_fpr(scores: np.ndarray, fpr: float) -> float:
    """Score threshold whose exceedance rate on these points is about fpr.

    Linear-interpolated percentile at 100 (1 - fpr); points strictly
    above the threshold are flagged.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise EmptyScores("cannot place a threshold on zero scores")
    if not 0.0 < fpr < 1.0:
        raise InvalidDistribution(f"fpr must lie in (0, 1), got {fpr}")
    return float(np.percentile(scores, 100.0 * (1.0 - fpr), method="linear"))


def flag_rate(scores: np.ndarray, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise EmptyScores("cannot flag zero scores")
    return float(np.mean(scores > threshold))


def auc(negative: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney area under the ROC curve; ties count one half."""
    negative = np.asarray(negative, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=np.float64).ravel()
    if negative.size == 0 or positive.size == 0:
        raise EmptyScores("AUC needs scores on both sides")
    ranks = rankdata(np.concatenate([negative, positive]), method="average")
    u = ranks[negative.size:].sum() - positive.size * (positive.size + 1) / 2.0
    return float(u / (negative.size * positive.size))


def dice(set_a, set_b) -> float:
    """Dice overlap of two index sets; two empty sets count as identical."""
    a, b = set(map(int, set_a)), set(map(int, set_b))
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def ood_scores(model, x: np.ndarray, seed: int = 0, n_samples: int = 256,
               batch_size: int = 512, threads: int = 1) -> dict:
    """Per-point OOD scores; entropy only for classifiers."""
    classify = hasattr(model, "n_classes")

    def fn(chunk):
        if classify:
            return model.predict(chunk, seed=seed, n_samples=n_samples)
        return model.predict(chunk)

    parts = map_batches(fn, np.asarray(x), batch_size, threads)
    out = {"vh": np.concatenate([p["vh"].ravel() for p in parts])}
    if classify:
        probs = np.concatenate([p["probs"] for p in parts], axis=0)
        out["entropy"] = predictive_entropy(probs)
        out["probs"] = probs
    return out


def rotation_sweep(model, images: np.ndarray, angles, seed: int = 0,
                   n_samples: int = 256, batch_size: int = 512,
                   threads: int = 1) -> list[dict]:
    """Score rotated copies of a clean image set at each angle."""
    records = []
    for angle in angles:
        rot = rotate_images(images, float(angle))
        scores = ood_scores(model, rot, seed=seed, n_samples=n_samples,
                            batch_size=batch_size, threads=threads)
        rec = {"angle": float(angle), "vh": scores["vh"],
               "mean_vh": float(scores["vh"].mean())}
        if "entropy" in scores:
            rec["entropy"] = scores["entropy"]
            rec["mean_entropy"] = float(scores["entropy"].mean())
        records.append(rec)
    return records
