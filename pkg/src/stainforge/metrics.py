"""Evaluation statistics: quadratic-weighted kappa, Wilcoxon rank-sum, PCA, center probe."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import DegenerateData, InsufficientSamples, SampleTooSmall, UndefinedKappa, ValidationError

__all__ = [
    "confusion_matrix",
    "quadratic_kappa",
    "midranks",
    "RankSumResult",
    "wilcoxon_rank_sum",
    "ProjectionResult",
    "pca_project",
    "ProbeResult",
    "stain_invariance_probe",
]

EXACT_MAX_TOTAL = 12


def confusion_matrix(truths, predictions, n_classes: int) -> np.ndarray:
    truths = np.asarray(truths, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if truths.shape != predictions.shape or truths.ndim != 1 or len(truths) == 0:
        raise ValidationError("predictions and truths must be equal-length non-empty 1-D")
    for arr in (truths, predictions):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValidationError(f"class ids must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (truths, predictions), 1.0)
    return counts


def quadratic_kappa(predictions, truths, n_classes: int) -> float:
    """Cohen's kappa with weights ``(i - j)^2 / (K - 1)^2``; rows of the confusion matrix are truths."""
    if n_classes < 2:
        raise ValidationError("kappa needs at least 2 classes")
    observed = confusion_matrix(truths, predictions, n_classes)
    if np.count_nonzero(observed.sum(axis=1)) < 2:
        raise UndefinedKappa("truths contain a single class")
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(n_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    denom = (weights * expected).sum()
    if denom == 0:
        raise UndefinedKappa("expected disagreement is zero")
    return float(1.0 - (weights * observed).sum() / denom)


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


class RankSumResult(NamedTuple):
    statistic: float
    pvalue: float
    exact: bool


def _exact_two_sided(ranks, n_a: int, u_obs: float) -> float:
    # Null distribution of the rank sum of group a, by dynamic programming over
    # doubled ranks (midranks are half-integers).
    r2 = np.rint(2 * np.asarray(ranks)).astype(int)
    total = int(r2.sum())
    ways = np.zeros((n_a + 1, total + 1), dtype=object)
    ways[0, 0] = 1
    for r in r2:
        for k in range(n_a, 0, -1):
            ways[k, r:] = ways[k, r:] + ways[k - 1, : total + 1 - r]
    dist = ways[n_a]
    sums2 = np.nonzero(dist)[0]
    counts = np.array([dist[s] for s in sums2], dtype=object)
    offset2 = n_a * (n_a + 1)  # 2 * n(n+1)/2
    u_vals = (sums2 - offset2) / 2.0
    n_b = len(ranks) - n_a
    mean = n_a * n_b / 2.0
    dev = abs(u_obs - mean)
    extreme = np.abs(u_vals - mean) >= dev - 1e-9
    return min(1.0, float(sum(counts[extreme]) / sum(counts)))


def wilcoxon_rank_sum(a, b, exact: bool | None = None) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test.

    ``statistic`` is ``U = R_a - n_a (n_a + 1) / 2`` with midranks for ties.
    The p-value is exact when ``len(a) + len(b) <= 12`` (unless ``exact`` says
    otherwise) and from the tie-corrected normal approximation with
    continuity correction beyond that.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) < 3 or len(b) < 3:
        raise SampleTooSmall("each sample needs at least 3 values")
    n_a, n_b = len(a), len(b)
    ranks = midranks(np.concatenate([a, b]))
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    if exact is None:
        exact = n_a + n_b <= EXACT_MAX_TOTAL
    if exact:
        return RankSumResult(u, _exact_two_sided(ranks, n_a, u), True)
    n = n_a + n_b
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    mean = n_a * n_b / 2.0
    if var <= 0:
        return RankSumResult(u, 1.0, False)
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return RankSumResult(u, min(1.0, math.erfc(z / math.sqrt(2.0))), False)


class ProjectionResult(NamedTuple):
    components: np.ndarray  # (out_dims, D), orthonormal rows
    coordinates: np.ndarray  # (N, out_dims)
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray


def pca_project(vectors, out_dims: int = 2) -> ProjectionResult:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValidationError("pca_project needs an (N >= 3, D >= 2) array")
    if not 1 <= out_dims <= x.shape[1]:
        raise ValidationError("out_dims must lie in [1, D]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = evecs[:, ::-1]
    total = evals.sum()
    if total <= 0:
        raise DegenerateData("covariance has rank 0")
    comps = evecs[:, :out_dims].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return ProjectionResult(comps, xc @ comps.T, evals[:out_dims] / total, mean)


class ProbeResult(NamedTuple):
    accuracy: float
    chance: float


def stain_invariance_probe(features, center_ids, folds: int = 5, seed: int = 0) -> ProbeResult:
    """Cross-validated accuracy of a linear classifier predicting the center from features.

    Lower accuracy means the features carry less center (stain) information.
    ``chance`` is the majority-class rate.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold, cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(center_ids)
    ids, counts = np.unique(y, return_counts=True)
    if len(ids) < 2:
        raise InsufficientSamples("probe needs at least 2 centers")
    if counts.min() < 20:
        raise InsufficientSamples("probe needs at least 20 samples per center")
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = cross_val_score(clf, x, y, cv=cv)
    return ProbeResult(float(scores.mean()), float(counts.max() / counts.sum()))
