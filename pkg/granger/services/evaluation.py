"""
Granger-causality readout and ranking metrics.

``auroc`` and ``aupr`` are computed with exact rational arithmetic over
pairwise comparisons and tie blocks, then rounded once to float, so they
agree bit-for-bit with any exact counting oracle.
"""

import logging
from fractions import Fraction
from typing import Iterable, Mapping, Union

import numpy as np

from granger.core.errors import UndefinedMetricError, UsageError
from granger.models.results import GCEstimate
from granger.services.forecasters import Forecaster

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------


def extract_gc(models: Union[Forecaster, Mapping[int, Forecaster]]) -> GCEstimate:
    """
    Assemble the (p, p) score matrix from a joint model or per-target component models.

    Rows for targets without a model stay zero. Lag scores are kept only
    when every model provides them.
    """
    if isinstance(models, Forecaster):
        models = {models.config.target_index: models}
    first = next(iter(models.values()))
    p, K = first.num_series, first.max_lag
    series = np.zeros((p, p))
    lags = np.zeros((p, K))
    has_lags = True
    for model in models.values():
        rows = model.targets
        series[rows] = model.series_scores()
        lag_rows = model.lag_scores()
        if lag_rows is None:
            has_lags = False
        else:
            lags[rows] = lag_rows
    return GCEstimate(
        series_scores=series,
        lag_scores=lags if has_lags else None,
        model_kind=first.config.name,
    )


def min_max_scale(scores: np.ndarray) -> np.ndarray:
    """Scale each row to [0, 1] by its own min and max; constant rows become zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    matrix = np.atleast_2d(scores)
    lo = matrix.min(axis=1, keepdims=True)
    hi = matrix.max(axis=1, keepdims=True)
    span = hi - lo
    scaled = np.where(span > 0, (matrix - lo) / np.where(span > 0, span, 1.0), 0.0)
    return scaled.reshape(scores.shape)


def threshold_gc(estimate: GCEstimate, threshold: float) -> GCEstimate:
    """
    Min-max scale the series scores row-wise and mark entries >= threshold.

    Raises:
        UsageError: If threshold is outside [0, 1].
    """
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"threshold must lie in [0, 1], got {threshold}")
    scaled = min_max_scale(estimate.series_scores)
    return GCEstimate(
        series_scores=estimate.series_scores,
        model_kind=estimate.model_kind,
        lag_scores=estimate.lag_scores,
        scaled_scores=scaled,
        threshold=float(threshold),
        binary=(scaled >= threshold).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise UsageError(f"{s.size} scores for {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise UsageError("labels must be 0/1")
    return s, y


def auroc(scores, labels) -> float:
    """
    Probability that a random positive outscores a random negative (ties count 1/2).

    Raises:
        UndefinedMetricError: If only one class is present.
    """
    s, y = _check(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    greater = int(np.sum(pos[:, None] > neg[None, :]))
    ties = int(np.sum(pos[:, None] == neg[None, :]))
    return float(Fraction(2 * greater + ties, 2 * pos.size * neg.size))


def aupr(scores, labels) -> float:
    """
    Average precision, with tied scores processed as one block.

    Each positive contributes the precision at the end of its tie block.

    Raises:
        UndefinedMetricError: If there are no positives.
    """
    s, y = _check(scores, labels)
    positives = int(y.sum())
    if positives == 0:
        raise UndefinedMetricError("AUPR needs at least one positive label")
    total = Fraction(0)
    seen = hits = 0
    for value in np.unique(s)[::-1]:
        block = s == value
        block_hits = int(y[block].sum())
        seen += int(block.sum())
        hits += block_hits
        if block_hits:
            total += Fraction(block_hits * hits, seen)
    return float(total / positives)


def lag_recovery(lag_scores, true_lags: Iterable[int]) -> bool:
    """
    True iff the |true_lags| largest scores sit exactly at the true (1-based) lags.

    A tie across the cut-off counts as a miss.
    """
    row = np.asarray(lag_scores, dtype=np.float64).reshape(-1)
    truth = {int(k) for k in true_lags}
    m = len(truth)
    if m > row.size:
        raise UsageError(f"{m} true lags for a row of {row.size} lags")
    if m == 0:
        return False
    order = np.argsort(-row, kind="stable")
    if m < row.size and row[order[m - 1]] == row[order[m]]:
        return False
    return {int(k) + 1 for k in order[:m]} == truth


def lag_recovery_rate(lag_scores: np.ndarray, true_lags: Iterable[int], rows: Iterable[int] = None) -> float:
    """Fraction of (selected) rows of a (p, K) lag-score matrix that recover ``true_lags``."""
    matrix = np.atleast_2d(np.asarray(lag_scores, dtype=np.float64))
    truth = list(true_lags)
    indices = list(range(matrix.shape[0])) if rows is None else list(rows)
    if not indices:
        return 0.0
    hits = sum(lag_recovery(matrix[i], truth) for i in indices)
    return hits / len(indices)


def flatten_for_metrics(scores: np.ndarray, truth: np.ndarray, exclude_diagonal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise UsageError(f"score matrix {scores.shape} does not match truth {truth.shape}")
    mask = np.ones(scores.shape, dtype=bool)
    if exclude_diagonal:
        np.fill_diagonal(mask, False)
    return scores[mask], truth[mask].astype(np.int64)


def score_estimate(estimate: GCEstimate, truth: np.ndarray, exclude_diagonal: bool = False) -> dict:
    """
    AUROC and AUPR of the raw series scores against a 0/1 truth matrix.

    A metric that is undefined for this truth (e.g. no negatives) is None.
    """
    s, y = flatten_for_metrics(estimate.series_scores, truth, exclude_diagonal)
    metrics = {}
    for name, metric in (("auroc", auroc), ("aupr", aupr)):
        try:
            metrics[name] = metric(s, y)
        except UndefinedMetricError as exc:
            logger.warning("%s undefined: %s", name, exc)
            metrics[name] = None
    return metrics
