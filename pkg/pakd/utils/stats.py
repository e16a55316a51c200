"""
Small statistics helpers shared by the analyses and the bench table.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


def median_spread(values: Sequence[float]) -> tuple[float, float]:
    """
    Median and spread (max minus min) of a sample.

    Raises:
        ValueError: If ``values`` is empty
    """
    if not values:
        raise ValueError("median_spread needs at least one value")
    array = np.asarray(values, dtype=float)
    return float(np.median(array)), float(array.max() - array.min())


def mean_or_none(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation; NaN when either side is constant."""
    if len(xs) != len(ys):
        raise ValueError("spearman_rho needs equally long sequences")
    if len(xs) < 2 or len(set(xs)) < 2 or len(set(ys)) < 2:
        return math.nan
    result = stats.spearmanr(xs, ys)
    return float(result[0])


def moving_average(values: Sequence[float], window: int) -> list[float]:
    """
    Trailing moving average; the first points average what is available.

    Args:
        values: Series to smooth
        window: Points per average, at least 1
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    cumulative = np.concatenate(([0.0], np.cumsum(np.asarray(values, dtype=float))))
    smoothed = []
    for i in range(1, len(values) + 1):
        lo = max(0, i - window)
        smoothed.append(float((cumulative[i] - cumulative[lo]) / (i - lo)))
    return smoothed
