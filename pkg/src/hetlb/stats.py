"""Output analysis helpers: batch means and empirical CDF distances."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats as _sps

from .errors import EmptySeries, InsufficientBatches


def mean_se(batch_values) -> tuple[np.ndarray, np.ndarray]:
    """Grand mean and standard error from per-batch means (rows are batches)."""
    b = np.asarray(batch_values, dtype=float)
    if b.shape[0] < 2:
        raise InsufficientBatches(f"need at least 2 batches, got {b.shape[0]}")
    mean = b.mean(axis=0)
    se = b.std(axis=0, ddof=1) / math.sqrt(b.shape[0])
    return mean, se


def batch_means(values, durations=None, n_batches: int = 20) -> tuple[float, float]:
    """Time-weighted batch-means estimate of a piecewise-constant series.

    Parameters
    ----------
    values : array_like
        Value held on each segment.
    durations : array_like, optional
        Segment lengths; equal weights when omitted.
    n_batches : int
        Number of equal-duration batches (at least 2). Segments straddling a
        batch boundary are split.

    Returns
    -------
    mean, se : float
        Mean of the batch means and its standard error.
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise EmptySeries("batch_means needs a non-empty series")
    if n_batches < 2:
        raise InsufficientBatches(f"need at least 2 batches, got {n_batches}")
    w = np.ones_like(x) if durations is None else np.asarray(durations, dtype=float).ravel()
    if w.shape != x.shape or (w < 0).any():
        raise ValueError("durations must be non-negative and match values")
    t = np.concatenate([[0.0], np.cumsum(w)])
    integral = np.concatenate([[0.0], np.cumsum(x * w)])
    edges = np.linspace(0.0, t[-1], n_batches + 1)
    # the running integral is piecewise linear in time, so interpolation is exact
    at_edges = np.interp(edges, t, integral)
    width = np.diff(edges)
    if (width <= 0).any():
        raise EmptySeries("series has zero total duration")
    means = np.diff(at_edges) / width
    m, s = mean_se(means[:, None])
    return float(m[0]), float(s[0])


def ecdf_distance(a, b) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDFs of `a` and `b`."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySeries("ecdf_distance needs two non-empty samples")
    return float(_sps.ks_2samp(a, b).statistic)
