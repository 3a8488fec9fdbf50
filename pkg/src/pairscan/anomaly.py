"""Unsupervised anomaly detection on reciprocal trigger sizes.

The null spread is the median absolute deviation of the reciprocal sizes of
the pairs OUTSIDE the candidate set; the anomaly score is the gap between
the candidate median reciprocal and the null median, in units of
1.4826 * MAD (the Gaussian-consistent scaling). The detection threshold is
calibrated to the maximum of N standard normals:
theta(beta, N) = Phi^-1((1 - beta)^(1/N)).

A zero trigger size is maximal backdoor evidence: its reciprocal enters the
medians as +inf by ordering, and the degenerate branches below keep every
score well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .attack import ClassPair
from .errors import InputError

MAD_SCALE = 1.4826


@dataclass(frozen=True)
class AnomalyResult:
    score: float
    mad: float
    threshold: float
    beta: float
    n_null: int
    attacked: bool


def reciprocal_sizes(values: np.ndarray) -> np.ndarray:
    """Reciprocal sizes with 1/0 mapped to +inf (maximal backdoor evidence)."""
    out = np.empty_like(values)
    zero = values == 0.0
    out[zero] = np.inf
    out[~zero] = 1.0 / values[~zero]
    return out


def _split_reciprocals(sizes: Mapping[ClassPair, float], selected: Iterable[ClassPair]):
    chosen = set(selected)
    if not chosen:
        raise InputError("the candidate set is empty")
    for pair in chosen:
        if pair not in sizes:
            raise InputError(f"no size statistic for selected pair {pair.astuple()}")
    null_sizes = np.array([z for pair, z in sorted(sizes.items()) if pair not in chosen])
    sel_sizes = np.array([z for pair, z in sorted(sizes.items()) if pair in chosen])
    if null_sizes.size == 0:
        raise InputError("no pairs left outside the candidate set")
    if np.any(null_sizes < 0) or np.any(sel_sizes < 0):
        raise InputError("trigger sizes must be non-negative")
    return reciprocal_sizes(sel_sizes), reciprocal_sizes(null_sizes)


def mad_null(sizes: Mapping[ClassPair, float], selected: Iterable[ClassPair]) -> float:
    """Median absolute deviation of the reciprocal sizes outside the set."""
    _, null = _split_reciprocals(sizes, selected)
    center = np.median(null)
    deviations = np.abs(null - center)
    # inf - inf pairs sit at the median's own position: zero deviation
    deviations[np.isnan(deviations)] = 0.0
    return float(np.median(deviations))


def anomaly_score(sizes: Mapping[ClassPair, float], selected: Iterable[ClassPair]) -> float:
    """Scaled gap between the candidate median reciprocal and the null median."""
    sel, null = _split_reciprocals(sizes, selected)
    sigma = mad_null(sizes, selected)
    sel_med = float(np.median(sel))
    null_med = float(np.median(null))
    if sel_med == null_med:
        return 0.0
    numerator = sel_med - null_med
    if sigma == 0.0:
        return math.inf if numerator > 0 else 0.0
    if math.isinf(numerator):
        return math.inf if numerator > 0 else -math.inf
    if math.isinf(sigma):
        return 0.0
    return numerator / (MAD_SCALE * sigma)


def std_normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, absolute error below 1e-9.

    Acklam's rational approximation polished by one Halley step against the
    erfc-based CDF.
    """
    if not 0.0 < p < 1.0:
        raise InputError("quantile argument must lie strictly inside (0, 1)")
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low, p_high = 0.02425, 1.0 - 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # Halley refinement: e = Phi(x) - p, u = e / phi(x)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def threshold(beta: float, n_null: int) -> float:
    """Detection threshold adapted to the number of null statistics."""
    if not 0.0 < beta < 1.0:
        raise InputError("beta must lie strictly inside (0, 1)")
    if n_null < 1:
        raise InputError("the null count must be at least 1")
    return std_normal_quantile((1.0 - beta) ** (1.0 / n_null))


def assess(sizes: Mapping[ClassPair, float], selected: Iterable[ClassPair],
           beta: float) -> AnomalyResult:
    """Score a candidate set against the null and compare to the threshold."""
    selected = tuple(selected)
    score = anomaly_score(sizes, selected)
    sigma = mad_null(sizes, selected)
    n_null = len(sizes) - len(set(selected))
    theta = threshold(beta, n_null)
    return AnomalyResult(score=score, mad=sigma, threshold=theta, beta=beta,
                         n_null=n_null, attacked=bool(score > theta))
