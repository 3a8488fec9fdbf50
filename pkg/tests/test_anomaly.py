import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairscan import anomaly
from pairscan.attack import ClassPair, all_class_pairs
from pairscan.errors import InputError

# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def series_normal_cdf(x: float) -> float:
    """Taylor-series normal CDF, independent of math.erfc."""
    term = x
    total = 0.0
    k = 0
    while True:
        total += term
        k += 1
        term *= x * x / (2 * k + 1)
        if abs(term) < 1e-17 * max(abs(total), 1.0):
            break
    return 0.5 + math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi) * total


def bisect_quantile(p: float) -> float:
    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if series_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def manual_median(values):
    ordered = sorted(values)
    n = len(ordered)
    if n % 2 == 1:
        return ordered[n // 2]
    return (ordered[n // 2 - 1] + ordered[n // 2]) / 2


def brute_force_mad(null_sizes):
    recips = [math.inf if z == 0 else 1.0 / z for z in null_sizes]
    med = manual_median(recips)
    deviations = []
    for w in recips:
        dev = abs(w - med)
        deviations.append(0.0 if math.isnan(dev) else dev)
    return manual_median(deviations)


def z_map(selected_sizes, null_sizes):
    """Lay sizes out over class pairs: selected first (distinct sources)."""
    pairs = all_class_pairs(6)
    sel_pairs = [p for p in pairs if p.target == (p.source + 1) % 6][:len(selected_sizes)]
    rest = [p for p in pairs if p not in sel_pairs]
    sizes = {p: z for p, z in zip(sel_pairs, selected_sizes)}
    sizes.update({p: z for p, z in zip(rest, null_sizes)})
    return sizes, sel_pairs


# frozen from bisect_quantile (series-expansion CDF oracle)
PHI_INV_0975 = 1.9599639845400505
PHI_INV_095 = 1.6448536269514706


def test_quantile_at_half_is_zero():
    assert anomaly.std_normal_quantile(0.5) == 0.0


def test_quantile_antisymmetry():
    for p in (0.01, 0.1, 0.3, 0.45, 0.62, 0.9, 0.999):
        assert abs(anomaly.std_normal_quantile(p) + anomaly.std_normal_quantile(1 - p)) < 1e-12


def test_quantile_against_series_oracle():
    assert abs(anomaly.std_normal_quantile(0.975) - PHI_INV_0975) < 1e-9
    for p in (0.001, 0.02, 0.2, 0.7, 0.95, 0.9999):
        assert abs(anomaly.std_normal_quantile(p) - bisect_quantile(p)) < 1e-9


def test_quantile_rejects_out_of_range():
    for p in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(InputError):
            anomaly.std_normal_quantile(p)


def test_threshold_matches_single_null_anchor():
    assert abs(anomaly.threshold(0.025, 1) - 1.960) < 1e-3
    assert abs(anomaly.threshold(0.05, 1) - PHI_INV_095) < 1e-9


def test_threshold_monotone_in_null_count():
    assert anomaly.threshold(0.05, 90) > anomaly.threshold(0.05, 1)
    values = [anomaly.threshold(0.05, n) for n in (1, 2, 5, 20, 90, 400)]
    assert values == sorted(values)


def test_threshold_rejects_bad_arguments():
    with pytest.raises(InputError):
        anomaly.threshold(0.0, 5)
    with pytest.raises(InputError):
        anomaly.threshold(1.0, 5)
    with pytest.raises(InputError):
        anomaly.threshold(0.05, 0)


def test_mad_hand_example():
    # null reciprocals {1, 2, 3}: median 2, deviations {1, 0, 1}, sigma = 1
    sizes, selected = z_map([0.1, 0.1], [1.0, 0.5, 1.0 / 3.0])
    assert anomaly.mad_null(sizes, selected) == 1.0


def test_mad_all_equal_nulls_is_zero():
    sizes, selected = z_map([0.1, 0.1], [2.0, 2.0, 2.0, 2.0])
    assert anomaly.mad_null(sizes, selected) == 0.0


def test_mad_single_null_is_zero():
    sizes, selected = z_map([0.1, 0.1], [3.7])
    assert anomaly.mad_null(sizes, selected) == 0.0


def test_score_hand_example():
    # selected median reciprocal 10, null reciprocals {1,2,3}, sigma 1
    sizes, selected = z_map([0.1], [1.0, 0.5, 1.0 / 3.0])
    expected = (10.0 - 2.0) / (1.4826 * 1.0)
    assert anomaly.anomaly_score(sizes, selected) == expected
    assert abs(expected - 5.396) < 1e-3


def test_score_zero_when_selected_matches_null_median():
    sizes, selected = z_map([0.5, 0.5], [0.5, 0.25, 1.0])
    assert anomaly.anomaly_score(sizes, selected) == 0.0


def test_score_scale_invariance():
    rng = np.random.default_rng(0)
    sizes, selected = z_map(rng.uniform(0.01, 0.2, 3).tolist(),
                            rng.uniform(0.5, 3.0, 10).tolist())
    base = anomaly.anomaly_score(sizes, selected)
    for c in rng.uniform(0.1, 10.0, 10):
        scaled = {p: c * z for p, z in sizes.items()}
        assert abs(anomaly.anomaly_score(scaled, selected) - base) <= 1e-9 * abs(base)


def test_zero_size_selected_scores_infinite():
    sizes, selected = z_map([0.0, 0.1], [1.0, 0.5, 2.0, 0.8])
    assert anomaly.anomaly_score(sizes, selected) == math.inf


def test_degenerate_sigma_branches():
    # identical nulls, selected clearly smaller -> +inf (detected)
    sizes, selected = z_map([0.1, 0.1], [1.0, 1.0, 1.0])
    assert anomaly.anomaly_score(sizes, selected) == math.inf
    # identical nulls, selected larger (smaller reciprocal) -> 0 (not detected)
    sizes, selected = z_map([5.0, 5.0], [1.0, 1.0, 1.0])
    assert anomaly.anomaly_score(sizes, selected) == 0.0


def test_assess_consistency():
    sizes, selected = z_map([0.05, 0.06], [1.0, 1.2, 0.8, 1.1, 0.9])
    result = anomaly.assess(sizes, selected, beta=0.05)
    assert result.attacked == (result.score > result.threshold)
    assert result.n_null == len(sizes) - 2
    assert result.threshold == anomaly.threshold(0.05, result.n_null)


def test_assess_requires_nonempty_null():
    sizes = {ClassPair(0, 1): 0.5, ClassPair(1, 0): 0.7}
    with pytest.raises(InputError):
        anomaly.assess(sizes, tuple(sizes), beta=0.05)
    with pytest.raises(InputError):
        anomaly.assess(sizes, (), beta=0.05)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.001, 1000.0), min_size=1, max_size=25),
       st.lists(st.floats(0.001, 1000.0), min_size=1, max_size=5))
def test_mad_matches_brute_force_exactly(null_sizes, selected_sizes):
    sizes, selected = z_map(selected_sizes, null_sizes)
    assert anomaly.mad_null(sizes, selected) == brute_force_mad(null_sizes)
