import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtb import analysis, fiscal, stats

# Welch statistics for these two groups, frozen from statsmodels' ttest_ind(usevar="unequal").
GROUP_A = [19.1, 21.4, 18.7, 22.0, 20.3]
GROUP_B = [23.5, 24.1, 22.2, 25.8, 23.0]
WELCH_T = -3.8913919262610968
WELCH_P = 0.004621310586770116
WELCH_DF = 7.981087313586778


def test_welch_fixture():
    r = stats.welch_ttest(GROUP_A, GROUP_B)
    assert r.t == pytest.approx(WELCH_T, abs=1e-6)
    assert r.p == pytest.approx(WELCH_P, abs=1e-6)
    assert r.df == pytest.approx(WELCH_DF, abs=1e-6)
    assert not r.floored


def test_identical_groups():
    r = stats.welch_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0
    assert r.p == pytest.approx(1.0)


def test_constant_groups_equal():
    r = stats.welch_ttest([2, 2, 2], [2, 2, 2])
    assert (r.t, r.p) == (0.0, 1.0)


def test_degenerate_variance_floor():
    r = stats.welch_ttest([0, 0, 0], [1, 1, 1])
    assert r.t == -np.inf
    assert r.p == stats.P_FLOOR and r.floored


def test_tiny_p_is_floored():
    r = stats.welch_ttest([0, 1, 2, 1], [1000, 1001, 1002, 1001])
    assert r.p == stats.P_FLOOR and r.floored


def test_insufficient_samples():
    with pytest.raises(stats.InsufficientSamples):
        stats.welch_ttest([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=2, max_size=8),
       st.lists(st.integers(-100, 100), min_size=2, max_size=8))
def test_welch_antisymmetric(a, b):
    r1, r2 = stats.welch_ttest(a, b), stats.welch_ttest(b, a)
    assert 0 < r1.p <= 1
    assert r1.p == pytest.approx(r2.p)
    if np.isfinite(r1.t):
        assert r1.t == pytest.approx(-r2.t, abs=1e-9)


def test_compare_rows():
    rows = stats.ttest_compare({"free": {"prod": GROUP_B, "eq": [1, 2, 3]},
                                "saez": {"prod": GROUP_A}})
    assert len(rows) == 1
    assert rows[0]["metric"] == "prod"
    assert rows[0]["t"] == pytest.approx(-WELCH_T, abs=1e-6)


# --- tax gaming -------------------------------------------------------------


def test_gaming_bunched_income():
    us = fiscal.us_federal_2018()
    # T(100) = 18.24 and T(50) = 6.92, so bunching costs 18.24 - 2 * 6.92.
    assert analysis.tax_minus_smoothed([0, 100], [us, us]) == pytest.approx(4.40, abs=1e-9)


@given(st.floats(0, 1000), st.integers(1, 10))
def test_gaming_constant_income_is_zero(z, years):
    us = fiscal.us_federal_2018()
    assert analysis.tax_minus_smoothed([z] * years, [us] * years) == pytest.approx(0.0, abs=1e-9)


def test_gaming_flat_tax_is_zero():
    flat = fiscal.flat_tax(0.3)
    assert analysis.tax_minus_smoothed([5, 300, 0, 40], [flat] * 4) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 800), min_size=2, max_size=10))
def test_gaming_convex_schedule_penalizes_variation(z):
    # Marginal rates are nondecreasing, so tax is convex: smoothing never raises tax.
    us = fiscal.us_federal_2018()
    assert analysis.tax_minus_smoothed(z, [us] * len(z)) >= -1e-9


def test_gaming_schedule_count_checked():
    with pytest.raises(ValueError):
        analysis.tax_minus_smoothed([1, 2], [fiscal.free_market()])


def _table(incomes, transfers):
    inc = np.asarray(incomes, dtype=float)
    sched = [[fiscal.us_federal_2018()] * inc.shape[1] for _ in range(inc.shape[0])]
    return analysis.YearTable("us-federal", inc, np.zeros_like(inc), np.asarray(transfers, dtype=float),
                              sched, np.arange(inc.shape[2], dtype=float))


def test_bracket_histogram_counts():
    t = _table([[[0, 5, 10, 600]]], np.zeros((1, 1, 4)))
    hist = analysis.bracket_histogram(t)
    counts = [h["count"] for h in hist]
    assert counts == [2, 1, 0, 0, 0, 0, 1]
    assert sum(h["frequency"] for h in hist) == pytest.approx(1.0)


def test_transfer_balance_and_summary():
    tr = [[[-3.0, 1.0, 2.0], [0.5, -0.5, 0.0]]]
    t = _table([[[10, 20, 30], [40, 50, 60]]], tr)
    assert analysis.transfers_balance(t) == 0.0
    rows = analysis.per_agent_summary(t)
    assert [r["mean_income"] for r in rows] == [25.0, 35.0, 45.0]
    assert len(analysis.gaming_rows(t)) == 3


def test_empty_log_dir(tmp_path):
    with pytest.raises(analysis.EmptyLogDir):
        analysis.load_year_tables(tmp_path)
