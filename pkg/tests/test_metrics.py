import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtb import fiscal, metrics
from gtb.metrics import WelfareObjective

coins = st.lists(st.floats(0, 1e4), min_size=2, max_size=20)


@pytest.mark.parametrize("c, g, eq", [([1, 1, 1, 1], 0.0, 1.0), ([0, 10], 0.5, 0.0), ([3, 1], 0.25, 0.5)])
def test_gini_equality_fixtures(c, g, eq):
    assert metrics.gini(c) == pytest.approx(g, abs=1e-15)
    assert metrics.equality(c) == pytest.approx(eq, abs=1e-15)


def test_zero_vector_and_single_agent():
    assert metrics.gini_index([0, 0, 0]) == metrics.GiniResult(0.0, True)
    assert metrics.equality([0, 0]) == 1.0
    assert metrics.equality([5.0]) == 1.0
    with pytest.raises(ValueError):
        metrics.productivity([])


@given(coins, st.floats(1e-3, 1e3))
def test_gini_bounds_and_scale_invariance(c, k):
    c = np.asarray(c)
    g = metrics.gini(c)
    n = c.size
    assert -1e-12 <= g <= (n - 1) / n + 1e-12
    assert 0 - 1e-12 <= metrics.equality(c) <= 1 + 1e-12
    if c.sum() > 0:
        assert metrics.gini(k * c) == pytest.approx(g, abs=1e-9)


def test_productivity():
    assert metrics.productivity([0, 10]) == 10
    assert metrics.productivity([3, 1]) == 4


def test_isoelastic_utility_value():
    assert metrics.isoelastic_utility(1.0, 0.0) == 0.0
    assert metrics.isoelastic_utility(100.0, 2.0) == pytest.approx((100 ** 0.77 - 1) / 0.77 - 2.0, rel=1e-14)


def test_isoelastic_utility_monotone_and_concave():
    c = np.linspace(0.5, 500, 400)
    h = 1e-3
    u = lambda x: metrics.isoelastic_utility(x, 0.0)
    d1 = (u(c + h) - u(c - h)) / (2 * h)
    d2 = (u(c + h) - 2 * u(c) + u(c - h)) / h ** 2
    assert np.all(d1 > 0)
    assert np.all(d2 < 0)
    assert np.all(np.diff(metrics.isoelastic_utility(10.0, np.linspace(0, 5, 20))) < 0)


def test_social_welfare_examples():
    assert metrics.social_welfare("utilitarian", utilities=[4, 4, 4], incomes=[1, 50, 900]) == pytest.approx(4)
    assert metrics.social_welfare("eq-times-prod", endowments=[0, 10]) == 0.0
    assert metrics.social_welfare(WelfareObjective.UTILITARIAN, utilities=[1, 3], incomes=[1, 1]) == 2.0
    assert metrics.social_welfare("eq-times-prod", endowments=[0, 0]) == 0.0


@given(st.lists(st.floats(-10, 1e4), min_size=1, max_size=10), st.randoms())
def test_inverse_income_weights(incomes, rnd):
    w = metrics.inverse_income_weights(incomes)
    assert w.sum() == pytest.approx(1.0)
    perm = list(range(len(incomes)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(metrics.inverse_income_weights(np.asarray(incomes)[perm]), w[perm])


def test_marginal_rewards_telescope():
    assert list(metrics.marginal_rewards([0, 1, 1])) == [1, 0]
    u = np.random.default_rng(0).normal(size=50).cumsum()
    r = metrics.marginal_rewards(u)
    np.testing.assert_allclose(u[0] + np.concatenate([[0], np.cumsum(r)]), u, atol=1e-12)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=10))
def test_productivity_preserved_by_settlement(incomes):
    pre = np.asarray(incomes)
    post = pre + fiscal.settle_tax_year(pre, fiscal.us_federal_2018())
    assert metrics.productivity(post) == pytest.approx(metrics.productivity(pre), abs=1e-9)
