"""Utility, equality, productivity and social welfare."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_ETA = 0.23
WEIGHT_INCOME_FLOOR = 1.0


class WelfareObjective(str, enum.Enum):
    UTILITARIAN = "utilitarian"
    EQ_TIMES_PROD = "eq-times-prod"


def isoelastic_utility(coin, labor, eta: float = DEFAULT_ETA):
    """``(C^(1-eta) - 1) / (1 - eta) - L`` with C >= 0."""
    if eta <= 0 or eta == 1:
        raise ValueError("eta must be positive and different from 1")
    coin = np.asarray(coin, dtype=float)
    labor = np.asarray(labor, dtype=float)
    u = (np.power(np.maximum(coin, 0.0), 1.0 - eta) - 1.0) / (1.0 - eta) - labor
    return float(u) if u.ndim == 0 else u


@dataclass(frozen=True)
class GiniResult:
    value: float
    zero_total: bool


def gini_index(coin) -> GiniResult:
    """Gini coefficient with a flag for the all-zero case (value 0 there)."""
    c = np.asarray(coin, dtype=float)
    if c.size < 1:
        raise ValueError("need at least one agent")
    total = c.sum()
    if total <= 0:
        return GiniResult(0.0, True)
    diffs = np.abs(c[:, None] - c[None, :]).sum()
    return GiniResult(float(diffs / (2.0 * c.size * total)), False)


def gini(coin) -> float:
    return gini_index(coin).value


def equality(coin) -> float:
    """``1 - N/(N-1) * gini``; a single agent or the zero vector is perfectly equal."""
    c = np.asarray(coin, dtype=float)
    n = c.size
    if n < 1:
        raise ValueError("need at least one agent")
    if n == 1:
        return 1.0
    return 1.0 - n / (n - 1.0) * gini(c)


def productivity(coin) -> float:
    c = np.asarray(coin, dtype=float)
    if c.size < 1:
        raise ValueError("need at least one agent")
    return float(c.sum())


def inverse_income_weights(incomes, floor: float = WEIGHT_INCOME_FLOOR) -> np.ndarray:
    inv = 1.0 / np.maximum(np.asarray(incomes, dtype=float), floor)
    return inv / inv.sum()


def social_welfare(objective, utilities=None, incomes=None, endowments=None) -> float:
    """Planner objective at one point in time.

    Utilitarian welfare weights ``utilities`` by normalised inverse ``incomes``
    (floored at one coin). Equality-times-productivity uses ``endowments``.
    """
    objective = WelfareObjective(objective)
    if objective is WelfareObjective.UTILITARIAN:
        u = np.asarray(utilities, dtype=float)
        weights = inverse_income_weights(incomes)
        return float(weights @ u)
    return equality(endowments) * productivity(endowments)


def marginal_rewards(values) -> np.ndarray:
    """Per-step differences ``v_t - v_{t-1}`` of a utility or welfare trace."""
    return np.diff(np.asarray(values, dtype=float))
