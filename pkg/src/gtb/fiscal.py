"""Bracketed income tax, lump-sum redistribution and the baseline planners.

All schedules share the fixed bracket cutoffs below; only the marginal rates
vary between planners.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BRACKET_CUTOFFS: tuple[float, ...] = (0.0, 9.0, 39.0, 84.0, 160.0, 204.0, 510.0)
N_BRACKETS = len(BRACKET_CUTOFFS)
US_FEDERAL_2018_RATES = (0.10, 0.12, 0.22, 0.24, 0.32, 0.35, 0.37)
RATE_GRID = np.round(np.arange(21) * 0.05, 2)

# Settlement arithmetic runs on an integer lattice of 2**-24 coin so that the
# transfers of one tax year sum to exactly zero in any summation order.
SETTLEMENT_QUANTUM = 2.0**-24


class EmptyBuffer(ValueError):
    pass


class SingularFit(ValueError):
    pass


@dataclass(frozen=True)
class TaxSchedule:
    """Marginal rates over the fixed income brackets.

    ``cutoffs[j]`` is the lower edge of bracket ``j``; the last bracket is
    unbounded above.
    """

    rates: tuple[float, ...]
    cutoffs: tuple[float, ...] = BRACKET_CUTOFFS

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        cutoffs = tuple(float(b) for b in self.cutoffs)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "cutoffs", cutoffs)
        if len(rates) != len(cutoffs):
            raise ValueError(f"expected {len(cutoffs)} rates, got {len(rates)}")
        if any(b1 <= b0 for b0, b1 in zip(cutoffs, cutoffs[1:])):
            raise ValueError("bracket cutoffs must be strictly increasing")
        if any(not (0.0 <= r <= 1.0) for r in rates):
            raise ValueError(f"rates must lie in [0, 1]: {rates}")

    @property
    def upper_edges(self) -> tuple[float, ...]:
        return self.cutoffs[1:] + (math.inf,)

    def bracket_index(self, z):
        """Index j of the bracket with b_j < z <= b_{j+1}; z <= 0 maps to 0."""
        idx = np.searchsorted(np.asarray(self.cutoffs), np.asarray(z, dtype=float), side="left") - 1
        return np.clip(idx, 0, len(self.rates) - 1)

    def marginal_rate(self, z):
        rates = np.asarray(self.rates)
        out = rates[self.bracket_index(z)]
        return float(out) if np.ndim(out) == 0 else out

    def tax(self, z):
        return compute_tax(z, self)

    def to_text(self) -> str:
        header = "# cutoffs=" + ",".join(repr(b) for b in self.cutoffs) + ",inf"
        return header + "\n" + ",".join(repr(r) for r in self.rates) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaxSchedule":
        cutoffs = BRACKET_CUTOFFS
        rates = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "cutoffs":
                    parts = [p for p in value.split(",") if p.strip() != "inf"]
                    cutoffs = tuple(float(p) for p in parts)
                continue
            rates = tuple(float(p) for p in line.split(","))
        if rates is None:
            raise ValueError("no rate line found")
        return cls(rates, cutoffs)


def compute_tax(z, schedule: TaxSchedule):
    """Tax owed on pre-tax income ``z`` (scalar or array).

    Piecewise-linear and continuous; non-positive income owes nothing.
    """
    z_arr = np.asarray(z, dtype=float)
    lower = np.asarray(schedule.cutoffs)
    width = np.asarray(schedule.upper_edges) - lower
    portion = np.clip(z_arr[..., None] - lower, 0.0, width)
    owed = portion @ np.asarray(schedule.rates)
    return float(owed) if owed.ndim == 0 else owed


def settle_tax_year(incomes, schedule: TaxSchedule) -> np.ndarray:
    """Per-agent coin change after collecting taxes and redistributing them evenly.

    Taxes are rounded onto the settlement lattice before redistribution, so the
    returned deltas sum to exactly zero. Negative incomes pay nothing but still
    receive their share.
    """
    incomes = np.asarray(incomes, dtype=float)
    n = incomes.size
    if n < 1:
        raise ValueError("need at least one agent")
    owed = compute_tax(np.maximum(incomes, 0.0), schedule)
    return redistribute(np.atleast_1d(owed))


def redistribute(taxes) -> np.ndarray:
    """Lump-sum transfer ``-T_i + mean(T)`` computed exactly on the lattice."""
    units = [int(round(t / SETTLEMENT_QUANTUM)) for t in np.asarray(taxes, dtype=float)]
    n = len(units)
    share, remainder = divmod(sum(units), n)
    deltas = [share - u + (1 if i < remainder else 0) for i, u in enumerate(units)]
    return np.array(deltas, dtype=float) * SETTLEMENT_QUANTUM


def us_federal_2018() -> TaxSchedule:
    return TaxSchedule(US_FEDERAL_2018_RATES)


def free_market() -> TaxSchedule:
    return TaxSchedule((0.0,) * N_BRACKETS)


def flat_tax(rate: float) -> TaxSchedule:
    return TaxSchedule((rate,) * N_BRACKETS)


def snap_to_grid(rates: Iterable[float], step: float = 0.05) -> TaxSchedule:
    return TaxSchedule(tuple(float(np.clip(round(r / step) * step, 0.0, 1.0)) for r in rates))


# --------------------------------------------------------------------------
# Saez planner
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SaezParams:
    elasticity: float = 3.0
    bin_width: float = 1.0
    income_floor: float = 1.0

    def __post_init__(self):
        if self.elasticity < 0:
            raise ValueError("elasticity must be non-negative")
        if self.bin_width <= 0:
            raise ValueError("bin width must be positive")


@dataclass(frozen=True)
class IncomeRecord:
    agent: int
    year: int
    income: float
    rate: float


@dataclass
class IncomeBuffer:
    """Rolling window of per-agent yearly incomes over recent episodes.

    Negative incomes are dropped on insertion.
    """

    lookback_episodes: int = 10
    _episodes: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        self._episodes = deque(maxlen=self.lookback_episodes)

    def add_episode(self, records: Sequence[IncomeRecord]):
        self._episodes.append(tuple(r for r in records if r.income >= 0))

    def extend_current(self, records: Sequence[IncomeRecord]):
        """Append records to the newest episode (opening one if needed)."""
        kept = tuple(r for r in records if r.income >= 0)
        if not self._episodes:
            self._episodes.append(kept)
        else:
            self._episodes[-1] = self._episodes[-1] + kept

    def incomes(self) -> np.ndarray:
        return np.array([r.income for ep in self._episodes for r in ep], dtype=float)

    @property
    def episodes(self) -> tuple:
        return tuple(self._episodes)

    def __len__(self):
        return sum(len(ep) for ep in self._episodes)


def saez_formula(G, a, e):
    """Marginal rate (1 - G) / (1 - G + a e); the 0/0 case (G = 1, a e = 0) is 0."""
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    num = 1.0 - G
    with np.errstate(invalid="ignore"):
        ae = np.where(e == 0, 0.0, a * e)
    den = num + ae
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    out = np.clip(np.nan_to_num(tau, nan=0.0), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SaezBins:
    lower: np.ndarray
    G: np.ndarray
    a: np.ndarray
    tau: np.ndarray
    top_G: float
    top_a: float
    top_tau: float


def saez_bins(incomes, params: SaezParams, cutoffs: Sequence[float] = BRACKET_CUTOFFS) -> SaezBins:
    """Binned welfare weight G(z), local Pareto parameter a(z) and rate tau(z).

    Bins are ``bin_width`` wide starting at zero and cover every bracket below
    the top cutoff. ``1 - F(z)`` counts incomes at or above the bin's lower edge.
    """
    z = np.asarray(incomes, dtype=float)
    z = z[z >= 0]
    if z.size == 0:
        raise EmptyBuffer("no non-negative incomes to estimate from")
    e = params.elasticity
    m_total = z.size
    weights = 1.0 / np.maximum(z, params.income_floor)

    top_cut = float(cutoffs[-1])
    n_bins = int(math.ceil(top_cut / params.bin_width))
    lower = np.arange(n_bins) * params.bin_width

    order = np.argsort(z, kind="stable")
    z_sorted = z[order]
    w_sorted = weights[order]
    # reverse cumulative weight share: w_above[k] = share of weight with z >= z_sorted[k]
    rev = np.cumsum(w_sorted[::-1])[::-1]
    w_above = np.concatenate([rev / rev[0], [0.0]])

    first_at_or_above = np.searchsorted(z_sorted, lower, side="left")
    first_above_bin = np.searchsorted(z_sorted, lower + params.bin_width, side="left")
    count_above = m_total - first_at_or_above
    count_in_bin = first_above_bin - first_at_or_above

    G = np.zeros(n_bins)
    a = np.zeros(n_bins)
    tau = np.zeros(n_bins)
    prev_tau = 0.0
    for k in range(n_bins):
        if count_above[k] == 0:
            G[k] = np.nan
            a[k] = np.nan
            tau[k] = prev_tau
            continue
        survival = count_above[k] / m_total
        density = count_in_bin[k] / (m_total * params.bin_width)
        G[k] = w_above[first_at_or_above[k]] / survival
        a[k] = lower[k] * density / survival
        tau[k] = saez_formula(G[k], a[k], e)
        prev_tau = tau[k]

    top = z_sorted[z_sorted >= top_cut]
    if top.size:
        top_G = float(w_above[np.searchsorted(z_sorted, top_cut, side="left")])
        mean_top = float(top.mean())
        top_a = math.inf if mean_top == top_cut else mean_top / (mean_top - top_cut)
        top_tau = saez_formula(top_G, top_a, e)
    else:
        top_G, top_a, top_tau = float("nan"), float("nan"), float(prev_tau)
    return SaezBins(lower, G, a, tau, top_G, top_a, float(top_tau))


def saez_rates(buffer, params: SaezParams, cutoffs: Sequence[float] = BRACKET_CUTOFFS) -> TaxSchedule:
    """Bracket rates from the binned Saez formula.

    ``buffer`` is an :class:`IncomeBuffer` or a plain array of incomes. Each
    bracket below the top averages the binned rates over its interval; the top
    bracket uses the Pareto tail rule ``a = m / (m - z_top)``.
    """
    incomes = buffer.incomes() if isinstance(buffer, IncomeBuffer) else np.asarray(buffer, dtype=float)
    incomes = incomes[incomes >= 0]
    if incomes.size == 0:
        raise EmptyBuffer("income buffer is empty")
    if np.all(incomes == incomes[0]):
        return _degenerate_rates(float(incomes[0]), params, cutoffs)
    bins = saez_bins(incomes, params, cutoffs)
    rates = []
    for j in range(len(cutoffs) - 1):
        in_bracket = (bins.lower >= cutoffs[j]) & (bins.lower < cutoffs[j + 1])
        rates.append(float(bins.tau[in_bracket].mean()))
    rates.append(bins.top_tau)
    return TaxSchedule(tuple(rates), tuple(cutoffs))


def _degenerate_rates(value: float, params: SaezParams, cutoffs: Sequence[float]) -> TaxSchedule:
    # A single income value: every bracket is zero except the one holding it,
    # which gets the tail rule with all welfare weight inside it.
    rates = [0.0] * len(cutoffs)
    j = int(np.clip(np.searchsorted(cutoffs, value, side="left") - 1, 0, len(cutoffs) - 1))
    lower = float(cutoffs[j])
    a = math.inf if value == lower else value / (value - lower)
    rates[j] = saez_formula(1.0, a, params.elasticity)
    return TaxSchedule(tuple(rates), tuple(cutoffs))


# --------------------------------------------------------------------------
# Elasticity estimation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ElasticityFit:
    elasticity: float
    intercept: float

    @property
    def baseline_income(self) -> float:
        return math.exp(self.intercept)


def estimate_elasticity_ols(samples: Iterable[tuple[float, float]]) -> ElasticityFit:
    """Least-squares fit of ``log Z = e log(1 - tau) + log Z0``."""
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise SingularFit("need at least two (income, rate) samples")
    Z, tau = data[:, 0], data[:, 1]
    if np.any(Z <= 0):
        raise ValueError("total incomes must be positive")
    if np.any(tau >= 1):
        raise ValueError("flat rates must be below 1")
    if np.unique(tau).size < 2:
        raise SingularFit("need at least two distinct flat rates")
    x = np.log1p(-tau)
    y = np.log(Z)
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    return ElasticityFit(float(slope), float(intercept))


@dataclass(frozen=True)
class GridSearchResult:
    best: float
    scores: dict[float, tuple[float, float]]

    def to_csv(self) -> str:
        lines = ["e,welfare_mean,welfare_stderr"]
        for e, (mean, stderr) in sorted(self.scores.items()):
            lines.append(f"{e!r},{mean!r},{stderr!r}")
        return "\n".join(lines) + "\n"


def grid_search_elasticity(
    evaluate: Callable[[float], Sequence[float] | float], e_grid: Iterable[float]
) -> GridSearchResult:
    """Pick the elasticity whose Saez schedule maximises welfare.

    ``evaluate(e)`` runs whatever experiment the caller has in mind (trained
    agents, best-response agents) and returns one welfare value or a sample of
    them. Ties go to the smallest ``e``.
    """
    grid = sorted(set(float(e) for e in e_grid))
    if not grid:
        raise ValueError("elasticity grid is empty")
    scores = {}
    for e in grid:
        vals = np.atleast_1d(np.asarray(evaluate(e), dtype=float))
        stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        scores[e] = (float(vals.mean()), stderr)
    best = max(grid, key=lambda e: (scores[e][0], -e))
    return GridSearchResult(best, scores)
