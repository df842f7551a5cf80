"""Gather-Trade-Build grid world: movement, gathering, building and labor.

Trading goes through the order book held by the state (see ``gtb.market``);
everything else about the world lives here, including the tax-year clock and
the observations handed to agents and the planner.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from gtb import fiscal
from gtb.market import MAX_OPEN_ORDERS, N_PRICE_LEVELS, N_RESOURCES, OrderBook, Side, Trade
from gtb.scenarios import STONE_SOURCE, WATER, WOOD_SOURCE, Scenario

STONE, WOOD = 0, 1

# Agent action layout: 0 no-op, 1-4 moves, 5-48 trades, 49 build.
NOOP = 0
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right
MOVE_OFFSET = 1
TRADE_OFFSET = MOVE_OFFSET + len(MOVES)
N_TRADE_ACTIONS = N_RESOURCES * 2 * N_PRICE_LEVELS
BUILD = TRADE_OFFSET + N_TRADE_ACTIONS
N_AGENT_ACTIONS = BUILD + 1

VIEW_RADIUS = 5
VIEW_SIZE = 2 * VIEW_RADIUS + 1
SPATIAL_CHANNELS = ("water", "stone_source", "wood_source", "stone", "wood",
                    "own_house", "other_house", "other_agent")

RESPAWN_PROB = 0.01
EPISODE_LENGTH = 1000
TAX_PERIOD = 100


@dataclass(frozen=True)
class LaborTable:
    move: float = 0.21
    gather: float = 0.21
    trade: float = 0.05
    build: float = 2.1


LABOR = LaborTable()


class InvalidAction(RuntimeError):
    """A masked action reached the world; the caller broke the mask contract."""


def trade_action(resource: int, side: int, price: int) -> int:
    return TRADE_OFFSET + (resource * 2 + side) * N_PRICE_LEVELS + price


def decode_trade(action: int) -> tuple[int, int, int]:
    k = action - TRADE_OFFSET
    combo, price = divmod(k, N_PRICE_LEVELS)
    resource, side = divmod(combo, 2)
    return resource, side, price


def describe_action(action: int) -> str:
    if action == NOOP:
        return "noop"
    if action == BUILD:
        return "build"
    if action < TRADE_OFFSET:
        return ("up", "down", "left", "right")[action - MOVE_OFFSET]
    resource, side, price = decode_trade(action)
    return f"{'bid' if side == Side.BID else 'ask'}-{('stone', 'wood')[resource]}-{price}"


@dataclass
class WorldState:
    height: int
    width: int
    water: np.ndarray
    source: np.ndarray  # -1 none, 0 stone, 1 wood
    resource: np.ndarray  # units lying on each cell, [H, W, 2]
    house: np.ndarray  # owner index or -1
    agent_at: np.ndarray  # agent index or -1
    pos: np.ndarray
    stock: np.ndarray  # available stone/wood, [N, 2]
    coin: np.ndarray  # available coin, [N]
    build_skill: np.ndarray
    gather_skill: np.ndarray
    labor: np.ndarray
    book: OrderBook
    houses_built: np.ndarray
    schedule: fiscal.TaxSchedule = field(default_factory=fiscal.free_market)
    year_start_coin: np.ndarray = None
    prev_incomes: np.ndarray = None
    prev_rates: np.ndarray = None
    t: int = 0
    episode_length: int = EPISODE_LENGTH
    tax_period: int = TAX_PERIOD
    labor_table: LaborTable = LABOR
    _static_padded: np.ndarray = field(default=None, repr=False)

    @property
    def n_agents(self) -> int:
        return self.pos.shape[0]

    def total_coin(self) -> np.ndarray:
        return self.coin + self.book.escrow_coin

    def total_stock(self) -> np.ndarray:
        return self.stock + self.book.escrow_units

    def income_this_year(self) -> np.ndarray:
        return self.total_coin() - self.year_start_coin

    @property
    def year(self) -> int:
        return self.t // self.tax_period

    @property
    def step_in_year(self) -> int:
        return self.t % self.tax_period

    @property
    def done(self) -> bool:
        return self.t >= self.episode_length


def new_world(scenario: Scenario, episode_length: int = EPISODE_LENGTH,
              tax_period: int = TAX_PERIOD, labor_table: LaborTable = LABOR) -> WorldState:
    cells = scenario.cells()
    h, w = cells.shape
    n = scenario.n_agents
    source = np.full((h, w), -1, dtype=np.int8)
    source[cells == STONE_SOURCE] = STONE
    source[cells == WOOD_SOURCE] = WOOD
    resource = np.zeros((h, w, N_RESOURCES), dtype=np.int8)
    resource[..., STONE] = source == STONE
    resource[..., WOOD] = source == WOOD
    pos = scenario.start_positions()
    agent_at = np.full((h, w), -1, dtype=np.int16)
    agent_at[pos[:, 0], pos[:, 1]] = np.arange(n)
    state = WorldState(
        height=h, width=w,
        water=cells == WATER,
        source=source,
        resource=resource,
        house=np.full((h, w), -1, dtype=np.int16),
        agent_at=agent_at,
        pos=pos,
        stock=np.zeros((n, N_RESOURCES), dtype=np.int64),
        coin=np.zeros(n, dtype=np.float64),
        build_skill=np.asarray(scenario.build_skill, dtype=np.float64),
        gather_skill=np.asarray(scenario.gather_skill, dtype=np.float64),
        labor=np.zeros(n, dtype=np.float64),
        book=OrderBook(n),
        houses_built=np.zeros(n, dtype=np.int64),
        year_start_coin=np.zeros(n, dtype=np.float64),
        prev_incomes=np.zeros(n, dtype=np.float64),
        prev_rates=np.zeros(n, dtype=np.float64),
        episode_length=episode_length,
        tax_period=tax_period,
        labor_table=labor_table,
    )
    static = np.stack([state.water, source == STONE, source == WOOD]).astype(np.float32)
    state._static_padded = np.pad(static, ((0, 0), (VIEW_RADIUS,) * 2, (VIEW_RADIUS,) * 2))
    return state


# --------------------------------------------------------------------------
# Masks
# --------------------------------------------------------------------------

_PRICES = np.arange(N_PRICE_LEVELS)


def agent_action_mask(state: WorldState, i: int) -> np.ndarray:
    """Boolean mask over the 50 agent actions for agent ``i``."""
    mask = np.zeros(N_AGENT_ACTIONS, dtype=bool)
    mask[NOOP] = True
    r, c = state.pos[i]
    for k, (dr, dc) in enumerate(MOVES):
        mask[MOVE_OFFSET + k] = _can_enter(state, i, r + dr, c + dc)
    book = state.book
    for res in range(N_RESOURCES):
        if book.open_count[i, res] >= book.max_open:
            continue
        base = TRADE_OFFSET + res * 2 * N_PRICE_LEVELS
        mask[base:base + N_PRICE_LEVELS] = state.coin[i] >= _PRICES
        if state.stock[i, res] >= 1:
            mask[base + N_PRICE_LEVELS:base + 2 * N_PRICE_LEVELS] = True
    mask[BUILD] = (state.stock[i, STONE] >= 1 and state.stock[i, WOOD] >= 1
                   and state.source[r, c] < 0 and state.house[r, c] < 0)
    return mask


def action_masks(state: WorldState) -> np.ndarray:
    return np.stack([agent_action_mask(state, i) for i in range(state.n_agents)])


def _can_enter(state: WorldState, i: int, r: int, c: int) -> bool:
    if not (0 <= r < state.height and 0 <= c < state.width):
        return False
    if state.water[r, c] or state.agent_at[r, c] >= 0:
        return False
    owner = state.house[r, c]
    return owner < 0 or owner == i


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------


@dataclass
class StepOutcome:
    income: np.ndarray
    labor: np.ndarray
    order: np.ndarray
    trades: list[Trade]
    harvested: np.ndarray
    built: np.ndarray


def step_world(state: WorldState, actions, rng: np.random.Generator, masks: np.ndarray | None = None) -> StepOutcome:
    """Advance the world one timestep in place.

    Agents act one at a time in a random order drawn from ``rng``; a move into
    a cell taken earlier in the same step is blocked and costs nothing. Any
    action outside the start-of-step mask raises :class:`InvalidAction`.
    """
    n = state.n_agents
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (n,):
        raise InvalidAction(f"expected {n} actions, got shape {actions.shape}")
    if masks is None:
        masks = action_masks(state)
    bad = ~masks[np.arange(n), actions]
    if bad.any():
        who = int(np.flatnonzero(bad)[0])
        raise InvalidAction(f"agent {who} chose masked action {describe_action(int(actions[who]))} at t={state.t}")

    coin_before = state.total_coin().copy()
    labor_before = state.labor.copy()
    harvested = np.zeros((n, N_RESOURCES), dtype=np.int64)
    built = np.zeros(n, dtype=bool)
    trades = []
    table = state.labor_table
    order = rng.permutation(n)
    for i in order:
        a = int(actions[i])
        if a == NOOP:
            continue
        if a < TRADE_OFFSET:
            dr, dc = MOVES[a - MOVE_OFFSET]
            r, c = state.pos[i]
            nr, nc = r + dr, c + dc
            if not _can_enter(state, i, nr, nc):
                continue
            state.agent_at[r, c] = -1
            state.agent_at[nr, nc] = i
            state.pos[i] = (nr, nc)
            state.labor[i] += table.move
            for res in range(N_RESOURCES):
                if state.resource[nr, nc, res] > 0:
                    state.resource[nr, nc, res] -= 1
                    units = 1 + int(rng.random() < state.gather_skill[i])
                    state.stock[i, res] += units
                    harvested[i, res] += units
                    state.labor[i] += table.gather
        elif a == BUILD:
            r, c = state.pos[i]
            state.stock[i, STONE] -= 1
            state.stock[i, WOOD] -= 1
            state.house[r, c] = i
            state.coin[i] += state.build_skill[i]
            state.houses_built[i] += 1
            state.labor[i] += table.build
            built[i] = True
        else:
            resource, side, price = decode_trade(a)
            state.labor[i] += table.trade
            trade = state.book.submit(i, side, resource, price, state.t, state.coin, state.stock, rng)
            if trade is not None:
                trades.append(trade)

    state.book.expire(state.t, state.coin, state.stock)
    _respawn(state, rng)
    state.t += 1
    return StepOutcome(state.total_coin() - coin_before, state.labor - labor_before, order, trades,
                       harvested, built)


def _respawn(state: WorldState, rng: np.random.Generator):
    src = state.source
    empty = (src >= 0) & (state.resource.sum(axis=2) == 0)
    rows, cols = np.nonzero(empty)
    if rows.size == 0:
        return
    hit = rng.random(rows.size) < RESPAWN_PROB
    if hit.any():
        state.resource[rows[hit], cols[hit], src[rows[hit], cols[hit]]] = 1


@dataclass(frozen=True)
class YearReport:
    year: int
    schedule: fiscal.TaxSchedule
    incomes: np.ndarray
    taxes: np.ndarray
    transfers: np.ndarray
    rates: np.ndarray


def set_schedule(state: WorldState, schedule: fiscal.TaxSchedule):
    state.schedule = schedule


def close_tax_year(state: WorldState) -> YearReport:
    """Collect taxes on this year's income, redistribute, and open the next year.

    Transfers hit available coin, which may dip below zero when an agent has
    most of its coin escrowed in bids; total coin never goes negative.
    """
    incomes = state.income_this_year()
    schedule = state.schedule
    taxes = np.atleast_1d(fiscal.compute_tax(np.maximum(incomes, 0.0), schedule))
    transfers = fiscal.settle_tax_year(incomes, schedule)
    state.coin += transfers
    rates = np.atleast_1d(schedule.marginal_rate(np.maximum(incomes, 0.0)))
    state.prev_incomes = incomes.copy()
    state.prev_rates = rates
    state.year_start_coin = state.total_coin().copy()
    return YearReport((state.t - 1) // state.tax_period, schedule, incomes, taxes, transfers, rates)


# --------------------------------------------------------------------------
# Observations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentObservation:
    spatial: np.ndarray  # [channels, 11, 11]
    endowment: np.ndarray  # available stone, wood, coin; escrowed stone, wood, coin
    skills: np.ndarray  # build, gather
    market: np.ndarray
    tax: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.endowment, self.skills, self.market, self.tax])


@dataclass(frozen=True)
class PlannerObservation:
    endowments: np.ndarray  # [N, 3] total stone, wood, coin per agent
    market: np.ndarray
    tax: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.endowments.ravel(), self.market, self.tax])


def _progress(state: WorldState) -> np.ndarray:
    k = state.step_in_year
    return np.array([k / state.tax_period, k == 0, k == state.tax_period - 1], dtype=np.float64)


def _dynamic_padded(state: WorldState) -> np.ndarray:
    h, w = state.height, state.width
    out = np.full((4, h + 2 * VIEW_RADIUS, w + 2 * VIEW_RADIUS), -1, dtype=np.int16)
    out[:2] = 0
    inner = (slice(VIEW_RADIUS, VIEW_RADIUS + h), slice(VIEW_RADIUS, VIEW_RADIUS + w))
    out[0][inner] = state.resource[..., STONE]
    out[1][inner] = state.resource[..., WOOD]
    out[2][inner] = state.house
    out[3][inner] = state.agent_at
    return out


def make_agent_observations(state: WorldState) -> list[AgentObservation]:
    dynamic = _dynamic_padded(state)
    prog = _progress(state)
    rates = np.asarray(state.schedule.rates)
    sorted_prev = np.sort(state.prev_incomes)
    own_rates = np.atleast_1d(state.schedule.marginal_rate(np.maximum(state.income_this_year(), 0.0)))
    book = state.book
    counts = book.order_counts()
    total = counts.sum(axis=0)
    average, trades = book.trade_stats()
    market_tail = np.concatenate([average, trades.ravel()])
    obs = []
    for i in range(state.n_agents):
        r, c = state.pos[i]
        window = (slice(None), slice(r, r + VIEW_SIZE), slice(c, c + VIEW_SIZE))
        dyn = dynamic[window]
        spatial = np.empty((len(SPATIAL_CHANNELS), VIEW_SIZE, VIEW_SIZE), dtype=np.float32)
        spatial[:3] = state._static_padded[window]
        spatial[3] = dyn[0]
        spatial[4] = dyn[1]
        spatial[5] = dyn[2] == i
        spatial[6] = (dyn[2] >= 0) & (dyn[2] != i)
        spatial[7] = (dyn[3] >= 0) & (dyn[3] != i)
        endowment = np.array([state.stock[i, STONE], state.stock[i, WOOD], state.coin[i],
                              book.escrow_units[i, STONE], book.escrow_units[i, WOOD],
                              book.escrow_coin[i]], dtype=np.float64)
        own = counts[i]
        obs.append(AgentObservation(
            spatial=spatial,
            endowment=endowment,
            skills=np.array([state.build_skill[i], state.gather_skill[i]]),
            market=np.concatenate([own.ravel(), (total - own).ravel(), market_tail]),
            tax=np.concatenate([rates, prog, sorted_prev, own_rates[i:i + 1]]),
        ))
    return obs


def make_agent_observation(state: WorldState, agent_id: int) -> AgentObservation:
    if not 0 <= agent_id < state.n_agents:
        raise IndexError(f"no agent {agent_id}")
    return make_agent_observations(state)[agent_id]


def make_planner_observation(state: WorldState) -> PlannerObservation:
    stock = state.total_stock()
    endowments = np.column_stack([stock[:, STONE], stock[:, WOOD], state.total_coin()]).astype(np.float64)
    tax = np.concatenate([np.asarray(state.schedule.rates), _progress(state),
                          state.prev_incomes, state.prev_rates])
    return PlannerObservation(endowments, state.book.summary(None).vector(), tax)


def agent_obs_sizes(n_agents: int) -> tuple[tuple[int, int, int], int]:
    flat = 6 + 2 + (2 * 2 * N_RESOURCES * N_PRICE_LEVELS + N_RESOURCES + N_RESOURCES * N_PRICE_LEVELS) \
        + (fiscal.N_BRACKETS + 3 + n_agents + 1)
    return (len(SPATIAL_CHANNELS), VIEW_SIZE, VIEW_SIZE), flat


def planner_obs_size(n_agents: int) -> int:
    market = 2 * N_RESOURCES * N_PRICE_LEVELS + N_RESOURCES + N_RESOURCES * N_PRICE_LEVELS
    return 3 * n_agents + market + fiscal.N_BRACKETS + 3 + 2 * n_agents


# --------------------------------------------------------------------------
# Hashing
# --------------------------------------------------------------------------


def state_hash(state: WorldState) -> str:
    h = hashlib.sha256()
    for arr in (state.resource, state.house, state.agent_at, state.pos, state.stock, state.coin,
                state.labor, state.houses_built, state.year_start_coin, state.prev_incomes):
        h.update(np.ascontiguousarray(arr).tobytes())
    orders, esc_coin, esc_units, n_trades, next_id = state.book.state_tuple()
    h.update(repr((orders, n_trades, next_id, state.t, state.schedule.rates)).encode())
    h.update(esc_coin)
    h.update(esc_units)
    return h.hexdigest()[:16]


__all__ = [
    "AgentObservation", "BUILD", "InvalidAction", "LABOR", "LaborTable", "MAX_OPEN_ORDERS", "MOVES",
    "N_AGENT_ACTIONS", "NOOP", "PlannerObservation", "StepOutcome", "TRADE_OFFSET", "WorldState",
    "YearReport", "action_masks", "agent_action_mask", "close_tax_year", "decode_trade",
    "make_agent_observation", "make_agent_observations", "make_planner_observation", "new_world",
    "set_schedule", "state_hash", "step_world", "trade_action",
]
