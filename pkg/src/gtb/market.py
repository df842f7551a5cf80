"""Continuous double auction for unit orders of stone and wood.

Orders are escrowed on submission: a bid moves its price from the bidder's
available coin into escrow, an ask moves one unit of the resource. A new
order trades at most once, against the best resting counterparty, at the
resting order's price.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

MAX_PRICE = 10
N_PRICE_LEVELS = MAX_PRICE + 1
ORDER_DURATION = 50
MAX_OPEN_ORDERS = 5
N_RESOURCES = 2


class Resource(enum.IntEnum):
    STONE = 0
    WOOD = 1


class Side(enum.IntEnum):
    BID = 0
    ASK = 1


class MarketError(RuntimeError):
    """An order reached the book that the action mask should have blocked."""


class EscrowInsufficient(MarketError):
    pass


class OpenOrderLimitExceeded(MarketError):
    pass


@dataclass(eq=False)
class Order:
    id: int
    agent: int
    side: Side
    resource: Resource
    price: int
    placed_at: int
    expires_at: int


@dataclass(frozen=True)
class Trade:
    t: int
    resource: int
    price: int
    buyer: int
    seller: int

    def to_record(self) -> dict:
        return {"t": int(self.t), "resource": int(self.resource), "price": int(self.price),
                "buyer": int(self.buyer), "seller": int(self.seller)}


@dataclass(frozen=True)
class MarketSummary:
    """Order counts indexed ``[resource, side, price]`` plus trade history stats."""

    own: np.ndarray | None
    others: np.ndarray
    average_price: np.ndarray
    trade_counts: np.ndarray

    def vector(self) -> np.ndarray:
        parts = [] if self.own is None else [self.own.ravel()]
        parts += [self.others.ravel(), self.average_price, self.trade_counts.ravel()]
        return np.concatenate(parts).astype(np.float64)


@dataclass
class OrderBook:
    n_agents: int
    max_open: int = MAX_OPEN_ORDERS
    duration: int = ORDER_DURATION
    bids: list = field(default_factory=lambda: [[] for _ in range(N_RESOURCES)])
    asks: list = field(default_factory=lambda: [[] for _ in range(N_RESOURCES)])
    escrow_coin: np.ndarray = None
    escrow_units: np.ndarray = None
    open_count: np.ndarray = None
    trades: list = field(default_factory=list)
    next_id: int = 0
    _price_sum: np.ndarray = field(init=False, repr=False)
    _trade_counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_agents
        if self.escrow_coin is None:
            self.escrow_coin = np.zeros(n, dtype=np.float64)
        if self.escrow_units is None:
            self.escrow_units = np.zeros((n, N_RESOURCES), dtype=np.int64)
        if self.open_count is None:
            self.open_count = np.zeros((n, N_RESOURCES), dtype=np.int64)
        self._price_sum = np.zeros(N_RESOURCES, dtype=np.float64)
        self._trade_counts = np.zeros((N_RESOURCES, N_PRICE_LEVELS), dtype=np.int64)

    # -- queries ---------------------------------------------------------

    def can_submit(self, agent: int, side: int, resource: int, price: int, coin, stock) -> bool:
        if self.open_count[agent, resource] >= self.max_open:
            return False
        if side == Side.BID:
            return coin[agent] >= price
        return stock[agent, resource] >= 1

    def open_orders(self):
        for r in range(N_RESOURCES):
            yield from self.bids[r]
            yield from self.asks[r]

    def best_bid(self, resource: int):
        book = self.bids[resource]
        return max(o.price for o in book) if book else None

    def best_ask(self, resource: int):
        book = self.asks[resource]
        return min(o.price for o in book) if book else None

    # -- mutation --------------------------------------------------------

    def submit(self, agent: int, side: int, resource: int, price: int, t: int,
               coin: np.ndarray, stock: np.ndarray, rng: np.random.Generator) -> Trade | None:
        """Place one unit order for ``agent``; returns the trade if it matched.

        ``coin`` (available coin, shape [N]) and ``stock`` (available units,
        shape [N, 2]) are updated in place.
        """
        side = Side(side)
        resource = Resource(resource)
        if not 0 <= price <= MAX_PRICE or int(price) != price:
            raise ValueError(f"price must be an integer in [0, {MAX_PRICE}]: {price}")
        if self.open_count[agent, resource] >= self.max_open:
            raise OpenOrderLimitExceeded(
                f"agent {agent} already has {self.max_open} open {resource.name.lower()} orders")
        if side == Side.BID and coin[agent] < price:
            raise EscrowInsufficient(f"agent {agent} cannot escrow {price} coin")
        if side == Side.ASK and stock[agent, resource] < 1:
            raise EscrowInsufficient(f"agent {agent} has no {resource.name.lower()} to sell")

        order = Order(self.next_id, agent, side, resource, int(price), t, t + self.duration)
        self.next_id += 1
        match = self._find_match(order, rng)
        if match is None:
            self._rest(order, coin, stock)
            return None
        return self._execute(order, match, t, coin, stock)

    def _find_match(self, order: Order, rng) -> Order | None:
        if order.side == Side.BID:
            pool = [o for o in self.asks[order.resource] if o.price <= order.price]
            if not pool:
                return None
            best_price = min(o.price for o in pool)
        else:
            pool = [o for o in self.bids[order.resource] if o.price >= order.price]
            if not pool:
                return None
            best_price = max(o.price for o in pool)
        pool = [o for o in pool if o.price == best_price]
        earliest = min(o.placed_at for o in pool)
        pool = [o for o in pool if o.placed_at == earliest]
        if len(pool) == 1:
            return pool[0]
        return pool[int(rng.integers(len(pool)))]

    def _rest(self, order: Order, coin, stock):
        a, r = order.agent, order.resource
        if order.side == Side.BID:
            coin[a] -= order.price
            self.escrow_coin[a] += order.price
            self.bids[r].append(order)
        else:
            stock[a, r] -= 1
            self.escrow_units[a, r] += 1
            self.asks[r].append(order)
        self.open_count[a, r] += 1

    def _execute(self, incoming: Order, resting: Order, t: int, coin, stock) -> Trade:
        r = incoming.resource
        price = resting.price
        if incoming.side == Side.BID:
            buyer, seller = incoming.agent, resting.agent
            coin[buyer] -= price
            self.escrow_units[seller, r] -= 1
            self.asks[r].remove(resting)
        else:
            buyer, seller = resting.agent, incoming.agent
            stock[seller, r] -= 1
            self.escrow_coin[buyer] -= price
            self.bids[r].remove(resting)
        self.open_count[resting.agent, r] -= 1
        coin[seller] += price
        stock[buyer, r] += 1
        trade = Trade(t, int(r), price, buyer, seller)
        self.trades.append(trade)
        self._price_sum[r] += price
        self._trade_counts[r, price] += 1
        return trade

    def expire(self, t: int, coin: np.ndarray, stock: np.ndarray) -> list[Order]:
        """Drop orders with ``expires_at <= t`` and refund their escrow."""
        expired = []
        for r in range(N_RESOURCES):
            for book, is_bid in ((self.bids[r], True), (self.asks[r], False)):
                if not book or all(o.expires_at > t for o in book):
                    continue
                keep = []
                for o in book:
                    if o.expires_at > t:
                        keep.append(o)
                        continue
                    expired.append(o)
                    self.open_count[o.agent, r] -= 1
                    if is_bid:
                        self.escrow_coin[o.agent] -= o.price
                        coin[o.agent] += o.price
                    else:
                        self.escrow_units[o.agent, r] -= 1
                        stock[o.agent, r] += 1
                book[:] = keep
        return expired

    # -- observation -----------------------------------------------------

    def order_counts(self) -> np.ndarray:
        """Open orders per ``[agent, resource, side, price]``."""
        counts = np.zeros((self.n_agents, N_RESOURCES, 2, N_PRICE_LEVELS), dtype=np.float64)
        for r in range(N_RESOURCES):
            for side, book in ((0, self.bids[r]), (1, self.asks[r])):
                for o in book:
                    counts[o.agent, r, side, o.price] += 1
        return counts

    def trade_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Average traded price per resource (0 before any trade) and trade counts per price."""
        counts = self._trade_counts.sum(axis=1)
        average = np.divide(self._price_sum, counts, out=np.zeros(N_RESOURCES), where=counts > 0)
        return average, self._trade_counts.astype(np.float64)

    def summary(self, for_agent: int | None = None, counts: np.ndarray | None = None) -> MarketSummary:
        """Counts of open orders per resource/side/price level.

        With ``for_agent`` the counts are split into the agent's own orders and
        everyone else's; without it ``others`` holds the whole book.
        ``counts`` may pass a precomputed :meth:`order_counts` array.
        """
        if counts is None:
            counts = self.order_counts()
        total = counts.sum(axis=0)
        average, trades = self.trade_stats()
        if for_agent is None:
            return MarketSummary(None, total, average, trades)
        own = counts[for_agent]
        return MarketSummary(own, total - own, average, trades)

    def state_tuple(self):
        """Canonical content for hashing."""
        orders = sorted((o.id, o.agent, int(o.side), int(o.resource), o.price, o.placed_at, o.expires_at)
                        for o in self.open_orders())
        return (orders, self.escrow_coin.tobytes(), self.escrow_units.tobytes(), len(self.trades), self.next_id)
