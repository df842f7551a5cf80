import numpy as np
import pytest

from gtb.market import (MAX_OPEN_ORDERS, EscrowInsufficient, OpenOrderLimitExceeded, OrderBook,
                        Resource, Side)

STONE, WOOD = Resource.STONE, Resource.WOOD


def fresh(n=3, coin=20.0, units=3):
    book = OrderBook(n)
    return book, np.full(n, coin), np.full((n, 2), units, dtype=np.int64), np.random.default_rng(0)


def test_bid_matches_cheapest_ask_at_ask_price():
    book, coin, stock, rng = fresh()
    book.submit(1, Side.ASK, WOOD, 7, 0, coin, stock, rng)
    book.submit(2, Side.ASK, WOOD, 3, 0, coin, stock, rng)
    trade = book.submit(0, Side.BID, WOOD, 8, 1, coin, stock, rng)
    assert (trade.price, trade.buyer, trade.seller) == (3, 0, 2)
    assert coin[0] == 17 and coin[2] == 23
    assert stock[0, WOOD] == 4
    assert book.best_ask(WOOD) == 7


def test_unmatched_ask_rests_with_escrow():
    book, coin, stock, rng = fresh()
    assert book.submit(0, Side.ASK, STONE, 5, 0, coin, stock, rng) is None
    assert stock[0, STONE] == 2 and book.escrow_units[0, STONE] == 1
    assert book.submit(1, Side.BID, STONE, 4, 0, coin, stock, rng) is None
    assert coin[1] == 16 and book.escrow_coin[1] == 4


def test_price_then_time_priority():
    book, coin, stock, rng = fresh(4)
    book.submit(1, Side.BID, STONE, 6, 0, coin, stock, rng)
    book.submit(2, Side.BID, STONE, 6, 1, coin, stock, rng)
    book.submit(3, Side.BID, STONE, 5, 0, coin, stock, rng)
    trade = book.submit(0, Side.ASK, STONE, 2, 2, coin, stock, rng)
    assert (trade.buyer, trade.price) == (1, 6)
    trade = book.submit(0, Side.ASK, STONE, 2, 2, coin, stock, rng)
    assert trade.buyer == 2


def test_expiry_refunds_escrow():
    book, coin, stock, rng = fresh()
    book.submit(0, Side.BID, WOOD, 4, 10, coin, stock, rng)
    assert book.expire(59, coin, stock) == []
    assert len(book.expire(60, coin, stock)) == 1
    assert coin[0] == 20 and book.escrow_coin[0] == 0 and book.open_count[0, WOOD] == 0


def test_order_limit_and_escrow_errors():
    book, coin, stock, rng = fresh(units=10)
    for _ in range(MAX_OPEN_ORDERS):
        book.submit(0, Side.ASK, WOOD, 9, 0, coin, stock, rng)
    assert not book.can_submit(0, Side.ASK, WOOD, 9, coin, stock)
    with pytest.raises(OpenOrderLimitExceeded):
        book.submit(0, Side.ASK, WOOD, 9, 0, coin, stock, rng)
    book.submit(0, Side.ASK, STONE, 9, 0, coin, stock, rng)
    coin[1] = 2
    with pytest.raises(EscrowInsufficient):
        book.submit(1, Side.BID, STONE, 3, 0, coin, stock, rng)


def test_summary_vector_and_average_price():
    book, coin, stock, rng = fresh()
    s = book.summary(0)
    assert s.vector().shape == (112,)
    assert book.summary(None).vector().shape == (68,)
    assert np.all(s.average_price == 0)
    book.submit(0, Side.BID, STONE, 4, 0, coin, stock, rng)
    book.submit(1, Side.BID, STONE, 2, 0, coin, stock, rng)
    s = book.summary(0)
    assert s.own[STONE, Side.BID, 4] == 1 and s.others[STONE, Side.BID, 2] == 1
    book.submit(2, Side.ASK, STONE, 1, 0, coin, stock, rng)
    assert book.summary(0).average_price[STONE] == 4


def test_self_trade_keeps_book_uncrossed():
    book, coin, stock, rng = fresh()
    book.submit(0, Side.BID, STONE, 5, 0, coin, stock, rng)
    trade = book.submit(0, Side.ASK, STONE, 3, 1, coin, stock, rng)
    assert trade.buyer == trade.seller == 0
    assert coin[0] == 20 and stock[0, STONE] == 3


def run_fuzz(n_ops, seed=0, n_agents=6):
    """Random submit/expire stream checking every book invariant after each operation."""
    rng = np.random.default_rng(seed)
    book = OrderBook(n_agents)
    coin = rng.integers(0, 60, n_agents).astype(float)
    stock = rng.integers(0, 8, (n_agents, 2))
    coin_total, unit_total = coin.sum(), stock.sum(axis=0)
    seq = {}
    t = 0
    for op in range(n_ops):
        if rng.random() < 0.1:
            t += 1
            book.expire(t - 1, coin, stock)
        else:
            a, side, res, price = (int(rng.integers(n_agents)), int(rng.integers(2)),
                                   int(rng.integers(2)), int(rng.integers(11)))
            if not book.can_submit(a, side, res, price, coin, stock):
                continue
            # the expected counterparty under price-time priority, before submitting
            opp = book.asks[res] if side == Side.BID else book.bids[res]
            cross = [o for o in opp if (o.price <= price if side == Side.BID else o.price >= price)]
            n_before = len(book.trades)
            book.submit(a, side, res, price, t, coin, stock, rng)
            if cross:
                best = (min if side == Side.BID else max)(o.price for o in cross)
                earliest = min(o.placed_at for o in cross if o.price == best)
                trade = book.trades[-1]
                assert len(book.trades) == n_before + 1
                assert trade.price == best
                matched = [o for o in cross if o not in opp]
                assert len(matched) == 1 and matched[0].placed_at == earliest
                assert matched[0].price == best
            else:
                assert len(book.trades) == n_before
        if op % 7 == 0 or op == n_ops - 1:
            assert coin.sum() + book.escrow_coin.sum() == coin_total
            np.testing.assert_array_equal(stock.sum(axis=0) + book.escrow_units.sum(axis=0), unit_total)
            assert np.all(coin >= 0) and np.all(stock >= 0)
            for r in range(2):
                bb, ba = book.best_bid(r), book.best_ask(r)
                assert bb is None or ba is None or bb < ba
            assert np.all(book.open_count <= MAX_OPEN_ORDERS)
    seq["trades"] = len(book.trades)
    return seq


def test_fuzz_small():
    assert run_fuzz(20_000, seed=1)["trades"] > 100
