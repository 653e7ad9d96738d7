import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdasim.exchange import (Account, CancelIntent, Exchange, InsufficientBuyingPower,
                             LatencyModel, OrderIntent, ShortBoundExceeded, UndefinedMid,
                             mark_to_mid, mark_to_mid2_exact, settle)
from cdasim.lob import Kind, Side, Trade, UnknownOrder


def bid(q, px):
    return OrderIntent(Side.BID, Kind.LIMIT, q, px)


def ask(q, px):
    return OrderIntent(Side.ASK, Kind.LIMIT, q, px)


def mkt(side, q):
    return OrderIntent(side, Kind.MARKET, q)


def test_reservation_and_buying_power():
    ex = Exchange(lot_size=1)
    a = ex.open_account(Account.open("a", 1_000.0))
    ex.route("a", bid(5, 10_000))  # 5 shares at $100.00
    assert a.reserved == 500.0 and a.buying_power == 500.0
    with pytest.raises(InsufficientBuyingPower):
        ex.route("a", bid(6, 10_000))


def test_short_bound():
    ex = Exchange(lot_size=1)
    ex.open_account(Account.open("a", 0.0, inventory=5, short_bound=10))
    ex.route("a", ask(15, 100))
    with pytest.raises(ShortBoundExceeded):
        ex.route("a", ask(1, 100))


def test_settle_buy_and_round_trip():
    accts = {"b": Account.open("b", 10_000.0), "s": Account.open("s", 0.0, inventory=10)}
    accts["s"].reserved_shares = 10
    settle(Trade(1, 2, 10_000, 10, 0, "b", "s", Side.BID), accts)
    assert accts["b"].cash == 10_000.0 - 1_000.0 and accts["b"].inventory == 10
    accts["b"].reserved_shares = 10
    accts["s"].reserved_cents = 10_000 * 10
    settle(Trade(3, 4, 10_000, 10, 1, "b", "s", Side.ASK), accts)
    assert accts["b"].cash_cents == 1_000_000 and accts["b"].inventory == 0
    assert accts["s"].cash_cents == 0 and accts["s"].inventory == 10
    assert accts["s"].reserved_cents == 0 and accts["b"].reserved_shares == 0


def test_mark_to_mid():
    a = Account.open("a", 1_000.0, initial_mid=10_000)
    assert mark_to_mid(a, 10_000) == 0.0
    a.inventory += 10
    a.cash_cents -= 10 * 10_000
    assert mark_to_mid(a, 10_001) == pytest.approx(0.10)
    assert mark_to_mid2_exact(a, 20_002) == 20  # half-cents
    with pytest.raises(UndefinedMid):
        mark_to_mid(a, None)


def test_mark_matches_tape_recomputation():
    ex = Exchange()
    ex.open_account(Account.open("mm", 1e6, 0, initial_mid=10_000))
    ex.open_account(Account.open("t", 1e6, 5_000, initial_mid=10_000))
    ex.route("mm", bid(1_000, 9_999))
    ex.route("mm", ask(1_000, 10_001))
    ex.drain()
    ex.route("t", mkt(Side.ASK, 600))
    ex.route("t", mkt(Side.BID, 300))
    ex.drain()
    cash = 0
    inv = 0
    for t in ex.trades:
        sign = 1 if t.buyer == "mm" else -1
        cash -= sign * t.price * t.quantity
        inv += sign * t.quantity
    mm = ex.accounts["mm"]
    assert mm.inventory == inv
    assert mark_to_mid(mm, 10_000) == pytest.approx((cash + inv * 10_000) / 100)


def test_cancel_releases_and_unknown():
    ex = Exchange()
    a = ex.open_account(Account.open("a", 1e5))
    ack = ex.route("a", bid(100, 1_000))
    ex.drain()
    ex.route("a", CancelIntent(ack.order_id))
    assert a.reserved_cents == 0 and ex.open_orders("a") == {}
    with pytest.raises(UnknownOrder):
        ex.route("a", CancelIntent(ack.order_id))


def test_cancel_in_flight_order_never_matches():
    ex = Exchange(latency=LatencyModel(1, 1))
    ex.open_account(Account.open("a", 1e5))
    ex.open_account(Account.open("b", 0, inventory=1_000))
    ack = ex.route("a", bid(100, 1_000))
    ex.route("a", CancelIntent(ack.order_id))
    ex.step = 1
    ex.route("b", mkt(Side.ASK, 100))
    ex.step = 2
    ex.drain()
    assert ex.trades == []


def test_market_buy_truncated_to_affordable():
    ex = Exchange()
    b = ex.open_account(Account.open("b", 250.0))
    ex.open_account(Account.open("s", 0.0, inventory=1_000))
    ex.route("s", ask(1_000, 100))  # $1.00
    ex.drain()
    ex.route("b", mkt(Side.BID, 500))
    ex.drain()
    assert b.inventory == 200 and b.cash_cents == 25_000 - 20_000
    assert ex.unfilled[-1][2] == 300


def test_latency_permutation_reproducible():
    def arrivals(seed):
        ex = Exchange(latency=LatencyModel(0, 2), seed=seed)
        ex.open_account(Account.open("a", 1e6))
        return [ex.route("a", bid(100, 1_000 + i)).arrival_step for i in range(20)]

    assert arrivals(5) == arrivals(5)
    assert set(arrivals(5)) <= {0, 1, 2}


def test_drain_orders_by_arrival_then_seq():
    ex = Exchange(latency=LatencyModel(0, 3), seed=11)
    ex.open_account(Account.open("a", 1e6))
    ex.open_account(Account.open("b", 0, inventory=10_000))
    acks = [ex.route("a", bid(100, 1_000)) for _ in range(10)]
    ex.step = 3
    ex.drain()
    ex.route("b", mkt(Side.ASK, 1_000))
    ex.drain(10)
    expected = [a.order_id for a in sorted(acks, key=lambda a: (a.arrival_step, a.order_id))]
    assert [t.maker_order_id for t in ex.trades] == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_session_conserves(seed):
    rng = np.random.default_rng(seed)
    ex = Exchange(latency=LatencyModel(0, 2), seed=seed)
    for i in range(6):
        ex.open_account(Account.open(f"a{i}", float(rng.uniform(1e4, 1e5)),
                                     int(rng.integers(-10, 10)) * 100, short_bound=2_000))
    totals = ex.totals()
    for step in range(60):
        ex.step = step
        for _ in range(5):
            aid = f"a{int(rng.integers(6))}"
            u = rng.random()
            try:
                if u < 0.2 and ex.open_orders(aid):
                    oid = list(ex.open_orders(aid))[int(rng.integers(len(ex.open_orders(aid))))]
                    ex.route(aid, CancelIntent(oid))
                elif u < 0.45:
                    side = Side.BID if rng.random() < 0.5 else Side.ASK
                    ex.route(aid, mkt(side, 100 * int(rng.integers(1, 4))))
                else:
                    side = Side.BID if rng.random() < 0.5 else Side.ASK
                    ex.route(aid, OrderIntent(side, Kind.LIMIT, 100 * int(rng.integers(1, 4)),
                                              int(rng.integers(95, 106))))
            except (InsufficientBuyingPower, ShortBoundExceeded):
                pass
        ex.drain()
        assert ex.totals() == totals
        for a in ex.accounts.values():
            assert a.buying_power_cents >= 0
            assert a.inventory >= -a.short_bound
    ex.cancel_all()
    ex.audit(totals)
    for a in ex.accounts.values():
        assert a.reserved_cents == 0 and a.reserved_shares == 0
