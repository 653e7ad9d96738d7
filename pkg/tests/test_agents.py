import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdasim.agents import (BUY, LT_OBS_DIM, MM_OBS_DIM, SELL, SKIP, FlashSchedule, LtParams,
                           MarketView, MmParams, ZiParams, build_policy, flash_sale_step,
                           informed_schedule, liquidity_provision, lt_deviation, lt_observation,
                           lt_reward, lt_step, mm_observation, mm_quote_prices, mm_reward,
                           mm_step, round_quotes, zi_step)
from cdasim.exchange import Account, CancelIntent, OrderIntent, UndefinedMid
from cdasim.lob import Kind, Side

LOT = 100
MM_DEFAULT = MmParams(0.5, 0.15, 0.09, 0.5)


def view(bids=((9_999, 500),), asks=((10_001, 500),), step=0, attribution=None):
    mid = (bids[0][0] + asks[0][0]) / 2 if bids and asks else None
    return MarketView(step, tuple(bids), tuple(asks), mid, mid or 10_000.0, 2,
                      (10_000.0,) * 5, attribution or {})


@pytest.mark.parametrize("es,ea,expected", [(0, 0, (99.5, 100.5)), (1, 0, (99.0, 101.0)),
                                            (0, 0.25, (99.75, 100.75))])
def test_quote_prices(es, ea, expected):
    assert mm_quote_prices(100.0, 1.0, es, ea) == pytest.approx(expected, abs=1e-12)


@given(st.floats(1, 1e4), st.floats(0.01, 50), st.floats(-1, 2), st.floats(-1, 1))
def test_quote_algebra(mid, s, es, ea):
    b, a = mm_quote_prices(mid, s, es, ea)
    assert a - b == pytest.approx(s * (1 + es), rel=1e-9, abs=1e-9)
    assert (a + b) / 2 == pytest.approx(mid + s * ea, rel=1e-9, abs=1e-9)


def test_quote_errors():
    with pytest.raises(UndefinedMid):
        mm_quote_prices(None, 1.0, 0, 0)
    with pytest.raises(ValueError):
        mm_quote_prices(100.0, 0.0, 0, 0)


def test_round_quotes_outward_and_uncross():
    assert round_quotes(99.5, 100.5) == (99, 101)
    assert round_quotes(100.0, 100.0) == (99, 101)
    assert round_quotes(99.0, 101.0) == (99, 101)


def test_liquidity_provision():
    att = {"a": (10, 0, 0, 0, 0), "b": (20, 10, 0, 0, 0)}
    shares, ok = liquidity_provision(att, ["a", "b"])
    assert ok and shares == pytest.approx({"a": 0.25, "b": 0.75})
    assert liquidity_provision({"a": (5,) * 5}, ["a"])[0]["a"] == 1.0
    assert liquidity_provision({"a": (5,), "b": (5,)}, ["a", "b"])[0] == {"a": 0.5, "b": 0.5}
    shares, ok = liquidity_provision({}, ["a", "b"])
    assert not ok and shares == {"a": 0.0, "b": 0.0}


def test_mm_reward_examples():
    assert mm_reward(100, 20, 0.5, MM_DEFAULT) == pytest.approx(4.365, abs=1e-12)
    assert mm_reward(0, 0, 0.7, MmParams(omega=0.0, target_share=0.5)) == pytest.approx(-0.2)
    p = MmParams(omega=1.0, alpha=0.3, gamma_inv=0.5)
    assert mm_reward(10, -4, 0.9, p) == pytest.approx(0.3 * (10 - 2))


def test_lt_reward_examples():
    p = LtParams(omega=0.5)
    assert lt_reward(0, 0, 0.1, 0.3, 0.2, 0.2, p) == pytest.approx(0.05, abs=1e-12)
    assert lt_reward(0, 0, 0.4, 0.4, 0.1, 0.1, LtParams(omega=0.0)) == 0.0
    p1 = LtParams(omega=1.0, alpha=0.01, gamma_inv=0.9)
    assert lt_reward(50, 10, 0.9, 0.1, 0.0, 0.3, p1) == pytest.approx(0.01 * (50 - 9))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-10, 10))
def test_pnl_term_linear_in_alpha(d, d_inv, k):
    p1 = MmParams(omega=0.7, alpha=0.1)
    p2 = MmParams(omega=0.7, alpha=0.1 * (1 + abs(k)))
    r1 = mm_reward(d, d_inv, 0.5, p1)
    r2 = mm_reward(d, d_inv, 0.5, p2)
    assert r2 == pytest.approx(r1 * (1 + abs(k)), rel=1e-9, abs=1e-9)


def test_lt_deviation():
    assert lt_deviation(0.5, 30, 60) == 0.0
    assert lt_deviation(0.2, 30, 60) == pytest.approx(0.3)


def test_mm_step_sizes_and_cancel_replace():
    acct = Account.open("mm", 200_000.0, inventory=10_000)
    intents = mm_step(0.5, 0.0, 0.0, 10_000.0, 2.0, acct, {}, LOT)
    orders = [i for i in intents if isinstance(i, OrderIntent)]
    assert [(o.side, o.quantity, o.price) for o in orders] == [
        (Side.BID, 500, 9_999), (Side.ASK, 500, 10_001)]


def test_mm_step_zero_u_cancels_only():
    acct = Account.open("mm", 200_000.0)
    resting = {7: type("O", (), {"side": Side.BID, "kind": Kind.LIMIT, "price": 9_999,
                                 "remaining": 100})()}
    intents = mm_step(0.0, 0.0, 0.0, 10_000.0, 2.0, acct, resting, LOT)
    assert intents == [CancelIntent(7)]


def test_mm_step_skips_without_mid():
    with pytest.raises(UndefinedMid):
        mm_step(0.5, 0, 0, None, None, Account.open("mm", 1e5), {}, LOT)


def test_mm_step_large_shift_moves_both_quotes_up():
    acct = Account.open("mm", 200_000.0, inventory=10_000)
    orders = [i for i in mm_step(0.5, 0.0, 1.0, 10_000.0, 2.0, acct, {}, LOT)
              if isinstance(i, OrderIntent)]
    bid, ask = orders
    assert bid.price > 9_999 and ask.price > 10_001


def test_lt_step():
    p = LtParams(order_size=18)
    assert lt_step(SKIP, p, LOT) is None
    buy = lt_step(BUY, p, LOT)
    assert (buy.side, buy.kind, buy.quantity) == (Side.BID, Kind.MARKET, 1_800)
    assert lt_step(SELL, p, LOT).side is Side.ASK


def test_zi_always_market():
    rng = np.random.default_rng(0)
    p = ZiParams(1.0, 0.0, 0.0)
    for _ in range(200):
        i = zi_step(rng, view(), p, [], LOT)
        assert i.kind is Kind.MARKET and i.quantity == LOT


def test_zi_cancel_with_nothing_resting_is_noop():
    rng = np.random.default_rng(1)
    p = ZiParams(0.0, 0.0, 1.0)
    assert all(zi_step(rng, view(), p, [], LOT) is None for _ in range(50))
    assert zi_step(rng, view(), p, [42], LOT) == CancelIntent(42)


def test_zi_limit_price_band():
    rng = np.random.default_rng(2)
    p = ZiParams(0.0, 1.0, 0.0)
    v = view(bids=((9_995, 100),), asks=((10_005, 100),))
    for _ in range(500):
        i = zi_step(rng, v, p, [], LOT)
        if i.side is Side.BID:
            assert 9_985 <= i.price <= 10_004
        else:
            assert 9_996 <= i.price <= 10_015


def test_zi_empty_side_uses_last_mid():
    rng = np.random.default_rng(3)
    v = view(bids=(), asks=((10_005, 100),))
    for _ in range(100):
        i = zi_step(rng, v, ZiParams(0.0, 1.0, 0.0), [], LOT)
        assert i.price >= 1


def test_zi_params_validation():
    with pytest.raises(ValueError):
        ZiParams(0.5, 0.6, 0.1)
    with pytest.raises(ValueError):
        ZiParams(-0.1, 0.5, 0.1)


def test_flash_schedule():
    s = FlashSchedule(n_events=3)
    active = [k for k in range(1_300) if s.is_active(k)]
    assert active == [0, 1, 2, 3, 4, 405, 406, 407, 408, 409, 810, 811, 812, 813, 814]
    assert s.total_shares_per_event == 1_500
    assert flash_sale_step(0, s, LOT).quantity == 30_000
    assert flash_sale_step(5, s, LOT) is None
    assert not any(FlashSchedule(n_events=0).is_active(k) for k in range(1_000))
    assert s.event_starts(500) == [0, 405]


def test_informed_schedule():
    assert informed_schedule(0) == (0.3, 0.4)
    assert informed_schedule(10_000) == (0.4, 0.35)
    assert informed_schedule(25_000) == (0.4, 0.4)
    assert informed_schedule(40_000) == informed_schedule(10**6) == (0.4, 0.3)
    assert informed_schedule(150, phase_steps=100) == (0.4, 0.35)


def test_observation_shapes():
    v = view()
    acct = Account.open("x", 1e6, initial_mid=10_000)
    mo = mm_observation(v, acct, 0.5, MM_DEFAULT, 10_000.0)
    lo = lt_observation(v, acct, LtParams(), 10_000.0)
    assert mo.shape == (MM_OBS_DIM,) and lo.shape == (LT_OBS_DIM,)
    assert np.isfinite(mo).all() and np.isfinite(lo).all()
    assert mo[-4:].tolist() == [0.5, 0.15, 0.09, 0.5]
    assert mo[:5].tolist() == [0.0] * 5
    pol, vnet = build_policy("mm", np.random.default_rng(0))
    assert pol.obs_dim == MM_OBS_DIM and pol.head.dim == 3
    pol, _ = build_policy("lt", np.random.default_rng(0))
    assert pol.obs_dim == LT_OBS_DIM and pol.head.n_out == 3
    with pytest.raises(ValueError):
        build_policy("zi", np.random.default_rng(0))
