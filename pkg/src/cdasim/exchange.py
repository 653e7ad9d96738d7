"""Brokerage accounts, order gateway and settlement around an :class:`OrderBook`.

Money is held internally as integer cents (one tick times one share), so
every cash transfer is exact and cash conservation can be asserted with
``==``.  Dollar views are exposed as properties.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .lob import (DEFAULT_LOT, Kind, Order, OrderBook, RejectedOrder, Side,
                  Trade, UnknownOrder)

TICK = 0.01
DEFAULT_SHORT_BOUND = 10_000


class InsufficientBuyingPower(RejectedOrder):
    pass


class ShortBoundExceeded(RejectedOrder):
    pass


class UndefinedMid(ValueError):
    pass


def dollars_to_cents(x: float) -> int:
    return int(round(x * 100))


@dataclass
class Account:
    agent_id: str
    cash_cents: int
    inventory: int = 0
    reserved_cents: int = 0
    reserved_shares: int = 0
    short_bound: int = DEFAULT_SHORT_BOUND
    initial_cash_cents: int = -1
    initial_inventory: int = 0
    # mid (ticks) at which the opening inventory is valued for the PnL baseline
    initial_mid: float = 0.0

    def __post_init__(self):
        if self.initial_cash_cents < 0:
            self.initial_cash_cents = self.cash_cents
            self.initial_inventory = self.inventory

    @classmethod
    def open(cls, agent_id: str, cash: float, inventory: int = 0,
             short_bound: int = DEFAULT_SHORT_BOUND, initial_mid: float = 0.0) -> "Account":
        return cls(agent_id, dollars_to_cents(cash), inventory,
                   short_bound=short_bound, initial_mid=initial_mid)

    @property
    def cash(self) -> float:
        return self.cash_cents / 100

    @property
    def reserved(self) -> float:
        return self.reserved_cents / 100

    @property
    def buying_power_cents(self) -> int:
        return self.cash_cents - self.reserved_cents

    @property
    def buying_power(self) -> float:
        return self.buying_power_cents / 100

    @property
    def initial_cash(self) -> float:
        return self.initial_cash_cents / 100

    @property
    def sellable_shares(self) -> int:
        return self.inventory - self.reserved_shares + self.short_bound


def mark_to_mid(account: Account, mid: Optional[float]) -> float:
    """Mark-to-mid PnL in dollars; ``mid`` is in ticks.

    PnL = cash + inventory * mid - initial cash - initial inventory * initial mid,
    which is cash + inventory * mid - initial cash for an account opened flat.
    """
    if mid is None or not math.isfinite(mid):
        raise UndefinedMid("cannot mark an account without a mid price")
    a = account
    return (a.cash_cents + a.inventory * mid
            - a.initial_cash_cents - a.initial_inventory * a.initial_mid) / 100


def mark_to_mid2_exact(account: Account, mid2: int) -> int:
    """Mark-to-mid PnL in half-cents given twice the mid in ticks; exact integer."""
    a = account
    base2 = 2 * a.initial_cash_cents + a.initial_inventory * round(2 * a.initial_mid)
    return 2 * a.cash_cents + a.inventory * mid2 - base2


def settle(trade: Trade, accounts: dict[str, Account],
           taker_limit: Optional[int] = None) -> None:
    """Move cash and shares for one trade and release the reservations it consumed.

    ``taker_limit`` is the limit price of a marketable limit taker (None for
    market orders); a taker bid reserved cash at that price, not at the fill.
    """
    q = trade.quantity
    value = trade.price * q
    buyer = accounts[trade.buyer]
    seller = accounts[trade.seller]
    buyer.cash_cents -= value
    buyer.inventory += q
    seller.cash_cents += value
    seller.inventory -= q
    seller.reserved_shares -= q
    if trade.taker_side is Side.BID:
        if taker_limit is not None:
            buyer.reserved_cents -= taker_limit * q
    else:
        buyer.reserved_cents -= value


@dataclass(frozen=True)
class LatencyModel:
    """Per-order delay in whole steps, uniform on ``[lo, hi]``; zero by default."""

    lo: int = 0
    hi: int = 0

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"bad latency bounds [{self.lo}, {self.hi}]")

    @classmethod
    def from_spec(cls, spec) -> "LatencyModel":
        if spec is None or spec == "none":
            return cls()
        if isinstance(spec, dict):
            return cls(int(spec.get("lo", 0)), int(spec.get("hi", 0)))
        lo, hi = spec
        return cls(int(lo), int(hi))

    def sample(self, rng: np.random.Generator) -> int:
        if self.hi == 0:
            return 0
        return int(rng.integers(self.lo, self.hi + 1))

    def to_dict(self) -> Optional[dict]:
        return None if self.hi == 0 else {"lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class OrderIntent:
    side: Side
    kind: Kind
    quantity: int
    price: Optional[int] = None


@dataclass(frozen=True)
class CancelIntent:
    order_id: int


Intent = Union[OrderIntent, CancelIntent]


@dataclass(frozen=True)
class Ack:
    order_id: int
    arrival_step: int


@dataclass(frozen=True)
class MarketEvent:
    step: int
    seq: int
    kind: str  # OrderAccepted | OrderRejected | Trade | Snapshot | Cancelled | Unfilled
    payload: tuple


@dataclass
class Fill:
    """A trade plus the bookkeeping the harness wants alongside it."""

    trade: Trade
    self_trade: bool


class Exchange:
    """Gateway, matcher and brokerage for one asset.

    :meth:`route` performs the margin check and reservation immediately and
    queues the order with a sampled latency; :meth:`drain` matches all queued
    orders whose arrival step has come, in ``(arrival_step, seq)`` order.
    Cancels are applied on receipt.
    """

    def __init__(self, lot_size: int = DEFAULT_LOT, latency: LatencyModel = LatencyModel(),
                 seed: int = 0, record_events: bool = False):
        self.book = OrderBook(lot_size)
        self.lot_size = lot_size
        self.accounts: dict[str, Account] = {}
        self.latency = latency
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.trades: list[Trade] = []
        self.events: list[MarketEvent] = []
        self.record_events = record_events
        self._event_seq = 0
        self._pending: list[tuple[int, int, Order]] = []
        self._pending_ids: set[int] = set()
        self._open: dict[str, dict[int, Order]] = {}
        self._next_id = 1
        self._queue_seq = 0
        self.on_fill: Optional[Callable[[Trade, Order], None]] = None
        self.unfilled: list[tuple[int, str, int]] = []

    # -- accounts ---------------------------------------------------------

    def open_account(self, account: Account) -> Account:
        if account.agent_id in self.accounts:
            raise ValueError(f"duplicate account {account.agent_id}")
        self.accounts[account.agent_id] = account
        self._open[account.agent_id] = {}
        return account

    def open_orders(self, agent_id: str) -> dict[int, Order]:
        """Live orders of an agent (resting or still in flight), keyed by id."""
        return self._open[agent_id]

    def totals(self) -> tuple[int, int]:
        """(sum of cash in cents, sum of inventory) across all accounts."""
        return (sum(a.cash_cents for a in self.accounts.values()),
                sum(a.inventory for a in self.accounts.values()))

    # -- events -----------------------------------------------------------

    def _emit(self, kind: str, payload: tuple) -> None:
        if self.record_events:
            self._event_seq += 1
            self.events.append(MarketEvent(self.step, self._event_seq, kind, payload))

    # -- gateway ----------------------------------------------------------

    def route(self, agent_id: str, intent: Intent) -> Optional[Ack]:
        """Admit an intent from ``agent_id``.

        Raises InsufficientBuyingPower / ShortBoundExceeded / RejectedOrder on
        admission failure and UnknownOrder for a cancel of a dead order.
        """
        acct = self.accounts[agent_id]
        if isinstance(intent, CancelIntent):
            self._cancel(acct, intent.order_id)
            return None
        order = Order(self._next_id, agent_id, intent.side, intent.kind,
                      intent.price, intent.quantity)
        try:
            self.book.validate(order)
            self._reserve(acct, order)
        except RejectedOrder as e:
            self._emit("OrderRejected", (agent_id, type(e).__name__, str(e)))
            raise
        self._next_id += 1
        delay = self.latency.sample(self.rng)
        arrival = self.step + delay
        self._queue_seq += 1
        heapq.heappush(self._pending, (arrival, self._queue_seq, order))
        self._pending_ids.add(order.id)
        self._open[agent_id][order.id] = order
        self._emit("OrderAccepted", (agent_id, order.id, int(order.side), int(order.kind),
                                     order.price, order.quantity, arrival))
        return Ack(order.id, arrival)

    def _reserve(self, acct: Account, order: Order) -> None:
        q = order.quantity
        if order.side is Side.BID:
            if order.kind is Kind.LIMIT:
                need = order.price * q
                if need > acct.buying_power_cents:
                    raise InsufficientBuyingPower(
                        f"{acct.agent_id}: needs {need / 100:.2f}, has {acct.buying_power:.2f}")
                acct.reserved_cents += need
            elif acct.buying_power_cents <= 0:
                raise InsufficientBuyingPower(f"{acct.agent_id}: no buying power")
        else:
            if q > acct.sellable_shares:
                raise ShortBoundExceeded(
                    f"{acct.agent_id}: selling {q} breaches short bound {acct.short_bound}")
            acct.reserved_shares += q

    def _release(self, acct: Account, order: Order, qty: int) -> None:
        if qty <= 0:
            return
        if order.side is Side.BID:
            if order.kind is Kind.LIMIT:
                acct.reserved_cents -= order.price * qty
        else:
            acct.reserved_shares -= qty

    def _cancel(self, acct: Account, order_id: int) -> None:
        order = self._open[acct.agent_id].get(order_id)
        if order is None:
            raise UnknownOrder(order_id)
        if order_id in self._pending_ids:
            # still in flight; the matcher will skip it
            self._pending_ids.discard(order_id)
            qty = order.remaining
            order.remaining = 0
        else:
            qty = self.book.cancel(order_id)
        self._release(acct, order, qty)
        del self._open[acct.agent_id][order_id]
        self._emit("Cancelled", (acct.agent_id, order_id, qty))

    # -- matcher ----------------------------------------------------------

    def _affordable(self, acct: Account, qty: int) -> int:
        """Largest lot multiple <= qty a market buy can pay for by walking the asks."""
        budget = acct.buying_power_cents
        got = 0
        lot = self.lot_size
        for px, level_qty in self.book.depth(Side.ASK, n=1 << 30):
            take = min(qty - got, level_qty)
            if take * px <= budget:
                got += take
                budget -= take * px
            else:
                got += budget // px
                break
            if got >= qty:
                break
        return got - got % lot

    def drain(self, step: Optional[int] = None) -> list[Trade]:
        """Match every queued order due at or before ``step`` (default: current)."""
        if step is None:
            step = self.step
        out = []
        pending = self._pending
        while pending and pending[0][0] <= step:
            _, _, order = heapq.heappop(pending)
            if order.id not in self._pending_ids:
                continue
            self._pending_ids.discard(order.id)
            out.extend(self._execute(order, step))
        return out

    def _execute(self, order: Order, step: int) -> list[Trade]:
        acct = self.accounts[order.agent_id]
        requested = order.quantity
        if order.kind is Kind.MARKET and order.side is Side.BID:
            afford = self._affordable(acct, requested)
            if afford <= 0:
                del self._open[order.agent_id][order.id]
                self.unfilled.append((step, order.agent_id, requested))
                self._emit("Unfilled", (order.agent_id, order.id, requested))
                return []
            order.quantity = afford
        trades = self.book.submit(order, step)
        taker_limit = order.price if order.kind is Kind.LIMIT else None
        accounts = self.accounts
        for t in trades:
            settle(t, accounts, taker_limit)
            maker_open = self._open[t.maker_agent]
            maker = maker_open.get(t.maker_order_id)
            if maker is not None and maker.remaining == 0:
                del maker_open[t.maker_order_id]
            self._emit("Trade", (t.taker_order_id, t.maker_order_id, t.price, t.quantity,
                                 t.taker_agent, t.maker_agent))
            if self.on_fill is not None:
                self.on_fill(t, order)
        self.trades.extend(trades)
        if order.kind is Kind.MARKET:
            unfilled = order.remaining + (requested - order.quantity)
            self._release(acct, order, order.remaining)
            order.remaining = 0
            del self._open[order.agent_id][order.id]
            if unfilled:
                self.unfilled.append((step, order.agent_id, unfilled))
                self._emit("Unfilled", (order.agent_id, order.id, unfilled))
        elif order.remaining == 0:
            del self._open[order.agent_id][order.id]
        return trades

    def cancel_all(self) -> int:
        """Cancel every live order of every agent; returns how many were cancelled."""
        n = 0
        for agent_id, orders in self._open.items():
            acct = self.accounts[agent_id]
            for oid in list(orders):
                self._cancel(acct, oid)
                n += 1
        self._pending.clear()
        return n

    def audit(self, initial_totals: tuple[int, int]) -> None:
        """Assert conservation of cash and shares, and (with no open orders) zero reservations."""
        totals = self.totals()
        if totals != initial_totals:
            raise AssertionError(f"conservation violated: {initial_totals} -> {totals}")
        for a in self.accounts.values():
            if not self._open[a.agent_id] and (a.reserved_cents or a.reserved_shares):
                raise AssertionError(f"residual reservation on {a.agent_id}: "
                                     f"{a.reserved_cents} cents, {a.reserved_shares} shares")
