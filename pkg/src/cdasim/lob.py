"""Price-time priority limit order book for a single asset.

Prices are integer ticks, quantities integer shares.  Every resting order
sits in a FIFO queue at its price level; incoming orders match best price
first, then earliest arrival within the level.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional

DEFAULT_LOT = 100
DEPTH_LEVELS = 5


class Side(IntEnum):
    BID = 1
    ASK = -1

    @property
    def opposite(self) -> "Side":
        return Side.ASK if self is Side.BID else Side.BID


class Kind(IntEnum):
    LIMIT = 0
    MARKET = 1


class RejectedOrder(ValueError):
    pass


class UnknownOrder(KeyError):
    pass


class EmptySide(RuntimeError):
    """Mid price and spread are undefined while a side of the book is empty."""


@dataclass(slots=True, eq=False)
class Order:
    id: int
    agent_id: str
    side: Side
    kind: Kind
    price: Optional[int]
    quantity: int
    remaining: int = -1
    seq: int = -1

    def __post_init__(self):
        if self.remaining < 0:
            self.remaining = self.quantity


@dataclass(frozen=True, slots=True)
class Trade:
    taker_order_id: int
    maker_order_id: int
    price: int
    quantity: int
    step: int
    taker_agent: str = ""
    maker_agent: str = ""
    taker_side: Side = Side.BID

    @property
    def self_trade(self) -> bool:
        return self.taker_agent == self.maker_agent

    @property
    def buyer(self) -> str:
        return self.taker_agent if self.taker_side is Side.BID else self.maker_agent

    @property
    def seller(self) -> str:
        return self.maker_agent if self.taker_side is Side.BID else self.taker_agent


class _Level:
    __slots__ = ("price", "queue", "total", "live")

    def __init__(self, price: int):
        self.price = price
        self.queue: deque[Order] = deque()
        self.total = 0
        self.live = 0


@dataclass(frozen=True)
class DepthSnapshot:
    """Immutable top-of-book view.

    ``bids``/``asks`` hold up to five ``(price, quantity)`` pairs, best first;
    missing levels are simply absent.  ``attribution`` maps agent id to a
    five-element tuple of that agent's resting shares per level, bid side
    and ask side summed.
    """

    bids: tuple[tuple[int, int], ...]
    asks: tuple[tuple[int, int], ...]
    attribution: dict = field(default_factory=dict)
    step: int = 0

    @property
    def best_bid(self) -> int:
        return self.bids[0][0]

    @property
    def best_ask(self) -> int:
        return self.asks[0][0]

    @property
    def mid(self) -> float:
        return (self.bids[0][0] + self.asks[0][0]) / 2

    @property
    def spread(self) -> int:
        return self.asks[0][0] - self.bids[0][0]

    def volumes(self) -> tuple[int, int]:
        return sum(q for _, q in self.bids), sum(q for _, q in self.asks)

    def imbalance(self) -> float:
        vb, va = self.volumes()
        return (vb - va) / (vb + va)


class OrderBook:
    """Single-asset CDA book.

    The book is mutated by one writer only.  Cancellation is lazy: a
    cancelled order stays in its level's deque with ``remaining == 0`` and is
    skipped by the matcher, so cancels are O(1).
    """

    def __init__(self, lot_size: int = DEFAULT_LOT):
        self.lot_size = lot_size
        self._levels = {Side.BID: {}, Side.ASK: {}}
        # ascending price lists for each side
        self._prices = {Side.BID: [], Side.ASK: []}
        self._orders: dict[int, Order] = {}
        self.seq_counter = 0

    # -- queries ---------------------------------------------------------

    def __contains__(self, order_id: int) -> bool:
        return order_id in self._orders

    def __len__(self) -> int:
        return len(self._orders)

    def get(self, order_id: int) -> Order:
        try:
            return self._orders[order_id]
        except KeyError:
            raise UnknownOrder(order_id) from None

    @property
    def best_bid(self) -> Optional[int]:
        p = self._prices[Side.BID]
        return p[-1] if p else None

    @property
    def best_ask(self) -> Optional[int]:
        p = self._prices[Side.ASK]
        return p[0] if p else None

    def mid2(self) -> Optional[int]:
        """Twice the mid price in ticks (an exact integer), or None."""
        b, a = self._prices[Side.BID], self._prices[Side.ASK]
        if not b or not a:
            return None
        return b[-1] + a[0]

    def mid(self) -> float:
        m = self.mid2()
        if m is None:
            raise EmptySide("mid undefined with an empty side")
        return m / 2

    def spread(self) -> int:
        b, a = self.best_bid, self.best_ask
        if b is None or a is None:
            raise EmptySide("spread undefined with an empty side")
        return a - b

    def level_prices(self, side: Side) -> list[int]:
        """Prices on ``side``, best first."""
        p = self._prices[side]
        return p[::-1] if side is Side.BID else list(p)

    def depth(self, side: Side, n: int = DEPTH_LEVELS) -> list[tuple[int, int]]:
        p = self._prices[side]
        prices = p[-1:-n - 1:-1] if side is Side.BID else p[:n]
        levels = self._levels[side]
        return [(px, levels[px].total) for px in prices]

    def level_orders(self, side: Side, price: int) -> list[Order]:
        lvl = self._levels[side].get(price)
        if lvl is None:
            return []
        return [o for o in lvl.queue if o.remaining > 0]

    def resting(self) -> Iterable[Order]:
        return self._orders.values()

    def snapshot(self, agent_ids: Iterable[str] = (), step: int = 0,
                 n: int = DEPTH_LEVELS) -> DepthSnapshot:
        bids = tuple(self.depth(Side.BID, n))
        asks = tuple(self.depth(Side.ASK, n))
        if not bids or not asks:
            raise EmptySide("snapshot needs both sides of the book")
        return DepthSnapshot(bids, asks, self.attribution(agent_ids, n), step)

    def attribution(self, agent_ids: Iterable[str], n: int = DEPTH_LEVELS) -> dict:
        ids = set(agent_ids)
        if not ids:
            return {}
        out = {a: [0] * n for a in ids}
        for side in (Side.BID, Side.ASK):
            levels = self._levels[side]
            for l, (px, _) in enumerate(self.depth(side, n)):
                for o in levels[px].queue:
                    if o.remaining > 0 and o.agent_id in ids:
                        out[o.agent_id][l] += o.remaining
        return {a: tuple(v) for a, v in out.items()}

    # -- mutation --------------------------------------------------------

    def validate(self, order: Order) -> None:
        if order.quantity <= 0:
            raise RejectedOrder(f"non-positive quantity {order.quantity}")
        if order.quantity % self.lot_size:
            raise RejectedOrder(f"quantity {order.quantity} is not a multiple of lot {self.lot_size}")
        if order.kind is Kind.LIMIT and (order.price is None or order.price < 1):
            raise RejectedOrder(f"limit price {order.price} below one tick")
        if order.id in self._orders:
            raise RejectedOrder(f"duplicate order id {order.id}")

    def submit(self, order: Order, step: int = 0) -> list[Trade]:
        """Match ``order`` against the opposite side and rest any limit remainder.

        A market order that exhausts the opposite side keeps its unfilled
        amount in ``order.remaining``; that remainder is discarded, never rested.
        """
        self.validate(order)
        self.seq_counter += 1
        order.seq = self.seq_counter
        order.remaining = order.quantity
        trades = self._match(order, step)
        if order.kind is Kind.LIMIT and order.remaining > 0:
            self._rest(order)
        return trades

    def cancel(self, order_id: int) -> int:
        """Remove a resting order; returns the quantity that was still open."""
        order = self._orders.pop(order_id, None)
        if order is None:
            raise UnknownOrder(order_id)
        lvl = self._levels[order.side][order.price]
        open_qty = order.remaining
        lvl.total -= open_qty
        lvl.live -= 1
        order.remaining = 0
        if lvl.live == 0:
            self._drop_level(order.side, order.price)
        elif len(lvl.queue) > 2 * lvl.live + 32:
            lvl.queue = deque(o for o in lvl.queue if o.remaining > 0)
        return open_qty

    def _rest(self, order: Order) -> None:
        levels = self._levels[order.side]
        lvl = levels.get(order.price)
        if lvl is None:
            lvl = levels[order.price] = _Level(order.price)
            bisect.insort(self._prices[order.side], order.price)
        lvl.queue.append(order)
        lvl.total += order.remaining
        lvl.live += 1
        self._orders[order.id] = order

    def _drop_level(self, side: Side, price: int) -> None:
        del self._levels[side][price]
        prices = self._prices[side]
        i = bisect.bisect_left(prices, price)
        del prices[i]

    def _match(self, order: Order, step: int) -> list[Trade]:
        trades = []
        opp = order.side.opposite
        prices = self._prices[opp]
        levels = self._levels[opp]
        is_buy = order.side is Side.BID
        limit = order.price if order.kind is Kind.LIMIT else None
        while order.remaining > 0 and prices:
            px = prices[0] if is_buy else prices[-1]
            if limit is not None and (px > limit if is_buy else px < limit):
                break
            lvl = levels[px]
            q = lvl.queue
            while order.remaining > 0 and lvl.live > 0:
                maker = q[0]
                if maker.remaining == 0:
                    q.popleft()
                    continue
                fill = min(order.remaining, maker.remaining)
                order.remaining -= fill
                maker.remaining -= fill
                lvl.total -= fill
                trades.append(Trade(order.id, maker.id, px, fill, step,
                                    order.agent_id, maker.agent_id, order.side))
                if maker.remaining == 0:
                    q.popleft()
                    lvl.live -= 1
                    del self._orders[maker.id]
            if lvl.live == 0:
                del levels[px]
                if is_buy:
                    del prices[0]
                else:
                    prices.pop()
        return trades

    def check_invariants(self) -> None:
        """Raise AssertionError if the book is crossed or a level is inconsistent."""
        bb, ba = self.best_bid, self.best_ask
        assert bb is None or ba is None or bb < ba, f"crossed book {bb} >= {ba}"
        n = 0
        for side in (Side.BID, Side.ASK):
            assert sorted(self._levels[side]) == self._prices[side]
            for px, lvl in self._levels[side].items():
                live = [o for o in lvl.queue if o.remaining > 0]
                assert live, f"empty level {px}"
                assert lvl.total == sum(o.remaining for o in live)
                assert lvl.live == len(live)
                seqs = [o.seq for o in live]
                assert seqs == sorted(seqs)
                n += len(live)
        assert n == len(self._orders)
