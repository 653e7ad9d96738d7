"""Trading agents: RL market makers and liquidity takers, zero-intelligence
traders, the scripted flash-sale seller and the informed-taker schedule."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exchange import Account, CancelIntent, Intent, OrderIntent, UndefinedMid, mark_to_mid
from .lob import DEPTH_LEVELS, Kind, Side
from .nn import Mlp
from .ppo import (CategoricalHead, GaussianHead, NonFiniteLoss, Policy, PpoConfig,
                  RolloutBuffer, ppo_update, tanh_squash)

MM_OBS_DIM = 32
LT_OBS_DIM = 33
INVENTORY_SCALE = 10_000  # shares
DEPTH_SCALE = 5_000  # shares
TAU_SCALE = 100.0

BUY, SELL, SKIP = 0, 1, 2


# -- parameters ------------------------------------------------------------

@dataclass
class MmParams:
    omega: float = 0.5
    gamma_inv: float = 0.15
    alpha: float = 0.09
    target_share: float = 0.5
    eps_s_range: tuple = (-1.0, 1.0)
    eps_a_range: tuple = (-1.0, 1.0)
    u_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.eps_s_range = tuple(float(x) for x in self.eps_s_range)
        self.eps_a_range = tuple(float(x) for x in self.eps_a_range)
        self.u_range = tuple(float(x) for x in self.u_range)
        if not 0 <= self.omega <= 1:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.eps_s_range[1] <= -1:
            raise ValueError("symmetric tweak range must allow values above -1")


@dataclass
class LtParams:
    omega: float = 0.5
    gamma_inv: float = 0.9
    alpha: float = 0.01
    f_buy: float = 0.5
    f_sell: float = 0.5
    tau: int = 60
    order_size: int = 18  # lots
    deviation_mode: str = "delta"  # "delta" | "level"

    def __post_init__(self):
        if not (0 <= self.f_buy <= 1 and 0 <= self.f_sell <= 1):
            raise ValueError("target fractions must lie in [0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be at least one step")
        if not 0 <= self.omega <= 1:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.deviation_mode not in ("delta", "level"):
            raise ValueError(f"unknown deviation mode {self.deviation_mode!r}")


@dataclass
class ZiParams:
    p_market: float = 0.1
    p_limit: float = 0.6
    p_cancel: float = 0.3
    offset: int = 10  # ticks behind the best same-side price

    def __post_init__(self):
        if min(self.p_market, self.p_limit, self.p_cancel) < 0:
            raise ValueError("ZI probabilities must be non-negative")
        if self.p_market + self.p_limit + self.p_cancel > 1 + 1e-12:
            raise ValueError("ZI probabilities sum above one")


# The four market makers and ten liquidity takers used by the RL presets.
DEFAULT_MM = [
    MmParams(0.5, 0.15, 0.09, 0.5, (-1, 1)),
    MmParams(0.5, 0.15, 0.09, 0.5, (-1, 1)),
    MmParams(0.5, 0.15, 0.09, 0.5, (-1, 1)),
    MmParams(0.5, 0.15, 0.09, 1.0, (-1, 2)),
]
DEFAULT_LT = [
    LtParams(0.5, 0.9, 0.01, fb, fs, order_size=18)
    for fb, fs in [(0.2, 0.8), (0.2, 0.6), (0.5, 0.5), (0.6, 0.4), (0.8, 0.2),
                   (0.2, 0.8), (0.4, 0.6), (0.5, 0.5), (0.6, 0.4), (0.8, 0.2)]
]


def jitter(params, rng: np.random.Generator, frac: float = 0.1):
    """Scale omega, gamma_inv and alpha by independent factors in [1-frac, 1+frac]."""
    f = rng.uniform(1 - frac, 1 + frac, size=3)
    return replace(params, omega=min(1.0, params.omega * f[0]),
                   gamma_inv=params.gamma_inv * f[1], alpha=params.alpha * f[2])


# -- market view -----------------------------------------------------------

@dataclass(frozen=True)
class MarketView:
    """What every agent sees at the start of a step (prices in ticks)."""

    step: int
    bids: tuple
    asks: tuple
    mid: Optional[float]  # None while a side is empty
    last_mid: float  # most recent defined mid
    last_spread: int
    mid_history: tuple  # last five defined-or-carried mids, oldest first
    attribution: dict = field(default_factory=dict)

    @property
    def best_bid(self) -> Optional[int]:
        return self.bids[0][0] if self.bids else None

    @property
    def best_ask(self) -> Optional[int]:
        return self.asks[0][0] if self.asks else None

    @property
    def spread(self) -> Optional[int]:
        if not self.bids or not self.asks:
            return None
        return self.asks[0][0] - self.bids[0][0]

    def imbalance(self) -> float:
        vb = sum(q for _, q in self.bids)
        va = sum(q for _, q in self.asks)
        return (vb - va) / (vb + va) if vb + va else 0.0


# -- market maker maths ----------------------------------------------------

def mm_quote_prices(mid: float, spread: float, eps_s: float, eps_a: float):
    """Quote prices before tick rounding.

    ask = mid + s * ((1 + eps_s) / 2 + eps_a); bid = mid - s * ((1 + eps_s) / 2 - eps_a).
    """
    if mid is None or not math.isfinite(mid):
        raise UndefinedMid("no mid price to quote around")
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    half = (1 + eps_s) / 2
    return mid - spread * (half - eps_a), mid + spread * (half + eps_a)


def round_quotes(p_bid: float, p_ask: float) -> tuple[int, int]:
    """Round outward to integer ticks; widen both sides a tick if they touch or cross."""
    b = math.floor(p_bid + 1e-9)
    a = math.ceil(p_ask - 1e-9)
    if b >= a:
        b -= 1
        a += 1
    return b, a


def liquidity_provision(attribution: dict, mm_ids: Sequence[str]):
    """Each market maker's share of all market-maker shares in the top five levels.

    Returns ``(shares, ok)``; with no market-maker liquidity resting, every
    share is 0 and ``ok`` is False.
    """
    totals = {i: float(sum(attribution.get(i, ())[:DEPTH_LEVELS])) for i in mm_ids}
    denom = sum(totals.values())
    if denom <= 0:
        return {i: 0.0 for i in mm_ids}, False
    return {i: v / denom for i, v in totals.items()}, True


def pnl_term(d_pnl: float, d_pnl_inv: float, omega: float, alpha: float, gamma_inv: float) -> float:
    return omega * alpha * (d_pnl - gamma_inv * abs(d_pnl_inv))


def mm_reward(d_pnl: float, d_pnl_inv: float, share: float, params: MmParams) -> float:
    return (pnl_term(d_pnl, d_pnl_inv, params.omega, params.alpha, params.gamma_inv)
            - (1 - params.omega) * abs(share - params.target_share))


def lt_deviation(target: float, n_exec: int, tau: int) -> float:
    return abs(target - n_exec / tau)


def lt_reward(d_pnl: float, d_pnl_inv: float, dev_buy: float, dev_buy_prev: float,
              dev_sell: float, dev_sell_prev: float, params: LtParams) -> float:
    """Taker reward; the frequency term uses the step-to-step change in each
    deviation ("delta", default) or the deviations themselves ("level")."""
    base = pnl_term(d_pnl, d_pnl_inv, params.omega, params.alpha, params.gamma_inv)
    if params.deviation_mode == "delta":
        freq = (dev_buy - dev_buy_prev) + (dev_sell - dev_sell_prev)
    else:
        freq = dev_buy + dev_sell
    return base - (1 - params.omega) / 2 * freq


def mm_action_values(raw: np.ndarray, params: MmParams) -> tuple[float, float, float]:
    """Squash a raw 3-vector into (u, eps_s, eps_a) within the configured ranges."""
    u = float(tanh_squash(raw[0], *params.u_range))
    es = float(tanh_squash(raw[1], *params.eps_s_range))
    ea = float(tanh_squash(raw[2], *params.eps_a_range))
    return u, es, ea


def mm_step(u: float, eps_s: float, eps_a: float, mid: Optional[float], spread: Optional[float],
            account: Account, open_orders: dict, lot: int) -> list[Intent]:
    """Cancel-replace quoting for one market maker.

    All of the agent's live orders are cancelled, then a bid and an ask of
    ``floor(u * BP / (2 * mid))`` shares (rounded down to lots) are placed at
    the rounded quote prices.  ``mid``/``spread`` are in ticks.  Raises
    UndefinedMid when there is no mid.
    """
    if mid is None:
        raise UndefinedMid("market maker skips without a mid")
    intents: list[Intent] = [CancelIntent(oid) for oid in open_orders]
    if u <= 0:
        return intents
    freed_cash = sum(o.price * o.remaining for o in open_orders.values()
                     if o.side is Side.BID and o.kind is Kind.LIMIT)
    freed_shares = sum(o.remaining for o in open_orders.values() if o.side is Side.ASK)
    bp_cents = account.buying_power_cents + freed_cash
    shares = int(u * bp_cents / (2 * mid))  # cents / ticks = shares
    size = shares - shares % lot
    if size < lot:
        return intents
    b, a = round_quotes(*mm_quote_prices(mid, spread, eps_s, eps_a))
    b = max(b, 1)
    a = max(a, b + 1)
    bid_size = min(size, (bp_cents // b) // lot * lot)
    sellable = account.sellable_shares + freed_shares
    ask_size = min(size, max(sellable, 0) // lot * lot)
    if bid_size >= lot:
        intents.append(OrderIntent(Side.BID, Kind.LIMIT, bid_size, b))
    if ask_size >= lot:
        intents.append(OrderIntent(Side.ASK, Kind.LIMIT, ask_size, a))
    return intents


def lt_step(action: int, params: LtParams, lot: int) -> Optional[OrderIntent]:
    if action == BUY:
        return OrderIntent(Side.BID, Kind.MARKET, params.order_size * lot)
    if action == SELL:
        return OrderIntent(Side.ASK, Kind.MARKET, params.order_size * lot)
    return None


def zi_step(rng: np.random.Generator, view: MarketView, params: ZiParams,
            open_ids: Sequence[int], lot: int) -> Optional[Intent]:
    """One zero-intelligence decision: market, limit, cancel or nothing.

    Limit bids are uniform on [best_bid - offset, best_ask - 1] (asks mirrored).
    A side that is empty is replaced by the last mid so the price range stays
    defined.
    """
    u = rng.random()
    side = Side.BID if rng.random() < 0.5 else Side.ASK
    if u < params.p_market:
        return OrderIntent(side, Kind.MARKET, lot)
    u -= params.p_market
    if u < params.p_limit:
        ref = int(round(view.last_mid))
        bb = view.best_bid if view.best_bid is not None else ref - 1
        ba = view.best_ask if view.best_ask is not None else ref + 1
        if bb >= ba:
            bb, ba = ref - 1, ref + 1
        if side is Side.BID:
            lo, hi = bb - params.offset, ba - 1
        else:
            lo, hi = bb + 1, ba + params.offset
        price = max(1, int(rng.integers(lo, hi + 1)))
        return OrderIntent(side, Kind.LIMIT, lot, price)
    u -= params.p_limit
    if u < params.p_cancel:
        if not open_ids:
            return None
        return CancelIntent(open_ids[int(rng.integers(len(open_ids)))])
    return None


@dataclass(frozen=True)
class FlashSchedule:
    n_events: int = 88
    active: int = 5
    idle: int = 400
    lots: int = 300
    start: int = 0

    @property
    def period(self) -> int:
        return self.active + self.idle

    def is_active(self, step: int) -> bool:
        k = step - self.start
        if k < 0 or self.n_events <= 0:
            return False
        event, phase = divmod(k, self.period)
        return event < self.n_events and phase < self.active

    def event_starts(self, n_steps: int) -> list[int]:
        return [self.start + e * self.period for e in range(self.n_events)
                if self.start + e * self.period < n_steps]

    @property
    def total_shares_per_event(self) -> int:
        return self.active * self.lots


def flash_sale_step(step: int, schedule: FlashSchedule, lot: int) -> Optional[OrderIntent]:
    if schedule.is_active(step):
        return OrderIntent(Side.ASK, Kind.MARKET, schedule.lots * lot)
    return None


DEFAULT_INFORMED_PHASES = ((0.3, 0.4), (0.4, 0.35), (0.4, 0.4), (0.4, 0.3))


def informed_schedule(step: int, phase_steps: int = 10_000,
                      phases: Sequence = DEFAULT_INFORMED_PHASES) -> tuple[float, float]:
    """(f_buy, f_sell) targets in force at ``step``; the last phase holds forever."""
    i = min(max(step, 0) // phase_steps, len(phases) - 1)
    fb, fs = phases[i]
    return float(fb), float(fs)


# -- observations ------------------------------------------------------------

def _book_features(view: MarketView, mid: float) -> np.ndarray:
    out = np.zeros(20)
    for j, (px, q) in enumerate(view.bids[:DEPTH_LEVELS]):
        out[j] = (px / mid - 1.0) * 100.0
        out[5 + j] = q / DEPTH_SCALE
    for j, (px, q) in enumerate(view.asks[:DEPTH_LEVELS]):
        out[10 + j] = (px / mid - 1.0) * 100.0
        out[15 + j] = q / DEPTH_SCALE
    return out


def _common_features(view: MarketView, account: Account, initial_price: float):
    mid = view.mid if view.mid is not None else view.last_mid
    mids = (np.asarray(view.mid_history, dtype=np.float64) / initial_price - 1.0) * 100.0
    bp = account.buying_power / account.initial_cash if account.initial_cash > 0 else 0.0
    return mids, _book_features(view, mid), account.inventory / INVENTORY_SCALE, bp


def mm_observation(view: MarketView, account: Account, share: float, params: MmParams,
                   initial_price: float) -> np.ndarray:
    mids, book, inv, bp = _common_features(view, account, initial_price)
    tail = [share, inv, bp, params.omega, params.gamma_inv, params.alpha, params.target_share]
    return np.concatenate([mids, book, tail])


def lt_observation(view: MarketView, account: Account, params: LtParams,
                   initial_price: float) -> np.ndarray:
    mids, book, inv, bp = _common_features(view, account, initial_price)
    tail = [inv, bp, params.omega, params.gamma_inv, params.alpha, params.f_buy,
            params.f_sell, params.tau / TAU_SCALE]
    return np.concatenate([mids, book, tail])


# -- agents ----------------------------------------------------------------

class Agent:
    kind = "base"
    learns = False

    def __init__(self, agent_id: str):
        self.agent_id = agent_id

    def act(self, view: MarketView, exchange) -> list[Intent]:
        raise NotImplementedError


class ZiAgent(Agent):
    kind = "zi"

    def __init__(self, agent_id: str, params: ZiParams, rng: np.random.Generator, lot: int):
        super().__init__(agent_id)
        self.params = params
        self.rng = rng
        self.lot = lot

    def act(self, view, exchange):
        intent = zi_step(self.rng, view, self.params, list(exchange.open_orders(self.agent_id)),
                         self.lot)
        return [] if intent is None else [intent]


class FlashSaleAgent(Agent):
    kind = "flash"

    def __init__(self, agent_id: str, schedule: FlashSchedule, lot: int):
        super().__init__(agent_id)
        self.schedule = schedule
        self.lot = lot

    def act(self, view, exchange):
        intent = flash_sale_step(view.step, self.schedule, self.lot)
        return [] if intent is None else [intent]


class RlAgent(Agent):
    """Shared machinery: policy/value nets, rollout buffer, mark-to-mid PnL tracking."""

    learns = True
    obs_dim = 0

    def __init__(self, agent_id: str, policy: Policy, value_net: Mlp, ppo: PpoConfig,
                 rng: np.random.Generator, lot: int, initial_price: float, training: bool):
        super().__init__(agent_id)
        self.policy = policy
        self.value_net = value_net
        self.ppo = ppo
        self.rng = rng
        self.lot = lot
        self.initial_price = initial_price
        self.training = training
        act_dim = policy.head.dim if policy.head.kind == "gaussian" else 1
        self.buffer = RolloutBuffer(ppo.capacity, policy.obs_dim, act_dim)
        self.pending = None  # (obs, raw action, log_prob, value)
        self.prev_pnl: Optional[float] = None
        self.prev_mid: Optional[float] = None
        self.prev_inventory = 0
        self.updates: list[dict] = []
        self.last_record: Optional[dict] = None
        self.record_obs = False
        self.obs_log: list[tuple[int, np.ndarray]] = []

    def pnl_deltas(self, account: Account, mid: float) -> tuple[float, float, float]:
        pnl = mark_to_mid(account, mid)
        if self.prev_pnl is None:
            d, d_inv = 0.0, 0.0
        else:
            d = pnl - self.prev_pnl
            d_inv = self.prev_inventory * (mid - self.prev_mid) / 100
        self.prev_pnl, self.prev_mid, self.prev_inventory = pnl, mid, account.inventory
        return pnl, d, d_inv

    def finish_transition(self, reward: float, next_obs: np.ndarray) -> None:
        if self.pending is None:
            return
        obs, raw, logp, value = self.pending
        self.pending = None
        if not self.training:
            return
        self.buffer.add(obs, raw, logp, reward, value)
        if self.buffer.full:
            boot = float(self.value_net.forward(next_obs)[0])
            try:
                diag = ppo_update(self.policy, self.value_net, self.buffer, self.ppo, self.rng, boot)
            except NonFiniteLoss as e:
                raise NonFiniteLoss(f"agent {self.agent_id}: {e}") from e
            diag["step"] = self.last_record["step"] if self.last_record else -1
            self.updates.append(diag)

    def choose(self, obs: np.ndarray):
        raw, logp = self.policy.act(obs, self.rng)
        value = float(self.value_net.forward(obs)[0])
        self.pending = (obs, raw, logp, value)
        return raw


class MarketMakerAgent(RlAgent):
    kind = "mm"
    obs_dim = MM_OBS_DIM

    def __init__(self, agent_id, params: MmParams, *args, mm_ids: Sequence[str] = (),
                 stale_quotes: bool = True, **kw):
        super().__init__(agent_id, *args, **kw)
        self.params = params
        self.mm_ids = list(mm_ids)
        self.stale_quotes = stale_quotes
        self.last_action = (0.0, 0.0, 0.0)

    def act(self, view: MarketView, exchange) -> list[Intent]:
        account = exchange.accounts[self.agent_id]
        mid = view.mid
        spread = view.spread
        if mid is None:
            if not self.stale_quotes:
                self.last_record = None
                return []
            mid, spread = view.last_mid, view.last_spread
        shares, ok = liquidity_provision(view.attribution, self.mm_ids or [self.agent_id])
        share = shares.get(self.agent_id, 0.0)
        pnl, d, d_inv = self.pnl_deltas(account, mid)
        reward = mm_reward(d, d_inv, share, self.params)
        obs = mm_observation(view, account, share, self.params, self.initial_price)
        self.finish_transition(reward, obs)
        if self.record_obs:
            self.obs_log.append((view.step, obs))
        raw = self.choose(obs)
        u, es, ea = mm_action_values(raw, self.params)
        self.last_action = (u, es, ea)
        self.last_record = {"step": view.step, "agent": self.agent_id, "reward": reward,
                            "pnl": pnl, "d_pnl": d, "d_pnl_inv": d_inv, "share": share,
                            "share_ok": ok, "u": u, "eps_s": es, "eps_a": ea}
        return mm_step(u, es, ea, mid, spread, account, exchange.open_orders(self.agent_id),
                       self.lot)


class LiquidityTakerAgent(RlAgent):
    kind = "lt"
    obs_dim = LT_OBS_DIM

    def __init__(self, agent_id, params: LtParams, *args, **kw):
        super().__init__(agent_id, *args, **kw)
        self.params = params
        self.window: deque[tuple[int, int]] = deque()  # (step, BUY|SELL) of executed orders
        self.n_buy = 0
        self.n_sell = 0
        self.dev_prev: Optional[tuple[float, float]] = None
        self._counted: set[int] = set()

    def set_targets(self, f_buy: float, f_sell: float) -> None:
        if (f_buy, f_sell) != (self.params.f_buy, self.params.f_sell):
            self.params = replace(self.params, f_buy=f_buy, f_sell=f_sell)

    def record_execution(self, order_id: int, step: int, side: Side) -> None:
        """Count an order once, the first time it trades."""
        if order_id in self._counted:
            return
        self._counted.add(order_id)
        d = BUY if side is Side.BID else SELL
        self.window.append((step, d))
        if d == BUY:
            self.n_buy += 1
        else:
            self.n_sell += 1

    def _roll_window(self, last_step: int) -> None:
        lo = last_step - self.params.tau + 1
        w = self.window
        while w and w[0][0] < lo:
            _, d = w.popleft()
            if d == BUY:
                self.n_buy -= 1
            else:
                self.n_sell -= 1

    def act(self, view: MarketView, exchange) -> list[Intent]:
        account = exchange.accounts[self.agent_id]
        mid = view.mid if view.mid is not None else view.last_mid
        p = self.params
        self._roll_window(view.step - 1)
        self._counted.clear()
        dev_b = lt_deviation(p.f_buy, self.n_buy, p.tau)
        dev_s = lt_deviation(p.f_sell, self.n_sell, p.tau)
        prev_b, prev_s = self.dev_prev if self.dev_prev is not None else (dev_b, dev_s)
        self.dev_prev = (dev_b, dev_s)
        pnl, d, d_inv = self.pnl_deltas(account, mid)
        reward = lt_reward(d, d_inv, dev_b, prev_b, dev_s, prev_s, p)
        obs = lt_observation(view, account, p, self.initial_price)
        self.finish_transition(reward, obs)
        if self.record_obs:
            self.obs_log.append((view.step, obs))
        action = int(self.choose(obs))
        self.last_record = {"step": view.step, "agent": self.agent_id, "reward": reward,
                            "pnl": pnl, "d_pnl": d, "d_pnl_inv": d_inv, "n_buy": self.n_buy,
                            "n_sell": self.n_sell, "action": action,
                            "f_buy": p.f_buy, "f_sell": p.f_sell}
        intent = lt_step(action, p, self.lot)
        return [] if intent is None else [intent]


def build_policy(kind: str, rng: np.random.Generator, hidden=(64, 64)):
    """Fresh policy and value net for an agent class ("mm" or "lt")."""
    if kind == "mm":
        pol = Policy(MM_OBS_DIM, GaussianHead(3), hidden, rng=rng)
        vnet = Mlp((MM_OBS_DIM, *hidden, 1), rng=rng)
    elif kind == "lt":
        pol = Policy(LT_OBS_DIM, CategoricalHead(3), hidden, rng=rng)
        vnet = Mlp((LT_OBS_DIM, *hidden, 1), rng=rng)
    else:
        raise ValueError(f"no policy for agent kind {kind!r}")
    return pol, vnet


def params_to_dict(p) -> dict:
    return asdict(p)
