"""Experiment orchestration: book genesis, agent roster, the step loop,
logging, checkpoints and the matched-group protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .agents import (FlashSaleAgent, LiquidityTakerAgent, LtParams, MarketMakerAgent,
                     MarketView, MmParams, RlAgent, ZiAgent, ZiParams, build_policy,
                     informed_schedule, jitter)
from .config import ConfigInvalid, ExperimentConfig, load_config
from .exchange import Account, Exchange, OrderIntent, mark_to_mid2_exact
from .lob import DEPTH_LEVELS, Kind, RejectedOrder, Side, UnknownOrder
from .ppo import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

UTILITY_ID = "utility"
SEED_LEVELS = 5
SEED_LOTS = 10


# -- genesis ---------------------------------------------------------------

def seed_book(exchange: Exchange, initial_price_ticks: int, owner: str = UTILITY_ID,
              levels: int = SEED_LEVELS, lots: int = SEED_LOTS) -> None:
    """Rest a symmetric ladder around the initial price: ``levels`` price
    levels per side, one tick apart, starting one tick away from it."""
    if initial_price_ticks <= levels:
        raise ValueError("initial price too low for the seed ladder")
    q = lots * exchange.lot_size
    for k in range(1, levels + 1):
        exchange.route(owner, OrderIntent(Side.BID, Kind.LIMIT, q, initial_price_ticks - k))
        exchange.route(owner, OrderIntent(Side.ASK, Kind.LIMIT, q, initial_price_ticks + k))
    exchange.drain()


def _utility_account(cfg: ExperimentConfig) -> Account:
    p = cfg.initial_price_ticks
    q = SEED_LOTS * cfg.lot_size
    cash = sum((p - k) * q for k in range(1, SEED_LEVELS + 1)) / 100
    return Account.open(UTILITY_ID, cash, SEED_LEVELS * q, short_bound=0, initial_mid=p)


# -- event log -------------------------------------------------------------

@dataclass
class EventLog:
    """Everything a run produced, in memory.  Money in the account rows is in
    half-cents so the PnL decomposition is exact."""

    mids: list = field(default_factory=list)  # start-of-step mid in ticks, nan if undefined
    snapshots: list = field(default_factory=list)  # (step, mid, bids, asks)
    trades: list = field(default_factory=list)
    account_rows: list = field(default_factory=list)
    reward_rows: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    events: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)
    rejections: dict = field(default_factory=dict)
    unfilled: list = field(default_factory=list)
    agent_kinds: dict = field(default_factory=dict)

    def mid_series(self) -> np.ndarray:
        return np.asarray(self.mids, dtype=np.float64)


@dataclass
class RunResult:
    config: ExperimentConfig
    log: EventLog
    exchange: Exchange
    agents: list
    checkpoints: dict = field(default_factory=dict)  # agent id -> path
    out_dir: Optional[Path] = None
    manifest: Optional[dict] = None

    def agent(self, agent_id: str):
        return next(a for a in self.agents if a.agent_id == agent_id)


# -- roster ----------------------------------------------------------------

def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _expand_roster(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    counters: dict[str, int] = {}
    out = []
    for entry in cfg.agents:
        cls = entry["class"]
        for _ in range(int(entry.get("count", 1))):
            counters[cls] = counters.get(cls, 0) + 1
            aid = entry.get("id") if int(entry.get("count", 1)) == 1 and "id" in entry \
                else f"{cls}{counters[cls]}"
            out.append((aid, entry))
    ids = [a for a, _ in out]
    if len(set(ids)) != len(ids) or UTILITY_ID in ids:
        raise ConfigInvalid("agent ids must be unique and not 'utility'")
    return out


_MM_KEYS = ("omega", "gamma_inv", "alpha", "target_share", "eps_s_range", "eps_a_range")
_LT_KEYS = ("omega", "gamma_inv", "alpha", "f_buy", "f_sell", "tau", "order_size",
            "deviation_mode")
_ZI_KEYS = ("p_market", "p_limit", "p_cancel", "offset")


def _pick(entry: dict, keys) -> dict:
    return {k: entry[k] for k in keys if k in entry}


def build_market(cfg: ExperimentConfig, checkpoint_dir: Optional[str] = None,
                 training: Optional[bool] = None):
    """Create the exchange, accounts, seeded book and agents for ``cfg``."""
    seed = int(cfg.seed)
    ex = Exchange(cfg.lot_size, cfg.latency_model, seed=int(_stream(seed, 1).integers(2**63)),
                  record_events=cfg.record_events)
    p0 = cfg.initial_price_ticks
    ex.open_account(_utility_account(cfg))
    roster = _expand_roster(cfg)
    endow = _stream(seed, 2)
    jit = _stream(seed, 3)
    ppo_cfg = cfg.ppo_config
    train = cfg.training_enabled if training is None else training
    ckpt_dir = checkpoint_dir if checkpoint_dir is not None else cfg.checkpoint_dir
    mm_ids = [aid for aid, e in roster if e["class"] == "mm"]
    agents = []
    loaded = {}
    for idx, (aid, entry) in enumerate(roster):
        cls = entry["class"]
        if cls == "flash":
            sched = cfg.flash_schedule
            if sched is None:
                raise ConfigInvalid("flash agent needs a 'flash' schedule block")
            shares = sched.n_events * sched.active * sched.lots * cfg.lot_size
            ex.open_account(Account.open(aid, 0.0, shares, short_bound=0, initial_mid=p0))
            agents.append(FlashSaleAgent(aid, sched, cfg.lot_size))
            continue
        cash = float(endow.uniform(*cfg.cash_range))
        lo, hi = cfg.inventory_lots_range
        inv = int(endow.integers(lo, hi + 1)) * cfg.lot_size
        cash = round(cash, 2)
        ex.open_account(Account.open(aid, cash, inv, short_bound=cfg.short_bound, initial_mid=p0))
        if cls == "zi":
            agents.append(ZiAgent(aid, ZiParams(**_pick(entry, _ZI_KEYS)),
                                  _stream(seed, 300, idx), cfg.lot_size))
            continue
        init_rng = _stream(seed, 200, idx)
        act_rng = _stream(seed, 300, idx)
        policy, vnet = build_policy(cls, init_rng)
        if ckpt_dir:
            path = Path(ckpt_dir) / f"{aid}.ckpt"
            if not path.exists():
                raise ConfigInvalid(f"missing checkpoint {path}")
            ck = load_checkpoint(path)
            if ck["policy"].sizes != policy.sizes or tuple(ck["value_net"].sizes) != vnet.sizes:
                raise ConfigInvalid(f"{path}: network shape does not match agent {aid}")
            policy, vnet = ck["policy"], ck["value_net"]
            loaded[aid] = _sha256(path)
        common = dict(rng=act_rng, lot=cfg.lot_size, initial_price=p0, training=train)
        if cls == "mm":
            params = MmParams(**_pick(entry, _MM_KEYS))
            if cfg.jitter:
                params = jitter(params, jit, cfg.jitter)
            agent = MarketMakerAgent(aid, params, policy, vnet, ppo_cfg, mm_ids=mm_ids,
                                     stale_quotes=cfg.mm_stale_quotes, **common)
        else:
            params = LtParams(**_pick(entry, _LT_KEYS))
            if cfg.jitter:
                params = jitter(params, jit, cfg.jitter)
            agent = LiquidityTakerAgent(aid, params, policy, vnet, ppo_cfg, **common)
        agent.record_obs = cfg.record_observations
        agents.append(agent)
    seed_book(ex, p0)
    return ex, agents, loaded


# -- step loop -------------------------------------------------------------

class _Recorder:
    """Per-step bookkeeping shared by the stepped and realtime loops."""

    def __init__(self, cfg: ExperimentConfig, ex: Exchange, agents: list):
        self.cfg = cfg
        self.ex = ex
        self.agents = agents
        self.log = EventLog()
        self.log.agent_kinds = {a.agent_id: a.kind for a in agents}
        self.log.agent_kinds[UTILITY_ID] = "utility"
        self.mm_ids = [a.agent_id for a in agents if a.kind == "mm"]
        self.lts = {a.agent_id: a for a in agents if a.kind == "lt"}
        p0 = cfg.initial_price_ticks
        self.last_mid2 = 2 * p0
        self.last_spread = 2
        self.history = [float(p0)] * 5
        self.pnl_state = {aid: [a.inventory, 0] for aid, a in ex.accounts.items()}
        self.prev_mid2 = self.last_mid2
        ex.on_fill = self._on_fill
        self.informed = cfg.informed

    def _on_fill(self, trade, taker_order) -> None:
        lt = self.lts.get(trade.taker_agent)
        if lt is not None and taker_order.kind is Kind.MARKET:
            lt.record_execution(taker_order.id, trade.step, trade.taker_side)

    def view(self, step: int) -> MarketView:
        book = self.ex.book
        bids = tuple(book.depth(Side.BID, DEPTH_LEVELS))
        asks = tuple(book.depth(Side.ASK, DEPTH_LEVELS))
        mid2 = book.mid2()
        if mid2 is not None:
            self.last_mid2 = mid2
            self.last_spread = asks[0][0] - bids[0][0]
            mid = mid2 / 2
        else:
            mid = None
        self.history = self.history[1:] + [self.last_mid2 / 2]
        attribution = book.attribution(self.mm_ids) if self.mm_ids else {}
        self.log.mids.append(mid if mid is not None else math.nan)
        self.log.snapshots.append((step, mid, bids, asks))
        if self.ex.record_events:
            self.ex._emit("Snapshot", (mid, bids, asks))
        if self.informed:
            fb, fs = informed_schedule(step, int(self.informed.get("phase_steps", 10_000)),
                                       self.informed.get("phases") or
                                       ((0.3, 0.4), (0.4, 0.35), (0.4, 0.4), (0.4, 0.3)))
            for lt in self.lts.values():
                lt.set_targets(fb, fs)
        return MarketView(step, bids, asks, mid, self.last_mid2 / 2, self.last_spread,
                          tuple(self.history), attribution)

    def submit(self, agent, intents) -> None:
        ex = self.ex
        for intent in intents:
            try:
                ex.route(agent.agent_id, intent)
            except (RejectedOrder, UnknownOrder) as e:
                key = (agent.agent_id, type(e).__name__)
                self.log.rejections[key] = self.log.rejections.get(key, 0) + 1

    def end_step(self, step: int) -> None:
        for a in self.agents:
            rec = getattr(a, "last_record", None)
            if rec is not None and rec["step"] == step:
                self.log.reward_rows.append(rec)
        if self.cfg.account_every and step % self.cfg.account_every == 0:
            self.record_accounts(step)

    def record_accounts(self, step: int) -> None:
        mid2 = self.ex.book.mid2()
        if mid2 is None:
            mid2 = self.last_mid2
        d_mid2 = mid2 - self.prev_mid2
        self.prev_mid2 = mid2
        rows = self.log.account_rows
        state = self.pnl_state
        for aid, acct in self.ex.accounts.items():
            st = state[aid]
            st[1] += st[0] * d_mid2  # inventory held since the last record
            st[0] = acct.inventory
            total = mark_to_mid2_exact(acct, mid2)
            rows.append((step, aid, acct.cash_cents, acct.inventory, total, st[1],
                         total - st[1], mid2))


def _run_stepped(cfg: ExperimentConfig, ex: Exchange, agents: list, rec: _Recorder) -> None:
    shuffle = _stream(int(cfg.seed), 4)
    n = len(agents)
    for step in range(cfg.n_steps):
        ex.step = step
        view = rec.view(step)
        for i in shuffle.permutation(n):
            agent = agents[i]
            rec.submit(agent, agent.act(view, ex))
        ex.drain(step)
        rec.end_step(step)


class _ExchangeView:
    """Copy of the account and open orders an agent needs, taken under the lock."""

    def __init__(self, ex: Exchange, agent_id: str):
        a = ex.accounts[agent_id]
        self.accounts = {agent_id: Account(**{k: getattr(a, k) for k in a.__dataclass_fields__})}
        self._open = {agent_id: dict(ex.open_orders(agent_id))}

    def open_orders(self, agent_id):
        return self._open[agent_id]


def _run_realtime(cfg: ExperimentConfig, ex: Exchange, agents: list, rec: _Recorder) -> None:
    """Free-running agent threads feeding one matcher loop paced by the wall clock."""
    lock = threading.Lock()
    intents: queue.Queue = queue.Queue()
    tick = threading.Condition()
    state = {"view": None, "stop": False, "step": -1}
    errors: list = []

    def agent_loop(agent):
        seen = -1
        try:
            while True:
                with tick:
                    tick.wait_for(lambda: state["stop"] or state["step"] > seen)
                    if state["stop"]:
                        return
                    view, seen = state["view"], state["step"]
                with lock:
                    proxy = _ExchangeView(ex, agent.agent_id)
                out = agent.act(view, proxy)
                intents.put((seen, agent, out))
        except Exception as e:  # surfaced by the matcher
            errors.append(e)

    threads = [threading.Thread(target=agent_loop, args=(a,), daemon=True) for a in agents]
    for t in threads:
        t.start()
    try:
        for step in range(cfg.n_steps):
            t0 = time.monotonic()
            with lock:
                ex.step = step
                view = rec.view(step)
            with tick:
                state["view"], state["step"] = view, step
                tick.notify_all()
            deadline = t0 + cfg.step_seconds
            while time.monotonic() < deadline:
                try:
                    _, agent, out = intents.get(timeout=max(deadline - time.monotonic(), 1e-4))
                except queue.Empty:
                    break
                with lock:
                    rec.submit(agent, out)
            with lock:
                while True:
                    try:
                        _, agent, out = intents.get_nowait()
                    except queue.Empty:
                        break
                    rec.submit(agent, out)
                ex.drain(step)
                rec.end_step(step)
            if errors:
                raise errors[0]
    finally:
        with tick:
            state["stop"] = True
            tick.notify_all()
        for t in threads:
            t.join(timeout=5)


def run(config, out_dir=None, force: bool = False, checkpoint_dir: Optional[str] = None,
        training: Optional[bool] = None) -> RunResult:
    """Run one simulation and, if ``out_dir`` is given, write its outputs there.

    Conservation of cash and shares, and zero residual reservations after
    every open order is cancelled, are asserted before returning.
    """
    cfg = load_config(config).validate()
    if out_dir is not None:
        out_dir = _prepare_out(out_dir, force)
    ex, agents, loaded = build_market(cfg, checkpoint_dir, training)
    totals = ex.totals()
    rec = _Recorder(cfg, ex, agents)
    if cfg.n_steps > 0:
        if cfg.mode == "stepped":
            _run_stepped(cfg, ex, agents, rec)
        else:
            _run_realtime(cfg, ex, agents, rec)
    ex.cancel_all()
    ex.audit(totals)
    lg = rec.log
    lg.trades = ex.trades
    lg.events = ex.events
    lg.unfilled = ex.unfilled
    for a in agents:
        if isinstance(a, RlAgent):
            lg.updates.extend({"agent": a.agent_id, **d} for d in a.updates)
            if a.obs_log:
                steps = np.array([s for s, _ in a.obs_log], dtype=np.int64)
                lg.observations[a.agent_id] = (steps, np.stack([o for _, o in a.obs_log]))
    result = RunResult(cfg, lg, ex, agents, out_dir=out_dir)
    if out_dir is not None:
        write_outputs(result, loaded)
    return result


def pretrain(config, out_dir=None, force: bool = False, steps: Optional[int] = None) -> RunResult:
    """Train freshly initialised agents for ``pretrain_steps`` in a quiet market
    (flash agent inert, no informed schedule) and save their checkpoints."""
    cfg = load_config(config)
    n = cfg.pretrain_steps if steps is None else steps
    flash = dict(cfg.flash, n_events=0) if cfg.flash else None
    cfg = cfg.replace(n_steps=n, group="untrained", checkpoint_dir=None, training=None,
                      flash=flash, informed=None)
    return run(cfg, out_dir, force=force, training=True)


def matched_groups(config, out_dir, force: bool = False) -> dict:
    """Untrained (C), pretrain, then testing (B) and continual training (A)
    from the same post-pretrain checkpoints."""
    cfg = load_config(config)
    out = Path(out_dir)
    res = {"C": run(cfg.replace(group="untrained", checkpoint_dir=None), out / "C", force)}
    pre = pretrain(cfg, out / "pretrain", force)
    ck = str(out / "pretrain" / "checkpoints")
    res["pretrain"] = pre
    res["B"] = run(cfg.replace(group="testing", checkpoint_dir=ck, training=None), out / "B", force)
    res["A"] = run(cfg.replace(group="continual_training", checkpoint_dir=ck, training=None),
                   out / "A", force)
    return res


# -- output ----------------------------------------------------------------

def _prepare_out(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


TRADE_COLUMNS = ["step", "price_ticks", "quantity", "taker_agent", "maker_agent",
                 "self_trade_flag", "taker_side", "taker_order_id", "maker_order_id"]
ACCOUNT_COLUMNS = ["step", "agent_id", "cash", "inventory", "pnl_total", "pnl_inventory",
                   "pnl_spread", "mid"]


def _fmt_half_cents(v: int) -> str:
    return f"{v / 200:.3f}"


def write_outputs(result: RunResult, loaded: Optional[dict] = None) -> dict:
    out = result.out_dir
    lg = result.log
    cfg = result.config
    with open(out / "trades.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRADE_COLUMNS)
        for t in lg.trades:
            w.writerow([t.step, t.price, t.quantity, t.taker_agent, t.maker_agent,
                        int(t.self_trade), "B" if t.taker_side is Side.BID else "S",
                        t.taker_order_id, t.maker_order_id])
    with open(out / "accounts.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ACCOUNT_COLUMNS)
        for step, aid, cash, inv, tot, pinv, pspr, mid2 in lg.account_rows:
            w.writerow([step, aid, f"{cash / 100:.2f}", inv, _fmt_half_cents(tot),
                        _fmt_half_cents(pinv), _fmt_half_cents(pspr), _fmt_half_cents(mid2)])
    with open(out / "snapshots.jsonl", "w") as f:
        for step, mid, bids, asks in lg.snapshots:
            f.write(json.dumps({"step": step, "mid": mid, "bids": bids, "asks": asks}) + "\n")
    if lg.reward_rows:
        cols = []
        for r in lg.reward_rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        with open(out / "rewards.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, restval="")
            w.writeheader()
            for r in lg.reward_rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if lg.updates:
        cols = list(lg.updates[0])
        with open(out / "updates.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, restval="")
            w.writeheader()
            w.writerows(lg.updates)
    if lg.observations:
        arrays = {}
        for aid, (steps, obs) in lg.observations.items():
            arrays[f"{aid}__steps"] = steps
            arrays[f"{aid}__obs"] = obs
        np.savez(out / "observations.npz", **arrays)
    if lg.events:
        with open(out / "events.jsonl", "w") as f:
            for e in lg.events:
                f.write(json.dumps([e.step, e.seq, e.kind, e.payload]) + "\n")
    ck_out = {}
    rl = [a for a in result.agents if isinstance(a, RlAgent)]
    if rl:
        ck_dir = out / "checkpoints"
        ck_dir.mkdir(exist_ok=True)
        for a in rl:
            path = ck_dir / f"{a.agent_id}.ckpt"
            meta = {"agent_id": a.agent_id, "kind": a.kind, "params": a.params.__dict__.copy()}
            meta["params"] = {k: list(v) if isinstance(v, tuple) else v
                              for k, v in meta["params"].items()}
            save_checkpoint(path, a.policy, a.value_net, a.ppo, a.rng, meta)
            result.checkpoints[a.agent_id] = path
            ck_out[a.agent_id] = _sha256(path)
    files = {}
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "run_manifest.json":
            files[p.name] = _sha256(p)
    chain = hashlib.sha256()
    for k in sorted(loaded or {}):
        chain.update(f"in:{k}:{loaded[k]}\n".encode())
    for k in sorted(ck_out):
        chain.update(f"out:{k}:{ck_out[k]}\n".encode())
    for k, v in files.items():
        chain.update(f"file:{k}:{v}\n".encode())
    manifest = {
        "artifact": "cdasim",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "files": files,
        "checkpoints_in": loaded or {},
        "checkpoints_out": ck_out,
        "content_hash": chain.hexdigest(),
        "n_trades": len(lg.trades),
        "rejections": {f"{a}:{k}": v for (a, k), v in sorted(lg.rejections.items())},
        "unfilled_orders": len(lg.unfilled),
    }
    with open(out / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    result.manifest = manifest
    return manifest
