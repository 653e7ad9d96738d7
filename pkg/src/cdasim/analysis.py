"""Stylized-fact statistics, PnL decomposition, flash-sale price impact and
policy probing.  Everything here is a pure function of logged data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats as _stats

from .agents import mm_action_values, MmParams
from .ppo import Policy, load_checkpoint


class DegenerateSeries(ValueError):
    pass


class MisalignedSeries(ValueError):
    pass


class WindowOutOfRange(IndexError):
    pass


class NoStatesInPartition(LookupError):
    pass


FULL_DT_GRID = (1, 30, 60, 120)
DESK_DT_GRID = (1, 10, 30)
DESK_CUTOFF_STEPS = 7_200  # two simulated hours


# -- series helpers ----------------------------------------------------------

def fill_mids(mids) -> np.ndarray:
    """Forward-fill undefined (nan) mids; leading gaps take the first defined value."""
    m = np.asarray(mids, dtype=np.float64).copy()
    ok = np.isfinite(m)
    if not ok.any():
        raise DegenerateSeries("no defined mid prices")
    idx = np.where(ok, np.arange(len(m)), 0)
    np.maximum.accumulate(idx, out=idx)
    m = m[idx]
    m[:np.argmax(ok)] = m[np.argmax(ok)]
    return m


def log_returns(mids, dt: int = 1) -> np.ndarray:
    """Non-overlapping log returns of the mid sampled every ``dt`` steps."""
    m = fill_mids(mids)[::dt]
    return np.diff(np.log(m))


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 4:
        raise DegenerateSeries(f"need at least 4 values, got {len(x)}")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if not m2 > 0:
        raise DegenerateSeries("zero variance")
    return float(np.mean(d ** 4) / (m2 * m2) - 3.0)


def acf(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag (biased normalisation, rho(0) = 1)."""
    x = np.asarray(x, dtype=np.float64)
    if max_lag >= len(x):
        raise DegenerateSeries(f"max_lag {max_lag} must be below length {len(x)}")
    d = x - x.mean()
    denom = float(d @ d)
    if not denom > 0:
        raise DegenerateSeries("zero variance")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    n = len(d)
    for k in range(1, max_lag + 1):
        out[k] = float(d[:n - k] @ d[k:]) / denom
    return out


def dt_grid(n_steps: int) -> tuple:
    return DESK_DT_GRID if n_steps < DESK_CUTOFF_STEPS else FULL_DT_GRID


def qq_pairs(sim, reference=None, n_quantiles: int = 99):
    """Quantile pairs of standardised returns against a reference sample or,
    without one, the standard normal."""
    probs = np.linspace(0.01, 0.99, n_quantiles)
    s = np.asarray(sim, dtype=np.float64)
    s = (s - s.mean()) / s.std()
    qs = np.quantile(s, probs)
    if reference is None:
        qr = _stats.norm.ppf(probs)
    else:
        r = np.asarray(reference, dtype=np.float64)
        r = (r - r.mean()) / r.std()
        qr = np.quantile(r, probs)
    return np.column_stack([probs, qr, qs])


def read_reference_returns(path) -> np.ndarray:
    """One float per line; blank lines and '#' comments ignored."""
    vals = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                vals.append(float(line.split(",")[0]))
    return np.asarray(vals)


@dataclass
class StylizedFacts:
    dts: list
    kurtosis: dict  # dt -> excess kurtosis
    acf_returns: np.ndarray
    acf_abs: np.ndarray
    acf_sq: np.ndarray
    qq: np.ndarray  # columns: prob, reference quantile, simulated quantile
    qq_dt: int = 10
    n_steps: int = 0


def stylized_facts_report(mids, dts: Optional[Sequence[int]] = None, max_lag: int = 50,
                          reference=None, qq_dt: int = 10) -> StylizedFacts:
    m = np.asarray(mids, dtype=np.float64)
    if len(m) < 2000:
        raise DegenerateSeries(f"need at least 2000 steps of mids, got {len(m)}")
    dts = list(dts) if dts is not None else list(dt_grid(len(m)))
    kurt = {int(dt): excess_kurtosis(log_returns(m, dt)) for dt in dts}
    r1 = log_returns(m, 1)
    return StylizedFacts(
        dts=[int(d) for d in dts],
        kurtosis=kurt,
        acf_returns=acf(r1, max_lag),
        acf_abs=acf(np.abs(r1), max_lag),
        acf_sq=acf(r1 * r1, max_lag),
        qq=qq_pairs(log_returns(m, qq_dt), reference),
        qq_dt=qq_dt,
        n_steps=len(m),
    )


# -- report files ----------------------------------------------------------

def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_report(facts: StylizedFacts, out_dir, impact: Optional["ImpactCurve"] = None,
                 probe: Optional[dict] = None, extra: Optional[dict] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "kurtosis_table.csv", ["dt", "excess_kurtosis"],
                [(dt, facts.kurtosis[dt]) for dt in facts.dts])
    for name, arr in (("acf_returns", facts.acf_returns), ("acf_abs", facts.acf_abs),
                      ("acf_sq", facts.acf_sq)):
        _write_rows(out / f"{name}.csv", ["lag", "acf"], list(enumerate(arr)))
    _write_rows(out / "qq.csv", ["prob", "reference", "simulated"], facts.qq.tolist())
    report = {
        "n_steps": facts.n_steps,
        "dts": facts.dts,
        "kurtosis": {str(k): v for k, v in facts.kurtosis.items()},
        "acf_returns_lag1": float(facts.acf_returns[1]),
        "acf_abs_lag1": float(facts.acf_abs[1]),
        "acf_sq_lag1": float(facts.acf_sq[1]),
        "qq_dt": facts.qq_dt,
    }
    if impact is not None:
        _write_rows(out / "impact.csv", ["k", "normalized_price"], list(enumerate(impact.curve)))
        report["impact"] = impact.summary()
    if probe is not None:
        rows = []
        for group, parts in probe.items():
            for part, d in parts.items():
                for es, ea in zip(d["eps_s"], d["eps_a"]):
                    rows.append((group, part, float(es), float(ea)))
        _write_rows(out / "probe.csv", ["group", "partition", "eps_s", "eps_a"], rows)
        report["probe"] = summarize_probe(probe)
    if extra:
        report.update(extra)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def read_report_csvs(out_dir) -> dict:
    """Read back the per-figure CSVs written by :func:`write_report`."""
    out = Path(out_dir)

    def rows(name):
        with open(out / name) as f:
            r = csv.reader(f)
            next(r)
            return [row for row in r]

    kurt = {int(a): float(b) for a, b in rows("kurtosis_table.csv")}
    res = {"kurtosis": kurt}
    for name in ("acf_returns", "acf_abs", "acf_sq"):
        res[name] = np.array([float(b) for _, b in rows(f"{name}.csv")])
    res["qq"] = np.array([[float(v) for v in r] for r in rows("qq.csv")])
    return res


# -- PnL decomposition -----------------------------------------------------

@dataclass
class PnlDecomposition:
    """Per-step inventory and spread components; ``*_hc`` arrays are exact
    integers in half-cents, the float arrays are dollars."""

    total_hc: np.ndarray
    inventory_hc: np.ndarray
    spread_hc: np.ndarray

    @property
    def d_inventory_hc(self) -> np.ndarray:
        return np.diff(self.inventory_hc, prepend=0)

    @property
    def d_spread_hc(self) -> np.ndarray:
        return np.diff(self.spread_hc, prepend=0)

    @property
    def total(self) -> np.ndarray:
        return self.total_hc / 200

    @property
    def inventory(self) -> np.ndarray:
        return self.inventory_hc / 200

    @property
    def spread(self) -> np.ndarray:
        return self.spread_hc / 200

    def identity_holds(self) -> bool:
        return bool(np.array_equal(self.inventory_hc + self.spread_hc, self.total_hc))


def pnl_decompose(cash, inventory, mid, initial: Optional[tuple] = None) -> PnlDecomposition:
    """Split mark-to-mid PnL into inventory revaluation and the rest.

    ``cash`` in dollars, ``inventory`` in shares, ``mid`` in dollars, one entry
    per record.  The inventory component of step t is inv_{t-1} * (mid_t -
    mid_{t-1}); spread is total minus inventory.  ``initial`` is the
    (cash, inventory, mid) state before the first record; by default the first
    record is the baseline.
    """
    cash = np.asarray(cash, dtype=np.float64)
    inv = np.asarray(inventory)
    mid = np.asarray(mid, dtype=np.float64)
    if not (len(cash) == len(inv) == len(mid)):
        raise MisalignedSeries(f"lengths {len(cash)}, {len(inv)}, {len(mid)}")
    if len(cash) == 0:
        z = np.zeros(0, dtype=np.int64)
        return PnlDecomposition(z, z, z)
    if not np.isfinite(mid).all():
        raise MisalignedSeries("mid must be defined on every record")
    cash_hc = [2 * int(round(c * 100)) for c in cash]
    mid_hc = [int(round(m * 200)) for m in mid]
    invs = [int(v) for v in inv]
    if initial is None:
        c0, i0, m0 = cash_hc[0], invs[0], mid_hc[0]
    else:
        c0, i0, m0 = 2 * int(round(initial[0] * 100)), int(initial[1]), int(round(initial[2] * 200))
    base = c0 + i0 * m0
    total, inv_cum, spr = [], [], []
    acc_inv = 0
    prev_inv, prev_mid = i0, m0
    for c, i, m in zip(cash_hc, invs, mid_hc):
        acc_inv += prev_inv * (m - prev_mid)
        t = c + i * m - base
        total.append(t)
        inv_cum.append(acc_inv)
        spr.append(t - acc_inv)
        prev_inv, prev_mid = i, m
    as_arr = lambda v: np.array(v, dtype=object if max(map(abs, v), default=0) > 2**62 else np.int64)
    return PnlDecomposition(as_arr(total), as_arr(inv_cum), as_arr(spr))


def inventory_bands(inventories, lo: float = 20, hi: float = 80):
    """Mean and percentile band of inventory across agents at each step.

    ``inventories`` is (n_steps, n_agents)."""
    x = np.asarray(inventories, dtype=np.float64)
    return x.mean(axis=1), np.percentile(x, lo, axis=1), np.percentile(x, hi, axis=1)


# -- price impact ----------------------------------------------------------

@dataclass
class ImpactCurve:
    curve: np.ndarray
    per_event: np.ndarray
    event_starts: list
    horizon: int

    @property
    def trough(self) -> float:
        return float(self.curve.min()) if len(self.curve) else math.nan

    @property
    def trough_k(self) -> int:
        return int(np.argmin(self.curve)) if len(self.curve) else -1

    @property
    def terminal(self) -> float:
        return float(self.curve[-1]) if len(self.curve) else math.nan

    def summary(self) -> dict:
        return {"events": len(self.event_starts), "horizon": self.horizon,
                "trough": self.trough, "trough_k": self.trough_k, "terminal": self.terminal}


def price_impact(mids, event_starts: Sequence[int], horizon: int) -> ImpactCurve:
    """Event-aligned price path ``p[t0 + k] / p[t0]``, k = 0..horizon, averaged over events.

    ``mids[t0]`` should be the last price before the event starts acting.
    """
    starts = [int(s) for s in event_starts]
    if not starts:
        return ImpactCurve(np.zeros(0), np.zeros((0, horizon + 1)), [], horizon)
    m = fill_mids(mids)
    for s in starts:
        if s < 0 or s + horizon >= len(m):
            raise WindowOutOfRange(f"event at {s} with horizon {horizon} exceeds {len(m)} steps")
    paths = np.stack([m[s:s + horizon + 1] / m[s] for s in starts])
    return ImpactCurve(paths.mean(axis=0), paths, starts, horizon)


# -- policy probing --------------------------------------------------------

def imbalance(bids, asks) -> float:
    vb = sum(q for _, q in bids)
    va = sum(q for _, q in asks)
    return (vb - va) / (vb + va) if vb + va else 0.0


def read_snapshots(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            out.append(json.loads(line))
    return out


def load_observations(path) -> dict:
    """agent id -> (steps, observations) from an observations.npz."""
    data = np.load(path)
    out = {}
    for k in data.files:
        if k.endswith("__obs"):
            aid = k[:-5]
            out[aid] = (data[f"{aid}__steps"], data[k])
    return out


def _as_policy(obj):
    """Accept a Policy, a checkpoint path, or a loaded checkpoint dict."""
    if isinstance(obj, Policy):
        return obj, None
    if isinstance(obj, dict):
        ck = obj
    else:
        ck = load_checkpoint(obj)
    params = ck["header"].get("meta", {}).get("params")
    return ck["policy"], params


def partition_steps(steps, imbalances=None, threshold: float = 0.2, phases=None) -> dict:
    """Boolean masks over ``steps``.

    With ``phases`` (name -> (start, stop)) the partition is by step range;
    otherwise by |imbalance| <= threshold (balanced) or above (imbalanced).
    """
    steps = np.asarray(steps)
    if phases:
        return {name: (steps >= lo) & (steps < hi) for name, (lo, hi) in phases.items()}
    imb = np.abs(np.asarray(imbalances, dtype=np.float64))
    return {"balanced": imb <= threshold, "imbalanced": imb > threshold}


def probe_policies(observations: Mapping, imbalance_by_step, checkpoints: Mapping,
                   threshold: float = 0.2, phases=None, mm_params: Optional[Mapping] = None,
                   strict: bool = True) -> dict:
    """Feed logged market-maker states to policies with sampling noise off.

    ``observations``: agent id -> (steps, obs).  ``imbalance_by_step``: array
    indexed by step.  ``checkpoints``: group -> {agent id -> Policy or path}.
    Returns group -> partition -> {"eps_s", "eps_a"} arrays pooled over agents.
    Raises NoStatesInPartition when a partition is empty and ``strict``.
    """
    imb_all = np.asarray(imbalance_by_step, dtype=np.float64)
    out: dict = {}
    for group, agents in checkpoints.items():
        parts: dict = {}
        for aid, ck in agents.items():
            if aid not in observations:
                continue
            policy, params = _as_policy(ck)
            if mm_params and aid in mm_params:
                p = mm_params[aid]
            elif params:
                p = MmParams(**{k: v for k, v in params.items() if k in MmParams.__dataclass_fields__})
            else:
                p = MmParams()
            steps, obs = observations[aid]
            masks = partition_steps(steps, imb_all[steps] if phases is None else None,
                                    threshold, phases)
            means = policy.mean_action(obs)
            vals = np.array([mm_action_values(r, p) for r in means]) if len(means) else np.zeros((0, 3))
            for name, mask in masks.items():
                d = parts.setdefault(name, {"eps_s": [], "eps_a": []})
                d["eps_s"].extend(vals[mask, 1].tolist())
                d["eps_a"].extend(vals[mask, 2].tolist())
        for name, d in parts.items():
            d["eps_s"] = np.asarray(d["eps_s"])
            d["eps_a"] = np.asarray(d["eps_a"])
            if strict and len(d["eps_s"]) == 0:
                raise NoStatesInPartition(f"group {group!r} has no {name} states")
        out[group] = parts
    return out


def summarize_probe(probe: dict) -> dict:
    return {g: {p: {"n": int(len(d["eps_s"])),
                    "eps_s_mean": float(np.mean(d["eps_s"])) if len(d["eps_s"]) else None,
                    "eps_a_mean": float(np.mean(d["eps_a"])) if len(d["eps_a"]) else None}
                for p, d in parts.items()}
            for g, parts in probe.items()}


# -- run directories -------------------------------------------------------

def load_run(run_dir) -> dict:
    """Read the harness outputs needed by the analyses."""
    run = Path(run_dir)
    snaps = read_snapshots(run / "snapshots.jsonl")
    mids = np.array([s["mid"] if s["mid"] is not None else np.nan for s in snaps], dtype=np.float64)
    imb = np.array([imbalance(s["bids"], s["asks"]) for s in snaps])
    manifest = json.loads((run / "run_manifest.json").read_text())
    obs_path = run / "observations.npz"
    return {"mids": mids, "imbalance": imb, "snapshots": snaps, "manifest": manifest,
            "observations": load_observations(obs_path) if obs_path.exists() else {}}


def read_accounts(path) -> dict:
    """agent id -> dict of arrays (step, cash, inventory, mid, pnl columns)."""
    rows: dict = {}
    with open(path) as f:
        for r in csv.DictReader(f):
            d = rows.setdefault(r["agent_id"], {k: [] for k in r if k != "agent_id"})
            for k, v in r.items():
                if k != "agent_id":
                    d[k].append(v)
    out = {}
    for aid, d in rows.items():
        out[aid] = {"step": np.array(d["step"], dtype=np.int64),
                    "cash": np.array(d["cash"], dtype=np.float64),
                    "inventory": np.array(d["inventory"], dtype=np.int64),
                    **{k: np.array(v, dtype=np.float64) for k, v in d.items()
                       if k not in ("step", "cash", "inventory")}}
    return out
