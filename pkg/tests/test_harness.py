import json

import numpy as np
import pytest

from cdasim import harness
from cdasim.agents import LiquidityTakerAgent, RlAgent
from cdasim.config import ConfigInvalid, ExperimentConfig, load_config, preset
from cdasim.exchange import Exchange
from cdasim.lob import Side
from cdasim.ppo import load_checkpoint

SMALL_PPO = {"capacity": 64, "minibatch": 32, "epochs": 2}


def rl_cfg(**kw):
    base = dict(n_steps=200, ppo=SMALL_PPO, pretrain_steps=150)
    base.update(kw)
    return preset("rl_desk", **base)


def test_seed_book_default():
    ex = Exchange(lot_size=100)
    ex.open_account(harness._utility_account(ExperimentConfig()))
    harness.seed_book(ex, 10_000)
    snap = ex.book.snapshot()
    assert (snap.best_bid, snap.best_ask, snap.mid, snap.spread) == (9_999, 10_001, 10_000.0, 2)
    assert snap.bids == tuple((10_000 - k, 1_000) for k in range(1, 6))
    assert snap.asks == tuple((10_000 + k, 1_000) for k in range(1, 6))


def test_zero_steps_leaves_accounts_untouched(tmp_path):
    res = harness.run(preset("rl_desk", n_steps=0), tmp_path / "r")
    assert res.log.trades == [] and res.log.mids == []
    for a in res.exchange.accounts.values():
        assert a.cash_cents == a.initial_cash_cents and a.inventory == a.initial_inventory
    assert (tmp_path / "r" / "run_manifest.json").exists()


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_stepped_runs_are_bitwise_identical(tmp_path):
    cfg = rl_cfg()
    a = harness.run(cfg, tmp_path / "a", training=True)
    b = harness.run(cfg, tmp_path / "b", training=True)
    assert a.log.updates, "buffers should have filled at least once"
    fa, fb = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert fa.keys() == fb.keys()
    assert all(fa[k] == fb[k] for k in fa)
    c = harness.run(cfg.replace(seed=1), tmp_path / "c")
    assert _files(tmp_path / "c")["trades.csv"] != fa["trades.csv"]


@pytest.mark.parametrize("name", ["zi_desk", "rl_desk", "flash_sale", "informed_lt"])
def test_presets_conserve(name):
    cfg = preset(name, n_steps=400, ppo=SMALL_PPO)
    if cfg.flash:
        cfg = cfg.replace(flash=dict(cfg.flash, start=10, idle=100))
    res = harness.run(cfg, training=True)
    accts = res.exchange.accounts.values()
    assert sum(a.cash_cents for a in accts) == sum(a.initial_cash_cents for a in accts)
    assert sum(a.inventory for a in accts) == sum(a.initial_inventory for a in accts)
    assert all(a.reserved_cents == 0 and a.reserved_shares == 0 for a in accts)


def test_pretrain_zero_steps_saves_initial_parameters(tmp_path):
    cfg = rl_cfg()
    pre = harness.pretrain(cfg, tmp_path / "p", steps=0)
    _, agents, _ = harness.build_market(cfg)
    fresh = {a.agent_id: a for a in agents if isinstance(a, RlAgent)}
    assert set(pre.checkpoints) == set(fresh)
    for aid, path in pre.checkpoints.items():
        ck = load_checkpoint(path)
        assert ck["policy"].params.tobytes() == fresh[aid].policy.params.tobytes()
        assert ck["value_net"].params.tobytes() == fresh[aid].value_net.params.tobytes()


def test_matched_groups_start_from_pretrained_parameters(tmp_path):
    cfg = rl_cfg()
    pre = harness.pretrain(cfg, tmp_path / "p")
    assert pre.log.updates
    ck_dir = str(tmp_path / "p" / "checkpoints")
    for group in ("testing", "continual_training"):
        _, agents, loaded = harness.build_market(cfg.replace(group=group, checkpoint_dir=ck_dir))
        assert set(loaded) == set(pre.checkpoints)
        for a in agents:
            if isinstance(a, RlAgent):
                ck = load_checkpoint(pre.checkpoints[a.agent_id])
                assert a.policy.params.tobytes() == ck["policy"].params.tobytes()
                assert a.training == (group == "continual_training")
    b = harness.run(cfg.replace(group="testing", checkpoint_dir=ck_dir), tmp_path / "B")
    assert b.log.updates == []
    for aid, path in b.checkpoints.items():
        assert load_checkpoint(path)["policy"].params.tobytes() == \
            load_checkpoint(pre.checkpoints[aid])["policy"].params.tobytes()
    assert b.manifest["checkpoints_in"] == pre.manifest["checkpoints_out"]


def test_zi_book_stays_two_sided():
    res = harness.run(preset("zi_desk", n_steps=5_000))
    mids = res.log.mid_series()
    assert np.isfinite(mids[:1_000]).all()
    assert np.isfinite(mids).mean() >= 0.99
    assert len(res.log.trades) > 0


def test_informed_schedule_reaches_takers():
    cfg = preset("informed_lt", n_steps=120, informed={"phase_steps": 30,
                                                       "phases": [[0.3, 0.4], [0.4, 0.35]]})
    res = harness.run(cfg)
    takers = [a for a in res.agents if isinstance(a, LiquidityTakerAgent)]
    assert takers and all((a.params.f_buy, a.params.f_sell) == (0.4, 0.35) for a in takers)
    seen = {(r["f_buy"], r["f_sell"]) for r in res.log.reward_rows if "f_buy" in r}
    assert seen == {(0.3, 0.4), (0.4, 0.35)}


def test_flash_agent_sells_on_schedule():
    cfg = preset("zi_desk", n_steps=300, agents=[{"class": "zi", "count": 20}, {"class": "flash"}],
                 flash={"n_events": 2, "active": 5, "idle": 100, "lots": 3, "start": 50})
    res = harness.run(cfg)
    steps = sorted({t.step for t in res.log.trades
                    if t.taker_agent == "flash1" and t.taker_side is Side.ASK})
    assert steps and set(steps) <= set(range(50, 55)) | set(range(155, 160))


def test_outputs_and_manifest(tmp_path):
    res = harness.run(rl_cfg(n_steps=50), tmp_path / "r")
    out = tmp_path / "r"
    for name in ("trades.csv", "accounts.csv", "snapshots.jsonl", "rewards.csv",
                 "observations.npz", "run_manifest.json"):
        assert (out / name).exists(), name
    m = json.loads((out / "run_manifest.json").read_text())
    assert m["seed"] == 0 and m["config"]["name"] == "rl_desk"
    assert ExperimentConfig.from_dict(m["config"]) == res.config
    snaps = [json.loads(line) for line in (out / "snapshots.jsonl").read_text().splitlines()]
    assert len(snaps) == 50 and all(len(s["bids"]) <= 5 for s in snaps)
    with pytest.raises(FileExistsError):
        harness.run(rl_cfg(n_steps=50), out)


def test_realtime_mode_conserves():
    cfg = preset("zi_desk", n_steps=40, mode="realtime", step_seconds=0.005)
    res = harness.run(cfg)
    assert len(res.log.mids) == 40


@pytest.mark.parametrize("bad", [
    {"group": "nonsense"},
    {"group": "testing"},
    {"group": "continual_training", "checkpoint_dir": "x", "training": False},
    {"group": "untrained", "training": True},
    {"n_steps": -1},
    {"mode": "async"},
    {"agents": [{"class": "whale"}]},
    {"initial_price": 0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigInvalid):
        ExperimentConfig(**bad).validate()


def test_config_loading(tmp_path):
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigInvalid):
        load_config("no_such_preset")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "zi_desk", "seed": 9, "n_steps": 10}))
    cfg = load_config(p)
    assert cfg.seed == 9 and cfg.agents == [{"class": "zi", "count": 20}]
    assert ExperimentConfig(group="B").group == "testing"
