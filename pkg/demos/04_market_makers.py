"""
Training market makers and reading their books
==============================================

Four PPO market makers and ten liquidity takers trade next to a few ZI
traders.  We pretrain briefly, freeze one copy (testing group) and let
another keep learning (continual training) over the same market, then

* split each maker's PnL into spread capture and inventory revaluation, and
* feed the states the makers saw back to both sets of policies to compare
  the quote tweaks they choose.

Step counts are small so the script finishes in a minute or two; the
acceptance suite runs the longer version.
"""

import tempfile
from pathlib import Path

import numpy as np

from cdasim import analysis
from cdasim.config import preset
from cdasim.harness import pretrain, run

work = Path(tempfile.mkdtemp(prefix="cdasim-demo-"))
# a smaller rollout buffer than the default 2048 so updates happen in a short run
cfg = preset("flash_sale", seed=2, n_steps=4_000, pretrain_steps=2_000,
             ppo={"capacity": 256, "minibatch": 64},
             flash={"n_events": 8, "active": 5, "idle": 400, "lots": 300, "start": 300})

pre = pretrain(cfg, work / "pretrain")
print(f"pretrain: {len(pre.log.updates)} PPO updates across agents")
checkpoints = work / "pretrain" / "checkpoints"

frozen = run(cfg.replace(group="testing", checkpoint_dir=str(checkpoints)), work / "B")
learning = run(cfg.replace(group="continual_training", checkpoint_dir=str(checkpoints)), work / "A")

# PnL split for each maker in the learning run, straight from accounts.csv.
accounts = analysis.read_accounts(work / "A" / "accounts.csv")
for aid in sorted(a for a in accounts if a.startswith("mm")):
    acc = accounts[aid]
    dec = analysis.pnl_decompose(acc["cash"], acc["inventory"], acc["mid"])
    print(f"{aid}: total {dec.total[-1]:>12,.2f}  spread {dec.spread[-1]:>12,.2f}  "
          f"inventory {dec.inventory[-1]:>12,.2f}  identity {dec.identity_holds()}")

# Probe: same logged states, two sets of policies, sampling noise off.
run_a = analysis.load_run(work / "A")
makers = {aid: obs for aid, obs in run_a["observations"].items() if aid.startswith("mm")}
groups = {"continual": {aid: learning.checkpoints[aid] for aid in makers},
          "frozen": {aid: checkpoints / f"{aid}.ckpt" for aid in makers}}
probe = analysis.probe_policies(makers, run_a["imbalance"], groups, strict=False)
for group, parts in analysis.summarize_probe(probe).items():
    for part, s in parts.items():
        if s["n"]:
            print(f"{group:>10} {part:>10}: n={s['n']:>6}  eps_s {s['eps_s_mean']:+.4f}  "
                  f"eps_a {s['eps_a_mean']:+.4f}")

# Inventory bands across the four makers.
inv = np.column_stack([accounts[a]["inventory"] for a in sorted(makers)])
mean, p20, p80 = analysis.inventory_bands(inv)
print(f"final maker inventory: mean {mean[-1]:.0f}, 20-80% band [{p20[-1]:.0f}, {p80[-1]:.0f}]")
print("outputs in", work)
