"""
Measuring the impact of a flash sale
====================================

A scripted seller dumps 300 lots per step for five steps, waits 400 steps
and repeats.  We line the mid-price up on each event start, divide by the
pre-event price and average the paths.

The market here is ZI traders only, priced at $10 so that one event eats a
visible share of the book.  ZI traders have no memory of a fair value, so
the price does not bounce back after the sale.
"""

import numpy as np

from cdasim import analysis
from cdasim.config import ExperimentConfig
from cdasim.harness import run

horizon = 100
flash = {"n_events": 10, "active": 5, "idle": 400, "lots": 300, "start": 1_000}
cfg = ExperimentConfig(name="flash_zi", seed=1, initial_price=10.0,
                       n_steps=1_000 + 10 * 405 + horizon,
                       agents=[{"class": "zi", "count": 20}, {"class": "flash"}],
                       flash=flash, record_observations=False)
result = run(cfg)

starts = cfg.flash_schedule.event_starts(cfg.n_steps - horizon - 1)
impact = analysis.price_impact(result.log.mid_series(), starts, horizon)
print(impact.summary())

# A coarse text plot of the averaged curve.
for k in (0, 1, 2, 3, 4, 5, 10, 25, 50, 100):
    bar = "#" * int(round((1 - impact.curve[k]) * 4_000))
    print(f"k={k:>3}  {impact.curve[k]:.4f}  {bar}")

# Each event on its own is noisy; the spread across events shows how much.
lo, hi = np.percentile(impact.per_event[:, 5], [10, 90])
print(f"after the sale: 10th to 90th percentile {lo:.4f} .. {hi:.4f}")

# The flash agent's sold shares had to go somewhere: to the ZI traders.
seller = result.exchange.accounts["flash1"]
print("flash seller inventory change", seller.inventory - seller.initial_inventory)
