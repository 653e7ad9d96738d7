"""
Stylized facts from zero-intelligence traders
=============================================

Twenty ZI traders send random market, limit and cancel orders around the
touch.  Even with no strategy at all, the mid-price returns come out
fat-tailed at short horizons and negatively autocorrelated at lag one,
because the mid bounces between the bid and the ask.
"""

import numpy as np

from cdasim import analysis
from cdasim.config import preset
from cdasim.harness import run

result = run(preset("zi_desk", seed=3, n_steps=20_000))
mids = result.log.mid_series() / 100  # ticks to dollars
print(f"{len(result.log.trades)} trades, mid went from {mids[0]:.2f} to {mids[-1]:.2f}")

facts = analysis.stylized_facts_report(mids, dts=analysis.DESK_DT_GRID)

# Kurtosis should shrink as returns are aggregated over longer windows.
for dt, k in facts.kurtosis.items():
    print(f"excess kurtosis at {dt:>2} s: {k:6.2f}")

# Raw returns decorrelate quickly, absolute and squared returns linger.
print("lag   returns    |returns|  returns^2")
for lag in (1, 2, 5, 10, 20):
    print(f"{lag:>3}  {facts.acf_returns[lag]:9.3f}  {facts.acf_abs[lag]:9.3f}  "
          f"{facts.acf_sq[lag]:9.3f}")

# Compare the 10 s return quantiles with the normal distribution.
tail = facts.qq[[0, 49, -1]]
print("quantile  normal  simulated")
for p, ref, sim in tail:
    print(f"{p:8.2f}  {ref:6.2f}  {sim:9.2f}")
print("two-sided book on", f"{np.isfinite(result.log.mid_series()).mean():.1%}", "of steps")
