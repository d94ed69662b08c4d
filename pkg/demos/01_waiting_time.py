"""
How long will a queued request wait?
====================================

A request's wait is the time to drain the output tokens of everything ahead
of it. Sums of many output lengths are close to Normal, so the wait estimate
is a mean plus a spread that grows with the square root of the queue depth.
Here we check the estimate against a simulated FCFS queue.
"""

import numpy as np

from vqserve.estimator import estimate_waiting_time
from vqserve.experiment import profiled
from vqserve.metrics import r_squared
from vqserve.sim import run_simulation
from vqserve.core import Request
from vqserve.workload import TokenDistParams, Trace, fit_token_stats

# a profile measured by running a saturated queue through the simulator
prof = profiled("vicuna-13b", "a100")
print(f"throughput {prof.theta:.0f} tok/s, batch inefficiency {prof.inefficiency:.3f}")

# 1000 requests all arriving at t=0
rng = np.random.default_rng(0)
td = TokenDistParams()
reqs = []
for k in range(1000):
    i, o = td.sample(rng)
    reqs.append(Request(f"r{k:04d}", 0.0, "vicuna-13b", 1e6, i, o))
trace = Trace.from_requests(reqs)

res = run_simulation(trace, [prof], policy="fcfs")
real = np.array([res.admitted[r.id] for r in trace.requests])

# requests admitted at t=0 never queue; positions count from the head of the waiting queue
n0 = int((real == 0).sum())
stats = fit_token_stats(trace)
print(f"{n0} requests fit in the first batch, mean output {stats.mean_output:.0f} tokens")
print(f"R^2 of position against realised wait: {r_squared(np.arange(1000), real):.4f}")

est = np.array([estimate_waiting_time(k - n0, stats, prof).mean for k in range(n0, 1000)])
for k in (n0 + 50, 300, 600, 999):
    e = estimate_waiting_time(k - n0, stats, prof)
    print(f"position {k:4d}: simulated {real[k]:7.1f}s  estimate {e.mean:7.1f}s +- {1.96 * e.std:5.1f}")

# the slope tracks the simulation; the intercept is the time the full first
# batch takes before it starts freeing slots, which the estimate leaves out
slope, icpt = np.polyfit(est, real[n0:], 1)
print(f"simulated = {slope:.3f} * estimate + {icpt:.1f}s")
