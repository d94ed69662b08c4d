"""
Eviction and grouped model swaps
================================

Two situations where plain arrival order goes wrong.

1. A long batch job fills the GPU and an interactive request shows up. FCFS
   makes it wait for a free slot; evicting a batch request to host memory
   lets it start almost immediately.
2. Two models share one GPU and their requests alternate. Serving in deadline
   order swaps the model on nearly every request; grouping requests by model
   swaps once.
"""

import numpy as np

from vqserve.core import InstanceSpec, Request
from vqserve.experiment import profiled
from vqserve.sim import run_simulation
from vqserve.workload import TokenDistParams, Trace

prof = profiled("vicuna-13b", "a100")

batch = [Request(f"b{k:03d}", 0.0, "vicuna-13b", 3600.0, 200 + k, 2000, slo_class="batch") for k in range(60)]
inter = Request("int0", 30.0, "vicuna-13b", 20.0, 100, 50, slo_class="interactive")
trace = Trace.from_requests(batch + [inter])

for policy, ev in [("fcfs", False), ("qlm", False), ("qlm", True)]:
    res = run_simulation(trace, [prof], policy=policy, eviction=ev)
    ttft = res.first_token["int0"] - inter.arrival_time
    print(f"{policy:5s} eviction={ev!s:5s} interactive TTFT {ttft:7.2f}s  evictions {res.evictions}")

# ---- model swapping
ov = {"swap_warm": 20.0, "swap_cold": 40.0}
models = ["mistral-7b", "vicuna-13b"]
spec = InstanceSpec("i0", "a100", {m: profiled(m, "a100", ov) for m in models}, models[0], warm_slots=1)

rng = np.random.default_rng(4)
td = TokenDistParams()
reqs = []
for k in range(60):
    i, o = td.sample(rng)
    reqs.append(Request(f"r{k:03d}", 0.5 * k, models[k % 2], 600.0, i, o, slo_class=models[k % 2]))
trace = Trace.from_requests(reqs)

print()
for policy in ("edf", "qlm"):
    res = run_simulation(trace, [spec], policy=policy)
    drain = max(res.completion.values())
    print(f"{policy:4s} swaps {res.swaps:3d}  all done at {drain:7.1f}s")
