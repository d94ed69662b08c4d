"""
Policies on the bundled workloads
=================================

W_A: one model, three SLO classes, enough load to overflow the cluster.
W_B: several models sharing GPUs.
We compare the planner against EDF, FCFS and static batching.
"""

from vqserve.experiment import ExperimentConfig, run_point

for name in ("W_A", "W_B"):
    raw = ExperimentConfig.preset(name).raw
    print(name)
    print(f"  {'policy':8s} {'attain':>7s} {'req/s':>7s} {'swaps':>6s} {'evict':>6s}")
    for policy in ("qlm", "edf", "fcfs", "static"):
        rep, _ = run_point(raw, policy, seed=0)
        print(f"  {policy:8s} {rep.overall_attainment:7.3f} {rep.throughput:7.2f} {rep.swaps:6d} {rep.evictions:6d}")
    print()

# per-class detail for the planner on W_A
rep, _ = run_point(ExperimentConfig.preset("W_A").raw, "qlm", seed=0)
for cls, att in sorted(rep.attainment.items()):
    print(f"W_A qlm {cls:12s} attainment {att:.3f}  p99 TTFT {rep.p99_ttft[cls]:.2f}s")
