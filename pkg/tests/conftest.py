import numpy as np
import pytest

from vqserve.core import InstanceProfile, Request
from vqserve.experiment import profiled
from vqserve.workload import TokenDistParams, Trace


def make_profile(model="m", gpu="g", **kw):
    base = dict(theta=1000.0, decode_per_token=0.1, inefficiency=1.0, prefill=0.5, token_capacity=1000,
                swap_cold=30.0, swap_warm=20.0, kv_transfer_bandwidth=100.0, max_output_tokens=100)
    base.update(kw)
    return InstanceProfile(model=model, gpu_type=gpu, **base)


def req(rid, t=0.0, model="m", slo=100.0, i=10, o=5, cls=None):
    return Request(rid, t, model, slo, i, o, slo_class=cls)


def queued_trace(n, seed=0, model="vicuna-13b", slo=1e6, cls=None):
    rng = np.random.default_rng(seed)
    td = TokenDistParams()
    rs = []
    for k in range(n):
        i, o = td.sample(rng)
        rs.append(Request(f"r{k:05d}", 0.0, model, slo, i, o, slo_class=cls))
    return Trace.from_requests(rs)


@pytest.fixture
def toy_profile():
    return make_profile()


@pytest.fixture(scope="session")
def vicuna():
    return profiled("vicuna-13b", "a100")
