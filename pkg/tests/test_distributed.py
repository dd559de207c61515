import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minitransfer.data import build_vocab
from minitransfer.distributed import (CostModel, DataParallelTrainer, ParallelPlan,
                                      dp_train, estimate_speedup, shard_batches,
                                      single_process_step, speedup_table, step_time,
                                      worker_gradients)
from minitransfer.errors import ConfigError, ConsistencyError
from minitransfer.layers import ModelConfig, build_model
from minitransfer.optim import Optimizer
from minitransfer.synthetic import SyntheticTaskSpec, generate_synthetic
from minitransfer.training import TrainConfig, encode_dataset

PINNED = CostModel(t_sample=1e-3, param_bytes=4e8, bandwidth=1e10, latency=5e-3)


@pytest.fixture(scope="module")
def data():
    task = generate_synthetic(SyntheticTaskSpec(n_domains=1, sizes=(64,), seed=0))
    v = build_vocab(task.target.texts())
    return v, encode_dataset(task.target, v, 12)


def model(v, seed=0):
    return build_model(ModelConfig(len(v), 6, 1, 12, 2, seed))


def test_shards_round_robin(data):
    _, batch = data
    b8 = batch.subset(np.arange(8))
    shards = shard_batches(b8, 4)
    assert [s.examples for s in shards] == [[b8.examples[w], b8.examples[w + 4]] for w in range(4)]
    assert shard_batches(b8, 1)[0] is b8
    with pytest.raises(ConfigError):
        shard_batches(b8, 0)


def test_single_worker_matches_plain_step(data):
    v, batch = data
    b = batch.subset(np.arange(16))
    a, ref = model(v), model(v)
    DataParallelTrainer(a, 1, 0.1).step(b)
    single_process_step(ref, b, Optimizer(ref.parameters(), 0.1, "sgd"))
    for n, p in ref.params.items():
        assert a.params[n].data.tobytes() == p.data.tobytes()


def test_identical_shards_equal_single_gradient(data):
    v, batch = data
    b = batch.subset(np.zeros(8, int))
    tr = DataParallelTrainer(model(v), 4, 0.1)
    for r, s in zip(tr.replicas, shard_batches(b, 4)):
        r.batch, r.weights = s, np.ones(len(s))
        worker_gradients(r, 1.0 / len(s))
    for n in tr.master.params:
        for r in tr.replicas[1:]:
            assert np.array_equal(r.grads[n], tr.replicas[0].grads[n])


@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("seed", range(3))
def test_dp_equivalence(data, n, seed):
    v, batch = data
    rng = np.random.default_rng(seed)
    a, ref = model(v, seed), model(v, seed)
    tr = DataParallelTrainer(a, n, 0.1)
    opt = Optimizer(ref.parameters(), 0.1, "sgd")
    for _ in range(10):
        b = batch.subset(rng.choice(len(batch), 32, replace=False))
        tr.step(b)
        single_process_step(ref, b, opt)
    diff = max(np.abs(a.params[k].data - p.data).max() for k, p in ref.params.items())
    assert diff <= 1e-9


@pytest.mark.parametrize("size", [5, 13, 30])
def test_ragged_batch_equivalence(data, size):
    v, batch = data
    a, ref = model(v), model(v)
    b = batch.subset(np.arange(size))
    DataParallelTrainer(a, 4, 0.1).step(b)
    single_process_step(ref, b, Optimizer(ref.parameters(), 0.1, "sgd"))
    assert max(np.abs(a.params[k].data - p.data).max() for k, p in ref.params.items()) <= 1e-12


def test_threads_bit_identical(data):
    v, batch = data
    a, b = model(v), model(v)
    x = batch.subset(np.arange(32))
    DataParallelTrainer(a, 4, 0.1, "adam", threads=True).step(x)
    DataParallelTrainer(b, 4, 0.1, "adam", threads=False).step(x)
    assert all(a.params[n].data.tobytes() == p.data.tobytes() for n, p in b.params.items())


def test_divergence_detected(data):
    v, batch = data
    tr = DataParallelTrainer(model(v), 2, 0.1)
    tr.replicas[1].model.params["head/b"].data = np.ones(2)
    with pytest.raises(ConsistencyError):
        tr.step(batch.subset(np.arange(8)))


def test_dp_train_report(data):
    v, batch = data
    _, rep = dp_train(model(v), batch, batch, 2, TrainConfig(epochs=2, lr=0.1, optimizer="sgd"),
                      test=batch)
    assert rep.extra["n_workers"] == 2 and len(rep.extra["history"]) == 2


# speedup model

def test_pinned_speedup():
    assert step_time(1, PINNED, 1024) == pytest.approx(1.024, abs=1e-12)
    assert step_time(32, PINNED, 1024) == pytest.approx(0.1145, abs=1e-12)
    s = estimate_speedup(ParallelPlan(32), PINNED, 1024)
    assert abs(s - 1.024 / 0.1145) <= 1e-6
    assert round(s, 2) == 8.94


def test_speedup_limits():
    assert estimate_speedup(ParallelPlan(1), PINNED, 1024) == 1.0
    free = CostModel(1e-3, 0.0, 1e10, 0.0)
    for n in (1, 2, 4, 32, 128):
        assert estimate_speedup(ParallelPlan(n), free, 1024) == n


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.floats(1e6, 1e12), st.floats(1e6, 1e12), st.floats(0, 1e-1),
       st.floats(0, 1e-1))
def test_speedup_monotone(n, bw1, bw2, lat1, lat2):
    lo_bw, hi_bw = sorted([bw1, bw2])
    lo_lat, hi_lat = sorted([lat1, lat2])
    plan = ParallelPlan(n)
    s = lambda bw, lat: estimate_speedup(plan, CostModel(1e-3, 4e8, bw, lat), 1024)
    assert s(hi_bw, lo_lat) >= s(lo_bw, lo_lat)
    assert s(lo_bw, lo_lat) >= s(lo_bw, hi_lat)
    assert s(lo_bw, lo_lat) <= n * (1 + 1e-12)


def test_speedup_table_csv():
    lines = speedup_table([1, 2], PINNED, 1024).splitlines()
    assert lines[0] == "n_workers,predicted_speedup"
    assert lines[1] == "1,1.0"


def test_plan_validation():
    with pytest.raises(ConfigError):
        ParallelPlan(0)
