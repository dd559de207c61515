"""Simulated data-parallel training and an analytic speedup model.

Workers are model replicas in one process. Every global batch is sharded
round-robin, each worker back-propagates the mean loss of its shard, and
the gradients are averaged in ascending worker order before one optimizer
step on the master parameters, which are then copied back to every replica.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConsistencyError
from .evaluation import MetricsReport
from .optim import Optimizer
from .training import TrainConfig, accuracy, index_batches, score


@dataclass
class ParallelPlan:
    n_workers: int
    per_worker_batch: int = 8

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError(f"n_workers must be >= 1, got {self.n_workers}")

    @property
    def global_batch(self) -> int:
        return self.n_workers * self.per_worker_batch


@dataclass
class CostModel:
    t_sample: float
    param_bytes: float
    bandwidth: float
    latency: float

    def __post_init__(self):
        for name in ("t_sample", "param_bytes", "bandwidth", "latency"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.bandwidth == 0 or self.t_sample == 0:
            raise ConfigError("t_sample and bandwidth must be positive")


def step_time(n: int, cost: CostModel, global_batch: int) -> float:
    """Compute on global_batch/n samples plus one ring all-reduce (none for n=1)."""
    compute = global_batch / n * cost.t_sample
    if n == 1:
        return compute
    return compute + 2.0 * (n - 1) / n * cost.param_bytes / cost.bandwidth + cost.latency


def estimate_speedup(plan: ParallelPlan, cost: CostModel, global_batch: int) -> float:
    return step_time(1, cost, global_batch) / step_time(plan.n_workers, cost, global_batch)


def speedup_table(workers, cost: CostModel, global_batch: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_workers", "predicted_speedup"])
    for n in workers:
        w.writerow([n, repr(estimate_speedup(ParallelPlan(n), cost, global_batch))])
    return buf.getvalue()


def shard_batches(batch, n_workers: int) -> list:
    """Round-robin split by example index: shard w gets w, w+n, w+2n, ..."""
    if n_workers < 1:
        raise ConfigError(f"n_workers must be >= 1, got {n_workers}")
    if n_workers == 1:
        return [batch]
    return [batch.subset(np.arange(w, len(batch), n_workers)) for w in range(n_workers)]


def pad_to_multiple(batch, n_workers: int):
    """Repeat the final example until len is divisible by n; padded copies get weight 0."""
    extra = (-len(batch)) % n_workers
    weights = np.ones(len(batch) + extra)
    if not extra:
        return batch, weights
    idx = np.concatenate([np.arange(len(batch)), np.full(extra, len(batch) - 1)])
    weights[len(batch):] = 0.0
    return batch.subset(idx), weights


@dataclass
class WorkerState:
    worker_id: int
    model: object
    batch: object = None
    weights: np.ndarray | None = None
    grads: dict = field(default_factory=dict)


def weighted_loss(model, batch, weights, scale):
    """scale * sum_i w_i * nll_i; with w=1 and scale=1/len this is the mean loss."""
    if model.config.head_input == "token":
        raise ConfigError("data-parallel training supports pooled and pair heads only")
    per = T.nll(model.logits(batch), batch.labels)
    return T.tsum(per * weights) * scale


def worker_gradients(state: WorkerState, scale: float):
    m = state.model
    m.zero_grad()
    loss = weighted_loss(m, state.batch, state.weights, scale)
    T.backward(loss)
    state.grads = {n: p.grad.copy() for n, p in m.params.items()}
    m.zero_grad()
    return loss.item()


def check_replicas(replicas):
    ref = replicas[0].model.params
    for r in replicas[1:]:
        for n, p in r.model.params.items():
            if not np.array_equal(p.data, ref[n].data):
                raise ConsistencyError(f"replica {r.worker_id} diverged on {n}")


def dp_step(replicas, optimizer: Optimizer, master) -> None:
    """Average worker gradients in ascending worker order, step, re-synchronise."""
    check_replicas(replicas)
    for n, p in master.params.items():
        if not np.array_equal(p.data, replicas[0].model.params[n].data):
            raise ConsistencyError(f"master and replicas disagree on {n}")
    ordered = sorted(replicas, key=lambda r: r.worker_id)
    inv = 1.0 / len(ordered)
    for n, p in master.params.items():
        total = ordered[0].grads[n].copy()
        for r in ordered[1:]:
            total = total + r.grads[n]
        p.grad = total * inv
    optimizer.step()
    optimizer.zero_grad()
    for r in ordered:
        for n, p in r.model.params.items():
            p.data = master.params[n].data.copy()


class DataParallelTrainer:
    def __init__(self, model, n_workers: int, lr: float, optimizer: str = "sgd", threads: bool = False):
        if n_workers < 1:
            raise ConfigError(f"n_workers must be >= 1, got {n_workers}")
        self.master = model
        self.n_workers = n_workers
        self.replicas = [WorkerState(w, model.clone()) for w in range(n_workers)]
        self.optimizer = Optimizer(model.parameters(), lr, optimizer)
        self.threads = threads

    def step(self, batch) -> float:
        n_real = len(batch)
        padded, weights = pad_to_multiple(batch, self.n_workers)
        shards = shard_batches(padded, self.n_workers)
        w_shards = [weights[w::self.n_workers] for w in range(self.n_workers)]
        # each shard's loss is scaled so the worker average equals the global mean
        scale = self.n_workers / n_real
        for r, shard, w in zip(self.replicas, shards, w_shards):
            r.batch, r.weights = shard, w
        if self.threads and self.n_workers > 1:
            with ThreadPoolExecutor(self.n_workers) as pool:
                losses = list(pool.map(lambda r: worker_gradients(r, scale), self.replicas))
        else:
            losses = [worker_gradients(r, scale) for r in self.replicas]
        dp_step(self.replicas, self.optimizer, self.master)
        return sum(losses) / self.n_workers


def single_process_step(model, batch, optimizer: Optimizer) -> float:
    optimizer.zero_grad()
    loss = T.cross_entropy(model.logits(batch), batch.labels)
    T.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss.item()


def dp_train(model, train, dev, n_workers: int, cfg: TrainConfig, threads=False, test=None):
    """Epochs of data-parallel steps over seeded global batches."""
    trainer = DataParallelTrainer(model, n_workers, cfg.lr, cfg.optimizer, threads)
    history = []
    for epoch in range(cfg.epochs):
        losses = [trainer.step(train.subset(idx))
                  for idx in index_batches(len(train), cfg.batch_size, cfg.seed + epoch)]
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if dev is not None and len(dev):
            rec["dev_acc"] = accuracy(model, dev)
        history.append(rec)
    report = MetricsReport(task="text_classify", mode="dp_train",
                           extra={"n_workers": n_workers, "history": history})
    if test is not None:
        report.accuracy, report.macro_f1 = score(model, test)
    return model, report
