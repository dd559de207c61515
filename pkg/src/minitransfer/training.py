"""Supervised training loop shared by the pipelines and transfer trainers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE, Batch, make_batch, tokenize
from .evaluation import evaluate
from .optim import Optimizer


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-2
    batch_size: int = 16
    optimizer: str = "adam"
    patience: int = 3
    seed: int = 0


def encode_dataset(dataset, vocab, max_len) -> Batch:
    return make_batch(list(dataset), vocab, max_len)


def index_batches(n, batch_size, seed, shuffle=True):
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict(model, data: Batch, chunk=256) -> list:
    """Class ids, or per-token tag lists for a token head."""
    out = []
    for start in range(0, len(data), chunk):
        part = data.subset(np.arange(start, min(start + chunk, len(data))))
        pred = model.predict_batch(part)
        if model.config.head_input != "token":
            out.extend(int(p) for p in pred)
            continue
        for row, ex in zip(pred, part.examples):
            n = min(len(tokenize(ex.text_a)), data.ids.shape[1] - 1)
            out.append([int(t) for t in row[1:1 + n]])
    return out


def gold_of(data: Batch) -> list:
    if data.labels is None:
        return []
    if data.labels.ndim == 1:
        return [int(x) for x in data.labels]
    return [[int(t) for t in row if t != IGNORE] for row in data.labels]


def score(model, data: Batch, task=None) -> tuple[float, float]:
    task = task or ("sequence_label" if model.config.head_input == "token" else "text_classify")
    preds = predict(model, data)
    gold = gold_of(data)
    if task == "sequence_label":
        preds = [p[:len(g)] for p, g in zip(preds, gold)]
    return evaluate(preds, gold, task)


def accuracy(model, data: Batch) -> float:
    return score(model, data)[0]


def trainable(model, frozen_prefixes=()):
    return [p for n, p in model.params.items()
            if not any(n.startswith(f) for f in frozen_prefixes)]


def fit(model, train: Batch, dev: Batch | None, cfg: TrainConfig, frozen_prefixes=(),
        loss_fn=None):
    """Mini-batch training with early stopping on dev accuracy.

    Returns ``(best_model, history)``; ``best_model`` is a copy holding the
    parameters of the best dev epoch (the last epoch when ``dev`` is None).
    """
    loss_fn = loss_fn or (lambda m, b: m.loss(b))
    params = trainable(model, frozen_prefixes)
    best, best_acc, stale = model.clone(), -1.0, 0
    history = []
    if cfg.epochs <= 0 or not params:
        return best, history
    opt = Optimizer(params, cfg.lr, cfg.optimizer)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in index_batches(len(train), cfg.batch_size, cfg.seed + epoch):
            opt.zero_grad()
            loss = loss_fn(model, train.subset(idx))
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        record = {"epoch": epoch, "train_loss": total / len(train)}
        if dev is not None and len(dev):
            acc = accuracy(model, dev)
            record["dev_acc"] = acc
            if acc > best_acc:
                best, best_acc, stale = model.clone(), acc, 0
            else:
                stale += 1
        else:
            best = model.clone()
        history.append(record)
        if dev is not None and len(dev) and stale >= cfg.patience:
            break
    opt.zero_grad()
    return best, history
