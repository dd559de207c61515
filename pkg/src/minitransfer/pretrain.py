"""Masked-token pretraining for the ModelZoo.

The output layer is tied to the embedding table, so pretraining adds no
parameters beyond the encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import CLS_ID, MASK_ID, PAD_ID, Vocab, tokenize
from .errors import DataError
from .optim import Optimizer


@dataclass
class PretrainConfig:
    mask_prob: float = 0.15
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    probe_size: int = 64


def _encode_corpus(corpus, vocab: Vocab, max_len):
    rows = []
    for item in corpus:
        toks = tokenize(item) if isinstance(item, str) else list(item)
        rows.append([CLS_ID] + vocab.ids(toks)[:max_len - 1])
    return rows


def mask_rows(rows, mask_prob, max_len, rng):
    """Pad rows and mask ceil(mask_prob * n) real positions of each.

    Returns ``(ids, attention_mask, flat_positions, targets)``.
    """
    b = len(rows)
    ids = np.full((b, max_len), PAD_ID, dtype=np.int64)
    att = np.zeros((b, max_len))
    positions, targets = [], []
    for r, row in enumerate(rows):
        ids[r, :len(row)] = row
        att[r, :len(row)] = 1.0
        n = len(row) - 1
        k = min(n, math.ceil(mask_prob * n)) if mask_prob > 0 else 0
        if k:
            chosen = np.sort(rng.choice(np.arange(1, n + 1), size=k, replace=False))
            positions.extend(r * max_len + chosen)
            targets.extend(ids[r, chosen])
            ids[r, chosen] = MASK_ID
    return ids, att, np.asarray(positions, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def masked_loss(model, ids, att, positions, targets):
    states, _ = model.encode(ids, att)
    flat = T.reshape(states, (-1, states.shape[-1]))
    picked = T.take(flat, positions)
    table = model.params["encoder/0/E"]
    return T.cross_entropy(picked @ T.swap_last(table), targets)


def pretrain_masked(model, corpus, vocab: Vocab, cfg: PretrainConfig = PretrainConfig(),
                    corpus_tag: str = "") -> Checkpoint:
    """Train ``model`` in place on the masked-token objective; return its checkpoint."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("pretraining corpus is empty")
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocab has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    max_len = model.config.max_len
    rows = _encode_corpus(corpus, vocab, max_len)
    probe_rng = np.random.default_rng([cfg.seed, 1])
    probe = mask_rows(rows[:cfg.probe_size], cfg.mask_prob, max_len, probe_rng)

    def probe_loss():
        if not len(probe[2]):
            return 0.0
        with T.no_grad():
            return masked_loss(model, *probe).item()

    initial = probe_loss()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters("encoder/")
    opt = Optimizer(params, cfg.lr, "adam")
    losses = []
    for _ in range(cfg.steps):
        pick = rng.choice(len(rows), size=min(cfg.batch_size, len(rows)), replace=False)
        batch = mask_rows([rows[i] for i in pick], cfg.mask_prob, max_len, rng)
        if not len(batch[2]):
            losses.append(0.0)
            continue
        opt.zero_grad()
        loss = masked_loss(model, *batch)
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    opt.zero_grad()
    model.meta.update(vocab=vocab.tokens, vocab_digest=vocab.digest)
    return Checkpoint.from_model(
        model, corpus=corpus_tag, mask_prob=cfg.mask_prob, steps=cfg.steps,
        initial_probe_loss=initial, final_probe_loss=probe_loss(),
        first_step_loss=losses[0] if losses else 0.0, last_step_loss=losses[-1] if losses else 0.0)
