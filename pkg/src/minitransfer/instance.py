"""Instance-based transfer with a reinforced source-sample selector.

Each episode the selector samples an inclusion mask over a source batch,
the task model trains on the kept source samples together with target
data, and the change in target dev accuracy is the reward. The selector
follows REINFORCE with a moving-average baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TransferSetting, build_vocab, n_classes
from .errors import ConfigError
from .evaluation import MetricsReport, evaluate
from .layers import ModelConfig, _uniform, build_model
from .optim import Optimizer
from .tensor import Parameter
from .training import TrainConfig, encode_dataset, fit


class SelectorPolicy:
    """Scorer over per-sample features -> inclusion probability.

    ``hidden=None`` gives a linear scorer without intercept: with batch-centred
    features it can only rank samples within a batch, not gate the whole
    source. Otherwise one tanh hidden layer.
    """

    def __init__(self, in_dim: int, hidden: int | None = 8, seed: int = 0, p_min: float = 0.05):
        if not 0 < p_min < 0.5:
            raise ConfigError(f"p_min must lie in (0, 0.5), got {p_min}")
        rng = np.random.default_rng(seed)
        self.p_min = p_min
        self.hidden = hidden
        if hidden:
            self.params = [Parameter("selector/W1", _uniform(rng, in_dim, (in_dim, hidden))),
                           Parameter("selector/b1", np.zeros(hidden)),
                           Parameter("selector/W2", _uniform(rng, hidden, (hidden, 1))),
                           Parameter("selector/b2", np.zeros(1))]
        else:
            self.params = [Parameter("selector/W", _uniform(rng, in_dim, (in_dim, 1)))]

    def logits(self, feats):
        if self.hidden:
            W1, b1, W2, b2 = self.params
            return T.reshape(T.tanh(feats @ W1 + b1) @ W2 + b2, (-1,))
        return T.reshape(feats @ self.params[0], (-1,))

    def probs(self, feats):
        """Inclusion probabilities squashed into [p_min, 1 - p_min].

        An affine floor rather than a clamp, so the gradient never vanishes.
        """
        p = T.sigmoid(self.logits(feats)) * (1.0 - 2.0 * self.p_min) + self.p_min
        # rounding can push the affine map one ulp past the bounds
        return T.clip(p, self.p_min, 1.0 - self.p_min)

    def state(self):
        return [p.data.copy() for p in self.params]


def mask_log_prob(probs, mask):
    """sum log p over kept + sum log(1 - p) over dropped."""
    keep = np.asarray(mask, dtype=np.float64)
    return T.tsum(T.log(probs) * keep + T.log(1.0 - probs) * (1.0 - keep))


def select_batch(policy: SelectorPolicy, feats, rng):
    """Independent Bernoulli draws; returns (mask, log-prob tensor, probabilities)."""
    probs = policy.probs(T.as_tensor(feats))
    if probs.shape[0] == 0:
        raise ConfigError("select_batch needs a nonempty batch")
    mask = rng.random(probs.shape[0]) < probs.data
    return mask, mask_log_prob(probs, mask), probs.data


def policy_gradient(policy: SelectorPolicy, feats, mask, advantage: float) -> list:
    """Gradient of advantage * log P(mask) w.r.t. the selector parameters."""
    for p in policy.params:
        p.zero_grad()
    T.backward(mask_log_prob(policy.probs(T.as_tensor(feats)), mask) * advantage)
    grads = [p.grad.copy() for p in policy.params]
    for p in policy.params:
        p.zero_grad()
    return grads


@dataclass
class RewardTracker:
    decay: float = 0.9
    baseline: float = 0.0
    history: list = field(default_factory=list)

    def update(self, reward: float) -> float:
        """Record ``reward``; return the advantage against the pre-update baseline."""
        advantage = reward - self.baseline
        self.history.append(reward)
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * reward
        return advantage

    def recompute(self) -> float:
        b = 0.0
        for r in self.history:
            b = self.decay * b + (1.0 - self.decay) * r
        return b


@dataclass
class RTLConfig:
    # small source batches give each inclusion decision a visible effect on
    # the reward; the full target set per step keeps that reward low-noise
    episodes: int = 1200
    inner_steps: int = 3
    source_batch: int = 4
    target_batch: int = 100
    selector_lr: float = 1.0
    selector_optimizer: str = "sgd"
    selector_hidden: int = 0
    task_lr: float = 0.1
    task_optimizer: str = "sgd"
    p_min: float = 0.05
    warmup_epochs: int = 30
    warmup_batch: int = 16
    hidden_dim: int = 16
    n_blocks: int = 1
    max_len: int = 16
    dev_cap: int = 256
    seed: int = 0

    def validate(self):
        if self.episodes < 0:
            raise ConfigError(f"episodes must be >= 0, got {self.episodes}")
        if not 0 < self.p_min < 0.5:
            raise ConfigError(f"p_min must lie in (0, 0.5), got {self.p_min}")


def _standardize(x):
    return (x - x.mean()) / (x.std() + 1e-8)


def selector_features(model, batch, centroid):
    """[pooled (detached), per-sample task loss, cosine to target centroid].

    Pooled columns are centred and the two scalar columns standardised
    within the batch.
    """
    with T.no_grad():
        _, pooled = model.encode(batch.ids, batch.mask)
        losses = T.nll(model.head(pooled), batch.labels).data
    pooled = pooled.data
    cos = pooled @ centroid / (np.linalg.norm(pooled, axis=1) * np.linalg.norm(centroid) + 1e-12)
    return np.concatenate([pooled - pooled.mean(axis=0), _standardize(losses)[:, None],
                           _standardize(cos)[:, None]], axis=1)


def _centroid(model, batch):
    with T.no_grad():
        return model.encode(batch.ids, batch.mask)[1].data.mean(axis=0)


def _dev_accuracy(model, dev):
    with T.no_grad():
        return evaluate(model.logits(dev).data.argmax(axis=-1), dev.labels)[0]


def rtl_train(setting: TransferSetting, cfg: RTLConfig = RTLConfig(), vocab=None, log_path=None,
              reward_fn=None):
    """Warm start on target data, then alternate selection, task training and policy updates.

    ``reward_fn(delta, baseline)``, when given, replaces the dev-accuracy
    delta as the reward. Returns ``(task_model, policy, history)``;
    ``history`` holds one dict per episode with reward, baseline and
    selection rate.
    """
    cfg.validate()
    if setting.target_dev is None or not len(setting.target_dev):
        raise ConfigError("rtl_train needs a nonempty target dev split")
    vocab = vocab or build_vocab(setting.texts())
    n_out = n_classes([setting.source, setting.target])
    model = build_model(ModelConfig(vocab_size=len(vocab), hidden_dim=cfg.hidden_dim,
                                    n_blocks=cfg.n_blocks, max_len=cfg.max_len, head=n_out,
                                    seed=cfg.seed), {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
    src = encode_dataset(setting.source, vocab, cfg.max_len)
    tgt = encode_dataset(setting.target, vocab, cfg.max_len)
    dev = encode_dataset(list(setting.target_dev)[:cfg.dev_cap], vocab, cfg.max_len)
    warm = TrainConfig(epochs=cfg.warmup_epochs, lr=cfg.task_lr, batch_size=cfg.warmup_batch,
                       patience=cfg.warmup_epochs, seed=cfg.seed)
    model, _ = fit(model, tgt, None, warm)
    policy = SelectorPolicy(cfg.hidden_dim + 2, cfg.selector_hidden or None, cfg.seed + 1, cfg.p_min)
    tracker = RewardTracker()
    rng = np.random.default_rng(cfg.seed)
    task_opt = Optimizer(model.parameters(), cfg.task_lr, cfg.task_optimizer)
    sel_opt = Optimizer(policy.params, cfg.selector_lr, cfg.selector_optimizer)
    history = []
    prev_acc = _dev_accuracy(model, dev)
    for episode in range(cfg.episodes):
        centroid = _centroid(model, tgt)
        s_batch = src.subset(rng.choice(len(src), size=min(cfg.source_batch, len(src)), replace=False))
        feats = selector_features(model, s_batch, centroid)
        for p in policy.params:
            p.zero_grad()
        mask, log_prob, _ = select_batch(policy, feats, rng)
        kept = np.flatnonzero(mask)
        for _ in range(cfg.inner_steps):
            t_batch = tgt.subset(rng.choice(len(tgt), size=min(cfg.target_batch, len(tgt)), replace=False))
            task_opt.zero_grad()
            loss = model.loss(t_batch)
            if len(kept):
                loss = loss + model.loss(s_batch.subset(kept))
            T.backward(loss)
            task_opt.step()
        acc = _dev_accuracy(model, dev)
        reward = acc - prev_acc
        prev_acc = acc
        if reward_fn is not None:
            reward = float(reward_fn(reward, tracker.baseline))
        advantage = tracker.update(reward)
        sel_opt.zero_grad()
        # ascend advantage * log P(mask)
        T.backward(log_prob * (-advantage))
        sel_opt.step()
        history.append({"episode": episode, "reward": reward, "baseline": tracker.baseline,
                        "selection_rate": float(mask.mean())})
    task_opt.zero_grad()
    sel_opt.zero_grad()
    if log_path is not None:
        write_history(history, log_path)
    return model, policy, history


def selection_probabilities(model, policy, setting: TransferSetting, vocab, max_len):
    """Inclusion probability of every source sample under the final model."""
    src = encode_dataset(setting.source, vocab, max_len)
    tgt = encode_dataset(setting.target, vocab, max_len)
    feats = selector_features(model, src, _centroid(model, tgt))
    with T.no_grad():
        return policy.probs(T.Tensor(feats)).data


def write_history(history, path):
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def rtl_report(model, policy, history, setting, vocab, max_len) -> MetricsReport:
    report = MetricsReport(task="text_classify", mode="instance_tl")
    if setting.target_test is not None:
        test = encode_dataset(setting.target_test, vocab, max_len)
        with T.no_grad():
            pred = model.logits(test).data.argmax(axis=-1)
        report.accuracy, report.macro_f1 = evaluate(pred, test.labels)
        report.per_domain["target"] = report.accuracy
    probs = selection_probabilities(model, policy, setting, vocab, max_len)
    report.extra = {"episodes": len(history), "mean_selection_probability": float(probs.mean()),
                    "final_baseline": history[-1]["baseline"] if history else 0.0}
    return report
