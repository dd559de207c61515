"""Meta-learning: first-order meta-initialisation over a task family, then few-shot adaptation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DomainDataset, n_classes, stratified_counts
from .errors import CompatibilityError, ConfigError, DataError
from .evaluation import MetricsReport
from .layers import ModelConfig, build_model
from .optim import Optimizer
from .training import encode_dataset, score

FEWSHOT_FRACTIONS = (0.05, 0.10, 0.20)


@dataclass
class MetaConfig:
    inner_steps: int = 5
    inner_lr: float = 1e-2
    inner_optimizer: str = "adam"
    outer_step: float = 0.5
    episodes: int = 200
    episode_size: int = 32
    support_fraction: float = 0.5
    seed: int = 0

    def validate(self):
        problems = []
        if self.inner_steps < 1:
            problems.append(f"inner_steps must be >= 1, got {self.inner_steps}")
        if not 0.0 <= self.outer_step <= 1.0:
            problems.append(f"outer_step must lie in [0, 1], got {self.outer_step}")
        if not 0.0 < self.support_fraction < 1.0:
            problems.append(f"support_fraction must lie in (0, 1), got {self.support_fraction}")
        if self.episodes < 0:
            problems.append(f"episodes must be >= 0, got {self.episodes}")
        if problems:
            raise ConfigError("invalid meta config: " + "; ".join(problems), problems)


@dataclass
class TaskEpisode:
    domain: str
    support: np.ndarray
    query: np.ndarray


def sample_episode(domain_index, dataset_size, cfg: MetaConfig, rng, domain="") -> TaskEpisode:
    size = min(cfg.episode_size, dataset_size)
    picked = rng.choice(dataset_size, size=size, replace=False)
    n_support = max(1, min(size - 1, int(round(cfg.support_fraction * size))))
    return TaskEpisode(domain, picked[:n_support], picked[n_support:])


def interpolate(theta: dict, theta_prime: dict, eps: float) -> dict:
    """(1 - eps) * theta + eps * theta_prime, per parameter."""
    return {n: (1.0 - eps) * theta[n] + eps * theta_prime[n] for n in theta}


def inner_loop(model, batch, cfg: MetaConfig):
    opt = Optimizer(model.parameters(), cfg.inner_lr, cfg.inner_optimizer)
    for _ in range(cfg.inner_steps):
        opt.zero_grad()
        T.backward(model.loss(batch))
        opt.step()
    opt.zero_grad()


def meta_train(task_family, cfg: MetaConfig, model_cfg: ModelConfig, vocab, log_path=None):
    """Returns ``(meta Checkpoint, episode log)``."""
    cfg.validate()
    family = list(task_family)
    if len(family) < 2:
        raise ConfigError("meta_train needs at least 2 domains (one domain is plain fine-tuning)")
    n_out = n_classes(family)
    if model_cfg.head != n_out:
        model_cfg = ModelConfig(**{**model_cfg.__dict__, "head": n_out})
    model = build_model(model_cfg, {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
    encoded = [encode_dataset(ds, vocab, model_cfg.max_len) for ds in family]
    rng = np.random.default_rng(cfg.seed)
    log = []
    for episode in range(cfg.episodes):
        d = int(rng.integers(len(family)))
        ep = sample_episode(d, len(encoded[d]), cfg, rng, family[d].domain)
        theta = model.state_dict()
        inner_loop(model, encoded[d].subset(ep.support), cfg)
        theta_prime = model.state_dict()
        with T.no_grad():
            query_loss = model.loss(encoded[d].subset(ep.query)).item() if len(ep.query) else 0.0
        model.load_state_dict(interpolate(theta, theta_prime, cfg.outer_step))
        log.append({"episode": episode, "domain": ep.domain, "query_loss": query_loss})
    if log_path is not None:
        _write_jsonl(log, log_path)
    ckpt = Checkpoint.from_model(model, episodes=cfg.episodes, outer_step=cfg.outer_step,
                                 domains=[ds.domain for ds in family])
    return ckpt, log


def _write_jsonl(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def adapt(model, data, steps: int, lr: float = 1e-2, batch_size: int = 16, seed: int = 0):
    """Plain fine-tuning for ``steps`` optimizer steps over reshuffled mini-batches."""
    model = model.clone()
    if steps <= 0:
        return model
    opt = Optimizer(model.parameters(), lr, "adam")
    rng = np.random.default_rng(seed)
    queue = []
    for _ in range(steps):
        if not queue:
            order = rng.permutation(len(data))
            queue = [order[i:i + batch_size] for i in range(0, len(data), batch_size)]
        opt.zero_grad()
        T.backward(model.loss(data.subset(queue.pop(0))))
        opt.step()
    opt.zero_grad()
    return model


def meta_adapt(meta_ckpt, fewshot, steps: int, vocab=None, test=None, lr: float = 1e-2,
               batch_size: int = 16, seed: int = 0):
    """Fine-tune a meta checkpoint on few-shot data; report accuracy before and after."""
    if not len(fewshot):
        raise DataError("few-shot dataset is empty")
    if isinstance(meta_ckpt, Checkpoint):
        if vocab is not None and vocab.digest != meta_ckpt.vocab_digest:
            raise CompatibilityError("few-shot vocabulary does not match the meta checkpoint")
        vocab = vocab or meta_ckpt.vocab()
        base = meta_ckpt.to_model()
    else:
        base = meta_ckpt
        if vocab is not None and base.meta.get("vocab_digest") not in (None, vocab.digest):
            raise CompatibilityError("few-shot vocabulary does not match the model")
    n_out = n_classes([fewshot])
    if n_out > base.config.head:
        base = base.with_head(n_out, seed)
    data = encode_dataset(fewshot, vocab, base.config.max_len)
    report = MetricsReport(task="text_classify", mode="meta_adapt")
    report.extra["fewshot_acc_before"] = score(base, data)[0]
    adapted = adapt(base, data, steps, lr, batch_size, seed)
    report.extra["fewshot_acc_after"] = score(adapted, data)[0]
    report.extra["steps"] = steps
    if test is not None:
        test_b = encode_dataset(test, vocab, base.config.max_len)
        report.extra["test_acc_before"] = score(base, test_b)[0]
        report.accuracy, report.macro_f1 = score(adapted, test_b)
    return adapted, report


def fewshot_fraction(dataset: DomainDataset, fraction: float, seed: int) -> DomainDataset:
    """Seeded stratified subsample of ceil(fraction * N) examples, original order kept."""
    if fraction not in FEWSHOT_FRACTIONS:
        raise ConfigError(f"fraction must be one of {FEWSHOT_FRACTIONS}, got {fraction}")
    n = len(dataset)
    total = math.ceil(fraction * n)
    if total < 1:
        raise DataError("fraction leaves no examples")
    by_class = {}
    for i, ex in enumerate(dataset.examples):
        by_class.setdefault(ex.label, []).append(i)
    counts = stratified_counts({c: len(v) for c, v in by_class.items()}, total)
    # every class keeps at least one example when the budget allows
    for c in sorted(counts, key=lambda c: len(by_class[c])):
        if counts[c] == 0 and total >= len(counts):
            donor = max(counts, key=lambda k: (counts[k], -k if isinstance(k, int) else 0))
            counts[donor] -= 1
            counts[c] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c in sorted(by_class):
        chosen.extend(rng.choice(by_class[c], size=counts[c], replace=False).tolist())
    return DomainDataset(dataset.domain, [dataset.examples[i] for i in sorted(chosen)])
