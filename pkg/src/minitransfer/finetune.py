"""Fine-tuning a pretrained checkpoint on target data."""
from __future__ import annotations

from dataclasses import dataclass

from .checkpoint import Checkpoint
from .data import n_classes
from .errors import CompatibilityError, ConfigError
from .evaluation import MetricsReport
from .training import TrainConfig, encode_dataset, fit, score


@dataclass
class FinetuneConfig:
    base: str = ""
    epochs: int = 10
    lr: float = 1e-2
    batch_size: int = 16
    frozen: tuple = ()
    head_seed: int = 0
    patience: int = 3
    seed: int = 0
    optimizer: str = "adam"

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.batch_size, self.optimizer,
                           self.patience, self.seed)


def resolve_checkpoint(checkpoint, registry=None) -> Checkpoint:
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    if registry is None:
        raise ConfigError(f"checkpoint {checkpoint!r} given by name but no registry supplied")
    return registry.get(checkpoint)


def finetune(checkpoint, train, cfg: FinetuneConfig, dev=None, test=None, vocab=None,
             registry=None, head_input=None):
    """Continue training a checkpoint's encoder under a fresh head.

    Parameters whose names start with any of ``cfg.frozen`` are excluded
    from updates. Returns ``(best_dev_model, MetricsReport)``.
    """
    if cfg.lr <= 0:
        raise ConfigError(f"lr must be positive, got {cfg.lr}")
    ckpt = resolve_checkpoint(checkpoint or cfg.base, registry)
    ckpt_vocab = ckpt.vocab()
    if vocab is not None and vocab.digest != ckpt.vocab_digest:
        raise CompatibilityError(
            f"data vocabulary digest {vocab.digest[:12]} does not match checkpoint "
            f"{ckpt.vocab_digest[:12]}")
    vocab = vocab or ckpt_vocab
    if vocab is None:
        raise CompatibilityError("checkpoint carries no vocabulary and none was supplied")
    base = ckpt.to_model()
    if head_input and head_input != base.config.head_input:
        from .layers import Model, ModelConfig
        base = Model(ModelConfig(**{**base.config.__dict__, "head_input": head_input}),
                     base.params, base.meta)
    n_out = n_classes([train] + ([dev] if dev is not None else []))
    model = base.with_head(n_out, cfg.head_seed)
    max_len = model.config.max_len
    train_b = encode_dataset(train, vocab, max_len)
    dev_b = encode_dataset(dev, vocab, max_len) if dev is not None else None
    best, history = fit(model, train_b, dev_b, cfg.train_config(), cfg.frozen)
    task = "sequence_label" if model.config.head_input == "token" else "text_classify"
    report = MetricsReport(task=task, mode="finetune", extra={"history": history})
    if dev_b is not None:
        report.extra["dev_accuracy"] = score(best, dev_b)[0]
    if test is not None:
        report.accuracy, report.macro_f1 = score(best, encode_dataset(test, vocab, max_len))
    return best, report
