"""Model-based transfer: soft-label KD and patient hidden-state KD."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import n_classes
from .errors import ConfigError
from .evaluation import MetricsReport
from .layers import ModelConfig, build_model
from .training import TrainConfig, encode_dataset, fit, score

DISTILL_METHODS = ("KD", "PKD")


@dataclass
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.5
    method: str = "KD"
    layer_map: tuple | None = None
    beta: float = 0.0
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 16
    patience: int = 3
    seed: int = 0


def kd_objective(teacher_logits, student_logits, labels, T_: float, alpha: float):
    """alpha * CE(student, labels) + (1 - alpha) * T^2 * KL(teacher_T || student_T)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return T.cross_entropy(student_logits, labels)
    soft = T.kl_soft(teacher_logits, student_logits, T_) * (T_ * T_)
    if alpha == 0.0:
        return soft
    return T.cross_entropy(student_logits, labels) * alpha + soft * (1.0 - alpha)


def pkd_hidden_objective(teacher_states, student_states, layer_map):
    """Mean over mapped (student, teacher) block pairs of the batch-mean squared
    distance between L2-normalised pooled states."""
    if not layer_map:
        raise ConfigError("layer_map is empty")
    terms = []
    for s_idx, t_idx in layer_map:
        t_hat = T.l2_normalize(T.detach(teacher_states[t_idx]))
        s_hat = T.l2_normalize(student_states[s_idx])
        diff = s_hat - t_hat
        terms.append(T.mean(T.tsum(diff * diff, axis=-1)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def default_layer_map(n_student: int, n_teacher: int) -> tuple:
    """Skip strategy: student block i -> teacher block ceil((i+1) * Lt / (Ls+1)), 1-based.

    Returned pairs are 0-based indices.
    """
    return tuple((i, math.ceil((i + 1) * n_teacher / (n_student + 1)) - 1) for i in range(n_student))


def validate_layer_map(layer_map, n_student, n_teacher):
    for s, t in layer_map:
        if not (0 <= s < n_student and 0 <= t < n_teacher):
            raise ConfigError(f"layer_map pair ({s}, {t}) out of range for "
                              f"{n_student} student / {n_teacher} teacher blocks")
    for (s0, t0), (s1, t1) in zip(layer_map, layer_map[1:]):
        if not (s1 > s0 and t1 > t0):
            raise ConfigError("layer_map must be strictly increasing in both coordinates")


class TeacherOutputs:
    """Frozen-teacher logits and per-block pooled states, cached by batch content."""

    def __init__(self, teacher):
        self.teacher = teacher
        self.cache = {}

    @staticmethod
    def key(batch) -> str:
        h = hashlib.sha256()
        for arr in (batch.ids, batch.mask, batch.segments):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __call__(self, batch):
        k = self.key(batch)
        if k not in self.cache:
            with T.no_grad():
                states, pooled, blocks = self.teacher.encode(batch.ids, batch.mask, return_blocks=True)
                logits = self.teacher.head(self.teacher.features(batch, (states, pooled)))
            self.cache[k] = (logits.data, [b.data for b in blocks])
        return self.cache[k]


def distill_train(teacher, student_cfg: ModelConfig, train, cfg: DistillConfig, vocab,
                  dev=None, test=None):
    """Train a student from ``student_cfg`` against a frozen teacher.

    Returns ``(student, MetricsReport)``; the report carries teacher and
    student accuracy and the teacher/student parameter-count ratio.
    """
    if cfg.method not in DISTILL_METHODS:
        raise ConfigError(f"unknown distillation method {cfg.method!r}")
    if not cfg.temperature > 0:
        raise ConfigError(f"temperature must be positive, got {cfg.temperature}")
    n_out = n_classes([train] + ([dev] if dev is not None else []))
    if teacher.config.head != n_out or student_cfg.head != n_out:
        raise ConfigError(f"label-space mismatch: teacher {teacher.config.head}, "
                          f"student {student_cfg.head}, data {n_out} classes")
    layer_map = ()
    if cfg.method == "PKD":
        layer_map = tuple(tuple(p) for p in (cfg.layer_map or default_layer_map(
            student_cfg.n_blocks, teacher.config.n_blocks)))
        validate_layer_map(layer_map, student_cfg.n_blocks, teacher.config.n_blocks)
    student = build_model(student_cfg, {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
    outputs = TeacherOutputs(teacher)

    def loss_fn(model, batch):
        t_logits, t_blocks = outputs(batch)
        states, pooled, blocks = model.encode(batch.ids, batch.mask, return_blocks=True)
        s_logits = model.head(model.features(batch, (states, pooled)))
        loss = kd_objective(t_logits, s_logits, batch.labels, cfg.temperature, cfg.alpha)
        if cfg.method == "PKD":
            loss = loss + pkd_hidden_objective(t_blocks, blocks, layer_map) * cfg.beta
        return loss

    max_len = student_cfg.max_len
    train_b = encode_dataset(train, vocab, max_len)
    dev_b = encode_dataset(dev, vocab, max_len) if dev is not None else None
    tc = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, "adam", cfg.patience, cfg.seed)
    student, history = fit(student, train_b, dev_b, tc, loss_fn=loss_fn)
    report = MetricsReport(task="text_classify", mode="distill", extra={
        "method": cfg.method, "param_ratio": teacher.n_params() / student.n_params(),
        "teacher_params": teacher.n_params(), "student_params": student.n_params(),
        "history": history})
    if test is not None:
        test_b = encode_dataset(test, vocab, max_len)
        report.accuracy, report.macro_f1 = score(student, test_b)
        report.extra["teacher_acc"] = score(teacher, test_b)[0]
        report.extra["student_acc"] = report.accuracy
    return student, report
