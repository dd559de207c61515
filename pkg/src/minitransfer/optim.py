"""First-order optimizers over named Parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OptimizerStateError


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Optimizer:
    """Updates ``params`` in place from their accumulated ``.grad``.

    Gradients are left untouched; call :meth:`zero_grad` between steps.
    """

    def __init__(self, params, lr, kind="adam", **hyper):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names handed to optimizer")
        self.state = OptimizerState(kind=kind, lr=float(lr), **hyper)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        st = self.state
        st.step += 1
        if st.kind == "sgd":
            for p in self.params:
                p.data = p.data - st.lr * p.grad
            return
        t = st.step
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for p in self.params:
            m = st.m.get(p.name)
            v = st.v.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            elif m.shape != p.shape or v.shape != p.shape:
                raise OptimizerStateError(
                    f"moment shape {m.shape} does not match parameter {p.name} {p.shape}")
            m = st.beta1 * m + (1.0 - st.beta1) * p.grad
            v = st.beta2 * v + (1.0 - st.beta2) * p.grad * p.grad
            st.m[p.name], st.v[p.name] = m, v
            p.data = p.data - st.lr * (m / c1) / (np.sqrt(v / c2) + st.epsilon)


def SGD(params, lr):
    return Optimizer(params, lr, "sgd")


def Adam(params, lr, **hyper):
    return Optimizer(params, lr, "adam", **hyper)
