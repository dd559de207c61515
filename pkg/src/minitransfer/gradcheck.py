"""Central-difference gradient verification."""
from __future__ import annotations

from .tensor import backward


def grad_check(loss_fn, params, epsilon=1e-5) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``loss_fn`` takes no arguments and rebuilds the graph from the current
    parameter values. The relative error of each coordinate uses the
    denominator ``max(1, |analytic|, |numeric|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        base = p.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += epsilon
            p.data = bumped.reshape(base.shape)
            up = loss_fn().item()
            bumped[i] = flat[i] - epsilon
            p.data = bumped.reshape(base.shape)
            down = loss_fn().item()
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        p.data = base
    for p in params:
        p.zero_grad()
    return worst
