"""Accuracy and macro-F1."""
from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field

from . import __version__
from .errors import EvaluationError


def _flatten(predictions, gold, task):
    predictions, gold = list(predictions), list(gold)
    if len(predictions) != len(gold):
        raise EvaluationError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if task != "sequence_label":
        return [int(p) for p in predictions], [int(g) for g in gold]
    flat_p, flat_g = [], []
    for i, (p, g) in enumerate(zip(predictions, gold)):
        if len(p) != len(g):
            raise EvaluationError(f"sequence {i}: {len(p)} predicted tags for {len(g)} gold tags")
        flat_p.extend(int(t) for t in p)
        flat_g.extend(int(t) for t in g)
    return flat_p, flat_g


def evaluate(predictions, gold, task="text_classify") -> tuple[float, float]:
    """Return (accuracy, macro-F1).

    Sequence labelling is scored per token. Classes absent from both gold
    and predictions do not enter the macro average.
    """
    pred, ref = _flatten(predictions, gold, task)
    if not ref:
        return 0.0, 0.0
    # exact rationals until the end, so hand-computed cases match bit for bit
    accuracy = Fraction(sum(p == g for p, g in zip(pred, ref)), len(ref))
    scores = []
    for c in sorted(set(pred) | set(ref)):
        tp = sum(p == c and g == c for p, g in zip(pred, ref))
        fp = sum(p == c and g != c for p, g in zip(pred, ref))
        fn = sum(p != c and g == c for p, g in zip(pred, ref))
        scores.append(Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0))
    return float(accuracy), float(sum(scores) / len(scores))


@dataclass
class MetricsReport:
    task: str
    mode: str
    accuracy: float = 0.0
    macro_f1: float = 0.0
    per_domain: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    config_digest: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self, wall_clock=True) -> dict:
        d = asdict(self)
        if not wall_clock:
            d.pop("wall_clock_seconds")
        return d

    def to_json(self, wall_clock=True) -> str:
        return json.dumps(self.to_dict(wall_clock), indent=2, sort_keys=True) + "\n"
