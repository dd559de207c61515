"""Strict pipeline configuration: validation, defaults and digests."""
from __future__ import annotations

import difflib
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ConfigError

TASKS = ("text_classify", "text_match", "sequence_label")
MODES = ("train", "eval", "predict", "pretrain", "finetune", "feature_tl", "instance_tl",
         "distill", "meta_train", "meta_adapt", "dp_train", "speedup_table")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class DataBlock(_Strict):
    train: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    source: Optional[str] = None
    target: Optional[str] = None
    predictions: Optional[str] = None


class ModelBlock(_Strict):
    hidden_dim: int = 16
    n_blocks: int = 1
    max_len: int = 16
    checkpoint: Optional[str] = None
    teacher: Optional[str] = None
    registry: Optional[str] = None
    name: Optional[str] = None


class TrainBlock(_Strict):
    epochs: int = 10
    lr: float = 1e-2
    batch_size: int = 16
    optimizer: Literal["adam", "sgd"] = "adam"
    patience: int = 3


class PretrainBlock(_Strict):
    mask_prob: float = 0.15
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 16


class FinetuneBlock(_Strict):
    frozen: list[str] = []
    head_seed: int = 0


class FeatureBlock(_Strict):
    tl_mode: Literal["FS", "SS", "SS_ADV", "DRSS"] = "SS_ADV"
    lam: float = 1.0
    max_ratio: int = 4
    # the adversarial game has its own optimizer settings; the train block's are ignored here
    optimizer: Literal["adam", "sgd"] = "sgd"
    lr: float = 0.1
    epochs: int = 20
    patience: int = 20
    disc_lr: float = 1e-2
    disc_steps: int = 5


class InstanceBlock(_Strict):
    episodes: int = 1200
    inner_steps: int = 3
    source_batch: int = 4
    target_batch: int = 100
    selector_lr: float = 1.0
    selector_optimizer: Literal["adam", "sgd"] = "sgd"
    selector_hidden: int = 0
    task_lr: float = 0.1
    task_optimizer: Literal["adam", "sgd"] = "sgd"
    p_min: float = 0.05
    warmup_epochs: int = 30
    warmup_batch: int = 16


class DistillBlock(_Strict):
    method: Literal["KD", "PKD"] = "KD"
    temperature: float = 2.0
    alpha: float = 0.5
    beta: float = 0.0
    layer_map: Optional[list[list[int]]] = None
    student_blocks: int = 1


class MetaBlock(_Strict):
    inner_steps: int = 5
    inner_lr: float = 1e-2
    outer_step: float = 0.5
    episodes: int = 200
    episode_size: int = 32
    support_fraction: float = 0.5
    adapt_steps: int = 20


class DPBlock(_Strict):
    n_workers: int = 2
    threads: bool = False


class SpeedupBlock(_Strict):
    t_sample: float
    param_bytes: float
    bandwidth: float
    latency: float
    global_batch: int
    workers: list[int] = [1, 2, 4, 8, 16, 32]


ALGORITHM_BLOCKS = {
    "pretrain": PretrainBlock, "finetune": FinetuneBlock, "feature_tl": FeatureBlock,
    "instance_tl": InstanceBlock, "distill": DistillBlock, "meta_train": MetaBlock,
    "meta_adapt": MetaBlock, "dp_train": DPBlock, "speedup_table": SpeedupBlock,
}

# dotted paths that must be non-null for each mode
REQUIRED = {
    "train": ("data.train",),
    "eval": ("data.test",),
    "predict": ("data.test", "model.checkpoint"),
    "pretrain": ("data.train",),
    "finetune": ("data.train", "model.checkpoint"),
    "feature_tl": ("data.source", "data.target"),
    "instance_tl": ("data.source", "data.target", "data.dev"),
    "distill": ("data.train", "model.teacher"),
    "meta_train": ("data.train",),
    "meta_adapt": ("data.train", "model.checkpoint"),
    "dp_train": ("data.train",),
    "speedup_table": (),
}


class PipelineConfig(_Strict):
    task: Literal["text_classify", "text_match", "sequence_label"]
    mode: Literal[MODES]
    seed: int
    output: str = "runs/default"
    data: DataBlock = DataBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    algorithm: dict = {}

    def block(self):
        """The typed algorithm block for this mode (None when the mode has none)."""
        cls = ALGORITHM_BLOCKS.get(self.mode)
        return cls(**self.algorithm) if cls else None


def _fields(cls) -> list[str]:
    return list(cls.model_fields)


def _all_paths() -> list[str]:
    out = []
    for name, f in PipelineConfig.model_fields.items():
        ann = f.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out.extend(f"{name}.{k}" for k in ann.model_fields)
        else:
            out.append(name)
    return out


def _model_at(loc) -> type | None:
    cls = PipelineConfig
    for part in loc:
        if cls is None or part not in cls.model_fields:
            return None
        ann = cls.model_fields[part].annotation
        cls = ann if isinstance(ann, type) and issubclass(ann, BaseModel) else None
    return cls


def _format(err, prefix=()) -> str:
    loc = tuple(prefix) + tuple(str(p) for p in err["loc"])
    path = ".".join(loc)
    if err["type"] == "missing":
        return f"{path}: field required"
    if err["type"] == "extra_forbidden":
        parent = _model_at(err["loc"][:-1]) if not prefix else err.get("_parent")
        known = _fields(parent) if parent else []
        key = str(err["loc"][-1])
        hint = difflib.get_close_matches(key, known, n=1)
        if hint:
            hint = ".".join(loc[:-1] + (hint[0],))
        else:
            nested = _all_paths()
            near = difflib.get_close_matches(key, [p.rsplit(".", 1)[-1] for p in nested], n=1)
            hint = next((p for p in nested if p.rsplit(".", 1)[-1] == near[0]), None) if near else None
        extra = f" (did you mean {hint!r}?)" if hint else ""
        return f"{path}: unknown key{extra}"
    return f"{path}: {err['msg']}"


def _defaults_injected(raw: dict, resolved: dict, prefix="") -> list[str]:
    out = []
    for key, value in resolved.items():
        path = f"{prefix}{key}"
        given = raw.get(key) if isinstance(raw, dict) else None
        if isinstance(value, dict) and key != "algorithm":
            out.extend(_defaults_injected(given if isinstance(given, dict) else {}, value, path + "."))
        elif key not in raw and key != "algorithm":
            out.append(path)
    return out


def validate_config(raw) -> dict:
    """Return the resolved config dict or raise ConfigError carrying every problem."""
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object", ["<root>: expected an object"])
    errors = []
    cfg = None
    try:
        cfg = PipelineConfig(**raw)
    except ValidationError as exc:
        errors.extend(_format(e) for e in exc.errors())
    mode = raw.get("mode")
    block = None
    if mode in ALGORITHM_BLOCKS and isinstance(raw.get("algorithm", {}), dict):
        cls = ALGORITHM_BLOCKS[mode]
        try:
            block = cls(**raw.get("algorithm", {}))
        except ValidationError as exc:
            for e in exc.errors():
                e = dict(e, _parent=cls)
                errors.append(_format(e, ("algorithm",)))
    elif mode in MODES and raw.get("algorithm"):
        errors.append(f"algorithm: mode {mode!r} takes no algorithm block")
    if mode in REQUIRED:
        for path in REQUIRED[mode]:
            section, key = path.split(".")
            value = raw.get(section, {})
            if not isinstance(value, dict) or value.get(key) is None:
                errors.append(f"{path}: required for mode {mode!r}")
    if mode == "eval" and not (raw.get("data", {}) or {}).get("predictions") \
            and not (raw.get("model", {}) or {}).get("checkpoint"):
        errors.append("model.checkpoint: eval needs a checkpoint or data.predictions")
    task = raw.get("task")
    if mode in ("feature_tl", "instance_tl") and task in TASKS and task != "text_classify":
        errors.append(f"task: mode {mode!r} supports text_classify only")
    elif task == "sequence_label" and mode in ("distill", "meta_train", "meta_adapt", "dp_train"):
        errors.append(f"task: mode {mode!r} supports sentence-level tasks only")
    if errors:
        raise ConfigError(f"{len(errors)} config error(s):\n  " + "\n  ".join(errors), errors)
    resolved = cfg.model_dump()
    if block is not None:
        resolved["algorithm"] = block.model_dump()
    resolved["defaults_injected"] = sorted(
        _defaults_injected(raw, resolved)
        + [f"algorithm.{k}" for k in resolved["algorithm"] if k not in raw.get("algorithm", {})])
    return resolved


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode("utf-8")).hexdigest()


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", [f"--config: {path} does not exist"])
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})", [f"--config: {exc}"]) from None


def write_resolved(resolved: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
