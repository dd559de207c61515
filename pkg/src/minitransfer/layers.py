"""Layer API: configurable encoder stacks with a classification head."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE
from .errors import ConfigError
from .tensor import Parameter

LAYER_KINDS = ("embedding", "dense", "lstm_cell", "attention_block", "mean_pool")
HEAD_INPUTS = ("pooled", "pair", "token")
N_RESERVED = 4
MASK_NEG = -1e9


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "none"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    n_blocks: int = 1
    max_len: int = 32
    head: int = 2
    seed: int = 0
    encoder: tuple = ()
    head_input: str = "pooled"

    def layers(self) -> tuple:
        """The explicit encoder stack, or embedding + n_blocks attention blocks + mean pool."""
        if self.encoder:
            return tuple(s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in self.encoder)
        h = self.hidden_dim
        return ((LayerSpec("embedding", self.vocab_size, h),)
                + tuple(LayerSpec("attention_block", h, h) for _ in range(self.n_blocks))
                + (LayerSpec("mean_pool", h, h),))

    def validate(self):
        problems = []
        if self.vocab_size < N_RESERVED:
            problems.append(f"vocab_size must be >= {N_RESERVED}, got {self.vocab_size}")
        if self.hidden_dim < 1:
            problems.append(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.n_blocks < 0:
            problems.append(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.max_len < 2:
            problems.append(f"max_len must be >= 2, got {self.max_len}")
        if self.head < 0:
            problems.append(f"head must be >= 0, got {self.head}")
        if self.head_input not in HEAD_INPUTS:
            problems.append(f"head_input must be one of {HEAD_INPUTS}")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems), problems)
        specs = self.layers()
        for i, s in enumerate(specs):
            if s.kind not in LAYER_KINDS:
                problems.append(f"layer {i}: unknown kind {s.kind!r}")
            if s.activation not in T.ACTIVATIONS:
                problems.append(f"layer {i}: unknown activation {s.activation!r}")
            if s.kind in ("attention_block", "mean_pool") and s.in_dim != s.out_dim:
                problems.append(f"layer {i}: {s.kind} must preserve width ({s.in_dim} -> {s.out_dim})")
            if s.kind == "mean_pool" and i != len(specs) - 1:
                problems.append(f"layer {i}: mean_pool must be the last layer")
            if s.kind == "embedding" and i != 0:
                problems.append(f"layer {i}: embedding must be the first layer")
        if not specs or specs[0].kind != "embedding":
            problems.append("the encoder must start with an embedding layer")
        elif specs[0].in_dim != self.vocab_size:
            problems.append(f"embedding rows {specs[0].in_dim} != vocab_size {self.vocab_size}")
        for i in range(1, len(specs)):
            a, b = specs[i - 1], specs[i]
            if a.out_dim != b.in_dim:
                problems.append(
                    f"layers {i - 1} ({a.kind}, out={a.out_dim}) and {i} ({b.kind}, in={b.in_dim})"
                    " are dimension-incompatible")
        if specs and specs[-1].out_dim != self.hidden_dim:
            problems.append(f"encoder output width {specs[-1].out_dim} != hidden_dim {self.hidden_dim}")
        n_attn = sum(s.kind == "attention_block" for s in specs)
        if self.encoder and n_attn != self.n_blocks:
            problems.append(f"n_blocks={self.n_blocks} but the encoder has {n_attn} attention blocks")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems), problems)

    @property
    def head_width(self) -> int:
        return 4 * self.hidden_dim if self.head_input == "pair" else self.hidden_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = [asdict(s) if isinstance(s, LayerSpec) else dict(s) for s in self.encoder]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = tuple(LayerSpec(**s) for s in d.get("encoder", ()))
        return cls(**d)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layer_params(i, spec: LayerSpec, rng) -> dict:
    p = f"encoder/{i}"
    n, m = spec.in_dim, spec.out_dim
    if spec.kind == "embedding":
        return {f"{p}/E": _uniform(rng, n, (n, m))}
    if spec.kind == "dense":
        return {f"{p}/W": _uniform(rng, n, (n, m)), f"{p}/b": np.zeros(m)}
    if spec.kind == "lstm_cell":
        b = np.zeros(4 * m)
        b[m:2 * m] = 1.0  # forget gate
        return {f"{p}/W": _uniform(rng, n, (n, 4 * m)), f"{p}/U": _uniform(rng, m, (m, 4 * m)),
                f"{p}/b": b}
    if spec.kind == "attention_block":
        h = n
        out = {}
        for name in ("q", "k", "v", "o"):
            out[f"{p}/W{name}"] = _uniform(rng, h, (h, h))
            out[f"{p}/b{name}"] = np.zeros(h)
        out[f"{p}/ln1_g"], out[f"{p}/ln1_b"] = np.ones(h), np.zeros(h)
        out[f"{p}/W1"], out[f"{p}/b1"] = _uniform(rng, h, (h, h)), np.zeros(h)
        out[f"{p}/W2"], out[f"{p}/b2"] = _uniform(rng, h, (h, h)), np.zeros(h)
        out[f"{p}/ln2_g"], out[f"{p}/ln2_b"] = np.ones(h), np.zeros(h)
        return out
    return {}


def head_params(width: int, n_out: int, seed_or_rng) -> dict:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return {"head/W": _uniform(rng, width, (width, n_out)), "head/b": np.zeros(n_out)}


def build_model(config: ModelConfig, meta: dict | None = None) -> "Model":
    """Deterministic initialisation from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for i, spec in enumerate(config.layers()):
        arrays.update(_layer_params(i, spec, rng))
    if config.head:
        arrays.update(head_params(config.head_width, config.head, rng))
    return Model(config, {k: Parameter(k, v) for k, v in arrays.items()}, meta)


def _masked_mean(states, mask):
    """Mean over positions with mask 1; an all-masked row gives zeros."""
    m = mask[:, :, None]
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return T.tsum(states * m, axis=1) * (1.0 / count)


class Model:
    def __init__(self, config: ModelConfig, params: dict, meta: dict | None = None):
        self.config = config
        self.params = dict(params)
        self.meta = dict(meta or {})

    # -- parameters ---------------------------------------------------------
    def parameters(self, prefix: str | None = None) -> list:
        return [p for n, p in self.params.items() if prefix is None or n.startswith(prefix)]

    def n_params(self, prefix: str | None = None) -> int:
        return int(sum(p.data.size for p in self.parameters(prefix)))

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict):
        if set(state) != set(self.params):
            raise ConfigError("state dict keys do not match model parameters")
        for n, v in state.items():
            if v.shape != self.params[n].shape:
                raise ConfigError(f"{n}: shape {v.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(v, dtype=np.float64)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "Model":
        return Model(self.config, {n: Parameter(n, p.data.copy()) for n, p in self.params.items()},
                     copy.deepcopy(self.meta))

    def with_head(self, n_out: int, seed: int) -> "Model":
        """Copy with a freshly initialised head of ``n_out`` classes."""
        cfg = ModelConfig(**{**self.config.__dict__, "head": n_out})
        params = {n: Parameter(n, p.data.copy()) for n, p in self.params.items()
                  if not n.startswith("head/")}
        if n_out:
            params.update({k: Parameter(k, v) for k, v in
                           head_params(cfg.head_width, n_out, seed).items()})
        return Model(cfg, params, copy.deepcopy(self.meta))

    # -- forward --------------------------------------------------------------
    def encode(self, ids, mask, return_blocks=False):
        """Per-token states [b, len, H] and masked-mean pooled [b, H].

        With ``return_blocks`` also the pooled output of every attention block.
        """
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=np.float64)
        x = None
        blocks = []
        for i, spec in enumerate(self.config.layers()):
            p = f"encoder/{i}/"
            if spec.kind == "embedding":
                x = T.take(self.params[p + "E"], ids)
            elif spec.kind == "dense":
                x = T.ACTIVATIONS[spec.activation](x @ self.params[p + "W"] + self.params[p + "b"])
            elif spec.kind == "attention_block":
                x = self._attention(p, x, mask)
                blocks.append(_masked_mean(x, mask))
            elif spec.kind == "lstm_cell":
                x = self._lstm(p, spec.out_dim, x, mask)
        pooled = _masked_mean(x, mask)
        return (x, pooled, blocks) if return_blocks else (x, pooled)

    def _attention(self, p, x, mask):
        P = self.params
        h = x.shape[-1]
        q = x @ P[p + "Wq"] + P[p + "bq"]
        k = x @ P[p + "Wk"] + P[p + "bk"]
        v = x @ P[p + "Wv"] + P[p + "bv"]
        bias = ((1.0 - mask) * MASK_NEG)[:, None, :]
        scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(h)) + bias
        ctx = T.softmax(scores) @ v
        x = T.layer_norm(x + (ctx @ P[p + "Wo"] + P[p + "bo"]), P[p + "ln1_g"], P[p + "ln1_b"])
        ff = T.relu(x @ P[p + "W1"] + P[p + "b1"]) @ P[p + "W2"] + P[p + "b2"]
        return T.layer_norm(x + ff, P[p + "ln2_g"], P[p + "ln2_b"])

    def _lstm(self, p, width, x, mask):
        P = self.params
        b, length = x.shape[0], x.shape[1]
        xw = x @ P[p + "W"] + P[p + "b"]
        h = T.Tensor(np.zeros((b, width)))
        c = T.Tensor(np.zeros((b, width)))
        outs = []
        for t in range(length):
            gates = xw[:, t, :] + h @ P[p + "U"]
            i = T.sigmoid(gates[:, :width])
            f = T.sigmoid(gates[:, width:2 * width])
            g = T.tanh(gates[:, 2 * width:3 * width])
            o = T.sigmoid(gates[:, 3 * width:])
            c_new = f * c + i * g
            h_new = o * T.tanh(c_new)
            m = mask[:, t:t + 1]
            keep = 1.0 - m
            c = c_new * m + c * keep
            h = h_new * m + h * keep
            outs.append(h)
        return T.stack(outs, axis=1)

    def features(self, batch, encoded=None):
        states, pooled = encoded or self.encode(batch.ids, batch.mask)
        kind = self.config.head_input
        if kind == "pooled":
            return pooled
        if kind == "token":
            return states
        seg_b = (batch.segments == 1).astype(np.float64) * batch.mask
        seg_a = (batch.segments == 0).astype(np.float64) * batch.mask
        u, v = _masked_mean(states, seg_a), _masked_mean(states, seg_b)
        diff = u - v
        return T.concat([u, v, diff * diff, u * v], axis=-1)

    def head(self, feats):
        return feats @ self.params["head/W"] + self.params["head/b"]

    def logits(self, batch):
        return self.head(self.features(batch))

    def loss(self, batch, logits=None):
        logits = self.logits(batch) if logits is None else logits
        if self.config.head_input == "token":
            return token_loss(logits, batch.labels)
        return T.cross_entropy(logits, batch.labels)

    def predict_batch(self, batch) -> np.ndarray:
        with T.no_grad():
            return self.logits(batch).data.argmax(axis=-1)


def token_loss(logits, tags):
    """Mean cross-entropy over positions whose tag is not IGNORE."""
    tags = np.asarray(tags)
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    rows = np.flatnonzero(tags.reshape(-1) != IGNORE)
    return T.cross_entropy(T.take(flat, rows), tags.reshape(-1)[rows])


def param_count_formula(V, H, C, n_blocks=1) -> int:
    """Closed form for embedding + attention blocks + pooled dense head."""
    block = (4 * H * H + 4 * H) + (2 * H * H + 2 * H + 2 * 2 * H)
    return V * H + n_blocks * block + H * C + C
