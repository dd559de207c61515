"""Versioned checkpoint files and the named model registry (ModelZoo).

File layout::

    MINITRANSFER-CHECKPOINT\\n
    <one-line JSON header: format_version, config, vocab_digest, meta,
     payload_bytes, payload_sha256>\\n
    <payload>

The payload is a sequence of records, one per tensor: ``u32`` name length,
UTF-8 name, ``u32`` ndim, ``u32`` dims, then the values as little-endian
IEEE-754 float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointDigestError, CheckpointError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError, RegistryError)
from .layers import Model, ModelConfig
from .tensor import Parameter

MAGIC = b"MINITRANSFER-CHECKPOINT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    vocab_digest: str = ""
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Model, **meta) -> "Checkpoint":
        m = {**model.meta, **meta}
        return cls(model.config, model.state_dict(), m.get("vocab_digest", ""), m)

    def to_model(self) -> Model:
        params = {n: Parameter(n, v.copy()) for n, v in self.tensors.items()}
        meta = {**self.meta, "vocab_digest": self.vocab_digest}
        return Model(self.config, params, meta)

    def vocab(self):
        from .data import Vocab
        tokens = self.meta.get("vocab")
        return Vocab(tokens) if tokens else None


def _payload(tensors: dict) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _parse_payload(buf: bytes) -> dict:
    out, pos = {}, 0
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from None
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _payload(ckpt.tensors)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "vocab_digest": ckpt.vocab_digest,
        "meta": ckpt.meta,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    path.write_bytes(MAGIC + line + payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        if MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"{path}: truncated before the header")
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointTruncatedError(f"{path}: truncated inside the header")
    try:
        header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format_version {version} is not supported "
            f"(this build reads format_version {FORMAT_VERSION})")
    payload = raw[end + 1:]
    expected = header["payload_bytes"]
    if len(payload) < expected:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise CheckpointError(f"{path}: {len(payload) - expected} unexpected trailing bytes")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointDigestError(f"{path}: payload digest mismatch")
    meta = header.get("meta", {})
    tokens = meta.get("vocab")
    if tokens is not None:
        digest = hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()
        if digest != header["vocab_digest"]:
            raise CheckpointDigestError(f"{path}: vocabulary digest mismatch")
    return Checkpoint(ModelConfig.from_dict(header["config"]), _parse_payload(payload),
                      header["vocab_digest"], meta, version)


def checkpoint_save(model: Model, path, **meta) -> Path:
    return save_checkpoint(Checkpoint.from_model(model, **meta), path)


def checkpoint_load(path) -> Model:
    return load_checkpoint(path).to_model()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# registry


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest(name: str, candidates, limit=3) -> list:
    ranked = sorted(candidates, key=lambda c: (edit_distance(name, c), c))
    return ranked[:limit]


class ModelRegistry:
    """Public model names mapped to checkpoint files plus metadata.

    The manifest is JSON: ``{name: {path, description, sha256, corpus}}``
    with paths relative to the manifest's directory.
    """

    def __init__(self, entries=(), root=None):
        self.root = Path(root) if root is not None else Path(".")
        self.entries = {}
        for name, entry in entries:
            if name in self.entries:
                raise ConfigError(f"duplicate registry name {name!r}")
            self.entries[name] = dict(entry)

    @classmethod
    def load(cls, manifest) -> "ModelRegistry":
        manifest = Path(manifest)
        if not manifest.exists():
            return cls(root=manifest.parent)
        pairs = json.loads(manifest.read_text(encoding="utf-8"), object_pairs_hook=list)
        return cls(pairs, root=manifest.parent)

    def save(self, manifest) -> Path:
        manifest = Path(manifest)
        manifest.parent.mkdir(parents=True, exist_ok=True)
        manifest.write_text(json.dumps(self.entries, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        return manifest

    def names(self) -> list:
        return sorted(self.entries)

    def register(self, name, path, description="", corpus=""):
        if name in self.entries:
            raise ConfigError(f"duplicate registry name {name!r}")
        path = Path(path)
        try:
            rel = path.resolve().relative_to(self.root.resolve())
        except ValueError:
            rel = path.resolve()
        self.entries[name] = {"path": str(rel), "description": description,
                              "sha256": file_sha256(path), "corpus": corpus}

    def path(self, name) -> Path:
        if name not in self.entries:
            hint = ", ".join(repr(n) for n in nearest(name, self.entries))
            raise RegistryError(
                f"unknown model {name!r}; did you mean {hint}? available: {', '.join(self.names())}"
                if self.entries else f"unknown model {name!r}; the registry is empty")
        p = Path(self.entries[name]["path"])
        return p if p.is_absolute() else self.root / p

    def get(self, name) -> Checkpoint:
        path = self.path(name)
        if not path.is_file():
            raise CheckpointError(f"registry entry {name!r} points to missing file {path}")
        if file_sha256(path) != self.entries[name]["sha256"]:
            raise CheckpointDigestError(f"registry entry {name!r}: file digest mismatch")
        return load_checkpoint(path)


def registry_get(registry: ModelRegistry, name: str) -> Checkpoint:
    return registry.get(name)
