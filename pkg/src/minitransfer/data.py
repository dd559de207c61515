"""Examples, vocabularies, encoding, batching and dataset files."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

PAD, UNK, MASK, CLS = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
RESERVED = (PAD, UNK, MASK, CLS)
PAD_ID, UNK_ID, MASK_ID, CLS_ID = 0, 1, 2, 3
IGNORE = -1


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Example:
    guid: str
    text_a: str
    label: object = None
    domain: str = "default"
    text_b: Optional[str] = None
    meta: dict = field(default_factory=dict)


@dataclass
class DomainDataset:
    domain: str
    examples: list

    def __post_init__(self):
        for ex in self.examples:
            if ex.domain != self.domain:
                raise DataError(
                    f"example {ex.guid} has domain {ex.domain!r}, dataset is {self.domain!r}")

    @property
    def size(self) -> int:
        return len(self.examples)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def labels(self):
        return [ex.label for ex in self.examples]

    def texts(self):
        return [ex.text_a for ex in self.examples]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable, min_freq: int = 1) -> Vocab:
    """Reserved tokens, then tokens with count >= min_freq by (count desc, token asc).

    ``corpus`` items may be raw strings or token lists.
    """
    counts = Counter()
    for item in corpus:
        counts.update(tokenize(item) if isinstance(item, str) else item)
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


@dataclass
class Encoded:
    ids: list
    mask: list
    segments: list
    tags: Optional[list] = None


def encode_example(example: Example, vocab: Vocab, max_len: int) -> Encoded:
    """[CLS] + tokens, right-truncated to ``max_len`` then padded.

    A text pair is laid out as ``[CLS] a [PAD] b``; the separator is masked
    out and ``segments`` marks the b side with 1. Per-token tags (sequence
    labelling) are aligned to ids, with IGNORE on [CLS] and padding.
    """
    if max_len < 2:
        raise DataError(f"max_len must be >= 2, got {max_len}")
    a = tokenize(example.text_a)
    ids = [CLS_ID] + vocab.ids(a)
    mask = [1] * len(ids)
    segments = [0] * len(ids)
    if example.text_b is not None:
        b = tokenize(example.text_b)
        ids += [PAD_ID] + vocab.ids(b)
        mask += [0] + [1] * len(b)
        segments += [0] + [1] * len(b)
    tags = None
    if isinstance(example.label, (list, tuple)):
        if len(example.label) != len(a):
            raise DataError(f"example {example.guid}: {len(example.label)} tags for {len(a)} tokens")
        tags = [IGNORE] + [int(t) for t in example.label]
    ids, mask, segments = ids[:max_len], mask[:max_len], segments[:max_len]
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    mask += [0] * pad
    segments += [0] * pad
    if tags is not None:
        tags = (tags[:max_len] + [IGNORE] * max_len)[:max_len]
    return Encoded(ids, mask, segments, tags)


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    segments: np.ndarray
    labels: Optional[np.ndarray]
    examples: list

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.ids[idx], self.mask[idx], self.segments[idx],
                     None if self.labels is None else self.labels[idx],
                     [self.examples[i] for i in idx])


def make_batch(examples: Sequence[Example], vocab: Vocab, max_len: int) -> Batch:
    enc = [encode_example(ex, vocab, max_len) for ex in examples]
    labels = None
    if enc and enc[0].tags is not None:
        labels = np.array([e.tags for e in enc], dtype=np.int64)
    elif examples and all(ex.label is not None for ex in examples):
        labels = np.array([int(ex.label) for ex in examples], dtype=np.int64)
    return Batch(
        ids=np.array([e.ids for e in enc], dtype=np.int64).reshape(len(enc), max_len),
        mask=np.array([e.mask for e in enc], dtype=np.float64).reshape(len(enc), max_len),
        segments=np.array([e.segments for e in enc], dtype=np.int64).reshape(len(enc), max_len),
        labels=labels,
        examples=list(examples),
    )


def batch_iter(dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
    """Yield lists of examples; the last short batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    examples = list(dataset)
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def n_classes(datasets) -> int:
    top = 0
    for ds in datasets:
        for ex in ds:
            lab = ex.label
            if lab is None:
                continue
            top = max(top, max(lab) if isinstance(lab, (list, tuple)) else lab)
    return int(top) + 1


def split_by_domain(examples: Sequence[Example]) -> dict:
    groups: dict = {}
    for ex in examples:
        groups.setdefault(ex.domain, []).append(ex)
    return {d: DomainDataset(d, exs) for d, exs in groups.items()}


# ---------------------------------------------------------------------------
# files


def _parse_label(raw, sequence: bool):
    if raw is None or raw == "":
        return None
    if sequence or isinstance(raw, list):
        items = raw if isinstance(raw, list) else str(raw).split()
        return [int(t) for t in items]
    return int(raw)


def read_examples(path, sequence: bool = False) -> list[Example]:
    """Read a TSV or JSONL file (chosen by suffix) into Examples."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc})") from None
    out = []
    try:
        if path.suffix in (".jsonl", ".json"):
            for n, line in enumerate(text.splitlines(), 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                out.append(Example(
                    guid=str(row.get("guid", n)), text_a=row["text_a"], text_b=row.get("text_b"),
                    label=_parse_label(row.get("label"), sequence),
                    domain=str(row.get("domain", "default"))))
            return out
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = None
        if lines and lines[0].split("\t")[0] == "guid":
            header = lines[0].split("\t")
            lines = lines[1:]
        for n, line in enumerate(lines, 1):
            cells = line.split("\t")
            if header is not None:
                row = dict(zip(header, cells))
            elif len(cells) == 5:
                row = dict(zip(("guid", "text_a", "text_b", "label", "domain"), cells))
            elif len(cells) == 4:
                row = dict(zip(("guid", "text_a", "label", "domain"), cells))
            else:
                raise DataError(f"{path}:{n}: expected 4 or 5 tab-separated cells, got {len(cells)}")
            out.append(Example(
                guid=row["guid"], text_a=row["text_a"], text_b=row.get("text_b") or None,
                label=_parse_label(row.get("label"), sequence),
                domain=row.get("domain") or "default"))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed record ({exc})") from None
    return out


def _label_str(label):
    if label is None:
        return ""
    if isinstance(label, (list, tuple)):
        return " ".join(str(int(t)) for t in label)
    return str(int(label))


def write_examples(examples: Iterable[Example], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    examples = list(examples)
    if path.suffix in (".jsonl", ".json"):
        with path.open("w", encoding="utf-8") as fh:
            for ex in examples:
                row = {"guid": ex.guid, "text_a": ex.text_a, "label": ex.label, "domain": ex.domain}
                if ex.text_b is not None:
                    row["text_b"] = ex.text_b
                fh.write(json.dumps(row) + "\n")
        return path
    pair = any(ex.text_b is not None for ex in examples)
    cols = ["guid", "text_a"] + (["text_b"] if pair else []) + ["label", "domain"]
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for ex in examples:
            cells = [ex.guid, ex.text_a] + ([ex.text_b or ""] if pair else [])
            fh.write("\t".join(cells + [_label_str(ex.label), ex.domain]) + "\n")
    return path


def stratified_counts(label_counts: dict, total: int) -> dict:
    """Per-class sample sizes summing to ``total`` via largest remainder."""
    n = sum(label_counts.values())
    raw = {c: total * k / n for c, k in label_counts.items()}
    counts = {c: math.floor(v) for c, v in raw.items()}
    order = sorted(raw, key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[: total - sum(counts.values())]:
        counts[c] += 1
    return counts


@dataclass
class TransferSetting:
    """Source data D^S and target data D^T (with target dev/test splits)."""

    source: DomainDataset
    target: DomainDataset
    target_dev: Optional[DomainDataset] = None
    target_test: Optional[DomainDataset] = None
    source_test: Optional[DomainDataset] = None

    def __post_init__(self):
        if not len(self.source) or not len(self.target):
            raise DataError("source and target datasets must be nonempty")
        if len(self.source) < len(self.target):
            raise DataError(
                f"expected N^S >= N^T, got {len(self.source)} < {len(self.target)}")

    @classmethod
    def from_task(cls, task, source_index: int = 0) -> "TransferSetting":
        return cls(task.train[source_index], task.target, task.target_dev, task.target_test,
                   task.test[source_index])

    def texts(self):
        return [ex.text_a for ex in self.source] + [ex.text_a for ex in self.target]
