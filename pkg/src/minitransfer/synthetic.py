"""Synthetic lexicon-sign domains with controllable shift.

Every domain draws tokens from a shared lexicon (with probability
``shared_fraction``) or its own private lexicon. Each lexicon is split
into positive, negative and neutral words; a sentence is labelled 1 when
it holds more positive than negative words and 0 otherwise (ties are
resampled). Sentences carry a latent polarity so that polarity words
co-occur, which is what masked pretraining can pick up.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import DomainDataset, Example
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_domains: int = 2
    sizes: tuple = (2000, 100)
    dev_size: int = 200
    test_size: int = 400
    shared_size: int = 24
    private_size: int = 24
    shared_fraction: float = 0.5
    noise: float = 0.0
    length_range: tuple = (6, 12)
    polar_rate: float = 0.5
    coherence: float = 0.8
    seed: int = 0

    def validate(self):
        problems = []
        if self.n_domains < 1:
            problems.append("n_domains must be >= 1")
        if len(self.sizes) != self.n_domains:
            problems.append(f"sizes has {len(self.sizes)} entries for {self.n_domains} domains")
        if any(s < 1 for s in self.sizes):
            problems.append("every domain needs at least one training example")
        if self.shared_fraction > 0 and self.shared_size < 3:
            problems.append("shared lexicon needs >= 3 words (positive, negative, neutral)")
        if self.shared_fraction < 1 and self.private_size < 3:
            problems.append("private lexica need >= 3 words (positive, negative, neutral)")
        if not 0.0 <= self.shared_fraction <= 1.0:
            problems.append("shared_fraction must lie in [0, 1]")
        if not 0.0 <= self.noise < 0.5:
            problems.append("noise must lie in [0, 0.5)")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            problems.append("length_range must satisfy 1 <= lo <= hi")
        if not 0.0 < self.polar_rate <= 1.0:
            problems.append("polar_rate must lie in (0, 1]")
        if not 0.5 <= self.coherence <= 1.0:
            problems.append("coherence must lie in [0.5, 1]")
        if problems:
            raise ConfigError("invalid synthetic task spec: " + "; ".join(problems), problems)


def _split(words):
    k = len(words) // 3
    return {"pos": words[:k], "neg": words[k:2 * k], "neu": words[2 * k:]}


def lexica(spec: SyntheticTaskSpec) -> dict:
    """{'shared': {...}, domain_id: {...}} with pos/neg/neu word lists."""
    out = {"shared": _split([f"sh{i}" for i in range(spec.shared_size)])}
    for d in range(spec.n_domains):
        out[domain_name(d)] = _split([f"d{d}w{i}" for i in range(spec.private_size)])
    return out


def domain_name(d: int) -> str:
    return f"dom{d}"


def polarity_map(spec: SyntheticTaskSpec) -> dict:
    table = {}
    for lex in lexica(spec).values():
        for w in lex["pos"]:
            table[w] = 1
        for w in lex["neg"]:
            table[w] = -1
    return table


def label_rule(tokens, polarity: dict):
    """1 if positive words outnumber negative ones, 0 if fewer, None on a tie."""
    score = sum(polarity.get(t, 0) for t in tokens)
    if score == 0:
        return None
    return 1 if score > 0 else 0


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    train: list
    dev: list
    test: list
    polarity: dict = field(default_factory=dict)

    @property
    def sources(self):
        return self.train[:-1]

    @property
    def target(self):
        return self.train[-1]

    @property
    def target_dev(self):
        return self.dev[-1]

    @property
    def target_test(self):
        return self.test[-1]


class _Sampler:
    def __init__(self, spec, rng):
        self.spec, self.rng = spec, rng
        self.lex = lexica(spec)
        self.polarity = polarity_map(spec)

    def tokens(self, d):
        spec, rng = self.spec, self.rng
        lo, hi = spec.length_range
        own = self.lex[domain_name(d)]
        shared = self.lex["shared"]
        while True:
            z = rng.random() < 0.5
            toks = []
            for _ in range(int(rng.integers(lo, hi + 1))):
                source = shared if rng.random() < spec.shared_fraction else own
                if rng.random() < spec.polar_rate:
                    agree = rng.random() < spec.coherence
                    kind = "pos" if agree == z else "neg"
                else:
                    kind = "neu"
                words = source[kind]
                toks.append(words[int(rng.integers(len(words)))])
            label = label_rule(toks, self.polarity)
            if label is not None:
                return toks, label

    def dataset(self, d, n, split):
        name = domain_name(d)
        examples = []
        for i in range(n):
            toks, label = self.tokens(d)
            meta = {"clean_label": label}
            if self.spec.noise > 0 and self.rng.random() < self.spec.noise:
                label = 1 - label
                meta["noisy"] = True
            examples.append(Example(f"{name}-{split}-{i}", " ".join(toks), label, name, meta=meta))
        return DomainDataset(name, examples)


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticTask:
    """One train/dev/test triple per domain; the last domain is the target.

    Dev and test splits are drawn without label noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sampler = _Sampler(spec, rng)
    clean = _Sampler(replace(spec, noise=0.0), rng)
    train, dev, test = [], [], []
    for d in range(spec.n_domains):
        train.append(sampler.dataset(d, spec.sizes[d], "train"))
        dev.append(clean.dataset(d, spec.dev_size, "dev"))
        test.append(clean.dataset(d, spec.test_size, "test"))
    return SyntheticTask(spec, train, dev, test, sampler.polarity)


def poison_labels(dataset: DomainDataset, rate: float, seed: int) -> DomainDataset:
    """Flip exactly round(rate * N) labels; flipped examples carry meta['flipped']."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    chosen = set(rng.choice(n, size=int(round(rate * n)), replace=False).tolist())
    out = []
    for i, ex in enumerate(dataset.examples):
        flipped = i in chosen
        out.append(replace(ex, label=1 - ex.label if flipped else ex.label,
                           meta={**ex.meta, "flipped": flipped}))
    return DomainDataset(dataset.domain, out)


def generate_matching(n: int, seed: int = 0, spec: SyntheticTaskSpec | None = None) -> DomainDataset:
    """Sentence pairs labelled 1 when both sides share the same sign."""
    spec = spec or SyntheticTaskSpec(n_domains=1, sizes=(n,))
    sampler = _Sampler(spec, np.random.default_rng(seed))
    name = domain_name(0)
    examples = []
    for i in range(n):
        a, la = sampler.tokens(0)
        b, lb = sampler.tokens(0)
        examples.append(Example(f"pair-{i}", " ".join(a), int(la == lb), name, text_b=" ".join(b)))
    return DomainDataset(name, examples)


def generate_tagging(n: int, seed: int = 0, spec: SyntheticTaskSpec | None = None) -> DomainDataset:
    """Per-token tags: 1 positive word, 2 negative word, 0 otherwise."""
    spec = spec or SyntheticTaskSpec(n_domains=1, sizes=(n,))
    sampler = _Sampler(spec, np.random.default_rng(seed))
    name = domain_name(0)
    tag_of = {1: 1, -1: 2}
    examples = []
    for i in range(n):
        toks, _ = sampler.tokens(0)
        tags = [tag_of.get(sampler.polarity.get(t, 0), 0) for t in toks]
        examples.append(Example(f"tag-{i}", " ".join(toks), tags, name))
    return DomainDataset(name, examples)
