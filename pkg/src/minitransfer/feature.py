"""Feature-based transfer: full-shared, specific-shared, adversarial and DRSS.

All modes share one encoder across domains. The specific-shared modes add
a private encoder per domain and classify on ``[shared, private]``.
SS_ADV puts a domain discriminator on the shared features behind a
gradient-reversal node; DRSS additionally scales the shared features of
domain ``d`` by a learned gate ``sigmoid(rho_d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TransferSetting, build_vocab, n_classes
from .errors import CapabilityError, ConfigError
from .evaluation import MetricsReport, evaluate
from .layers import Model, ModelConfig, build_model, _uniform
from .optim import Optimizer
from .tensor import Parameter
from .training import encode_dataset, index_batches

FEATURE_MODES = ("FS", "SS", "SS_ADV", "DRSS")
SOURCE, TARGET = "source", "target"


@dataclass
class FeatureConfig:
    mode: str = "SS"
    lam: float = 1.0
    hidden_dim: int = 16
    n_blocks: int = 1
    max_len: int = 16
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 16
    # the adversarial game keeps improving alignment after target dev accuracy plateaus
    patience: int = 20
    max_ratio: int = 4
    detached_discriminator: bool = False
    # Adam's fixed-size steps keep the encoder overshooting the discriminator,
    # so the reversed game never settles; plain SGD lets it
    optimizer: str = "sgd"
    disc_lr: float = 1e-2
    # discriminator-only updates per step, so reversal follows a near-best response
    disc_steps: int = 5
    seed: int = 0

    def validate(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature-transfer mode {self.mode!r}; choose from {FEATURE_MODES}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")

    @property
    def adversarial(self):
        return self.mode in ("SS_ADV", "DRSS")

    @property
    def has_discriminator(self):
        return self.adversarial or self.detached_discriminator


def _renamed(model: Model, prefix: str) -> Model:
    return Model(model.config, {k: Parameter(prefix + k, p.data) for k, p in model.params.items()},
                 model.meta)


class SharedPrivateModel:
    def __init__(self, cfg: FeatureConfig, vocab, n_out: int):
        cfg.validate()
        self.cfg, self.vocab, self.n_out = cfg, vocab, n_out
        self.domains = (SOURCE, TARGET)
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_dim

        def encoder(prefix):
            base = ModelConfig(vocab_size=len(vocab), hidden_dim=h, n_blocks=cfg.n_blocks,
                               max_len=cfg.max_len, head=0, seed=int(rng.integers(2**31)))
            return _renamed(build_model(base), prefix)

        self.shared = encoder("shared/")
        self.private = {}
        if cfg.mode != "FS":
            self.private = {d: encoder(f"private/{d}/") for d in self.domains}
        width = h if cfg.mode == "FS" else 2 * h
        self.heads = {d: (Parameter(f"head/{d}/W", _uniform(rng, width, (width, n_out))),
                          Parameter(f"head/{d}/b", np.zeros(n_out))) for d in self.domains}
        self.disc = None
        if cfg.has_discriminator:
            self.disc = (Parameter("disc/W1", _uniform(rng, h, (h, h))), Parameter("disc/b1", np.zeros(h)),
                         Parameter("disc/W2", np.zeros((h, 2))), Parameter("disc/b2", np.zeros(2)))
        self.gates = {}
        if cfg.mode == "DRSS":
            self.gates = {d: Parameter(f"gate/{d}", np.zeros(1)) for d in self.domains}

    # -- parameters ------------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {p.name: p for p in self.shared.params.values()}
        for enc in self.private.values():
            out.update({p.name: p for p in enc.params.values()})
        for W, b in self.heads.values():
            out[W.name], out[b.name] = W, b
        if self.disc:
            out.update({p.name: p for p in self.disc})
        out.update({p.name: p for p in self.gates.values()})
        return out

    def parameters(self, prefix=None):
        return [p for n, p in self.named_parameters().items() if prefix is None or n.startswith(prefix)]

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        for n, p in self.named_parameters().items():
            p.data = state[n].copy()

    def gate(self, domain) -> float:
        if domain not in self.gates:
            raise CapabilityError(f"mode {self.cfg.mode} has no domain gates")
        return float(T._sigmoid(self.gates[domain].data)[0])

    # -- forward ---------------------------------------------------------------
    def shared_features(self, batch):
        return self.shared.encode(batch.ids, batch.mask)[1]

    def task_logits(self, batch, domain, shared=None):
        s = self.shared_features(batch) if shared is None else shared
        if domain in self.gates:
            s = s * T.sigmoid(self.gates[domain])
        feats = s
        if self.private:
            feats = T.concat([s, self.private[domain].encode(batch.ids, batch.mask)[1]], axis=-1)
        W, b = self.heads[domain]
        return feats @ W + b

    def disc_logits(self, shared, lam=None, detached=False):
        if self.disc is None:
            raise CapabilityError(f"mode {self.cfg.mode} has no domain discriminator")
        W1, b1, W2, b2 = self.disc
        x = T.detach(shared) if detached else (shared if lam is None else T.grad_reverse(shared, lam))
        z = x @ W1 + b1
        # leaky units keep a gradient everywhere; saturating ones let the encoder silence the discriminator
        return (T.relu(z) - T.relu(z * -1.0) * 0.2) @ W2 + b2

    def predict(self, batch, domain):
        with T.no_grad():
            return self.task_logits(batch, domain).data.argmax(axis=-1)

    def predict_domain(self, batch):
        with T.no_grad():
            return self.disc_logits(self.shared_features(batch)).data.argmax(axis=-1)

    def fit_discriminator(self, batch, domain, other, opt, steps):
        """Discriminator-only updates on detached features of batch + other."""
        d = self.domains.index(domain)
        with T.no_grad():
            feats = np.concatenate([self.shared_features(batch).data, self.shared_features(other).data])
        labels = np.concatenate([np.full(len(batch), d), np.full(len(other), 1 - d)])
        for _ in range(steps):
            opt.zero_grad()
            T.backward(T.cross_entropy(self.disc_logits(T.Tensor(feats)), labels))
            opt.step()
        opt.zero_grad()

    def domain_loss(self, batch, domain, other=None):
        """Task loss on a single-domain batch plus the discriminator loss.

        The discriminator sees ``batch`` together with ``other``, an equal-size
        batch from the other domain; on single-domain batches it could lower
        its loss by tracking which domain comes next instead of reading the
        features.
        """
        shared = self.shared_features(batch)
        loss = T.cross_entropy(self.task_logits(batch, domain, shared), batch.labels)
        if self.disc is not None:
            d = self.domains.index(domain)
            feats, d_label = shared, np.full(len(batch), d)
            if other is not None:
                feats = T.concat([shared, self.shared_features(other)], axis=0)
                d_label = np.concatenate([d_label, np.full(len(other), 1 - d)])
            if self.cfg.adversarial:
                d_logits = self.disc_logits(feats, lam=self.cfg.lam)
            else:
                d_logits = self.disc_logits(feats, detached=True)
            loss = loss + T.cross_entropy(d_logits, d_label)
        return loss


def _accuracy(model, batch, domain):
    return evaluate(model.predict(batch, domain), batch.labels)[0]


def schedule_ratio(n_source, n_target, cap=4) -> int:
    """Source batches per target batch: proportional to sizes, capped."""
    return int(max(1, min(cap, round(n_source / max(n_target, 1)))))


def train_feature_shared(setting: TransferSetting, mode: str | None = None,
                         cfg: FeatureConfig | None = None, vocab=None):
    """Alternate source and target mini-batches; early-stop on target dev accuracy.

    Returns ``(SharedPrivateModel, MetricsReport)``.
    """
    cfg = cfg or FeatureConfig()
    if mode is not None:
        cfg = FeatureConfig(**{**cfg.__dict__, "mode": mode})
    cfg.validate()
    vocab = vocab or build_vocab(setting.texts())
    n_out = n_classes([setting.source, setting.target])
    model = SharedPrivateModel(cfg, vocab, n_out)
    enc = {SOURCE: encode_dataset(setting.source, vocab, cfg.max_len),
           TARGET: encode_dataset(setting.target, vocab, cfg.max_len)}
    dev = encode_dataset(setting.target_dev, vocab, cfg.max_len) if setting.target_dev else None
    ratio = schedule_ratio(len(setting.source), len(setting.target), cfg.max_ratio)
    pair_rng = np.random.default_rng([cfg.seed, 17])
    disc_names = {p.name for p in model.disc or ()}
    opts = [Optimizer([p for p in model.parameters() if p.name not in disc_names], cfg.lr, cfg.optimizer)]
    if disc_names:
        opts.append(Optimizer(list(model.disc), cfg.disc_lr, "adam"))
    best, best_acc, stale = model.state_dict(), -1.0, 0
    history = []
    src_epoch, src_queue = 0, []
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for t_idx in index_batches(len(enc[TARGET]), cfg.batch_size, cfg.seed * 7919 + epoch):
            plan = []
            for _ in range(ratio):
                if not src_queue:
                    src_queue = index_batches(len(enc[SOURCE]), cfg.batch_size,
                                              cfg.seed * 104729 + src_epoch)
                    src_epoch += 1
                plan.append((SOURCE, src_queue.pop(0)))
            plan.append((TARGET, t_idx))
            for domain, idx in plan:
                for opt in opts:
                    opt.zero_grad()
                other = None
                if model.disc is not None:
                    pool = enc[TARGET if domain == SOURCE else SOURCE]
                    other = pool.subset(pair_rng.choice(len(pool), size=len(idx), replace=len(idx) > len(pool)))
                batch = enc[domain].subset(idx)
                if cfg.disc_steps and model.disc is not None:
                    model.fit_discriminator(batch, domain, other, opts[1], cfg.disc_steps)
                loss = model.domain_loss(batch, domain, other)
                T.backward(loss)
                for opt in opts:
                    opt.step()
                total += loss.item()
                steps += 1
        record = {"epoch": epoch, "train_loss": total / max(steps, 1)}
        if model.disc is not None and setting.source_test is not None and setting.target_test is not None:
            record["discriminator_accuracy"] = domain_confusion(model, setting)
        if dev is not None:
            acc = _accuracy(model, dev, TARGET)
            record["dev_acc"] = acc
            if acc > best_acc:
                best, best_acc, stale = model.state_dict(), acc, 0
            else:
                stale += 1
        else:
            best = model.state_dict()
        history.append(record)
        if dev is not None and stale >= cfg.patience:
            break
    model.load_state_dict(best)
    for opt in opts:
        opt.zero_grad()
    report = MetricsReport(task="text_classify", mode="feature_tl",
                           extra={"history": history, "method": cfg.mode, "lambda": cfg.lam})
    if setting.target_test is not None:
        test = encode_dataset(setting.target_test, vocab, cfg.max_len)
        report.accuracy, report.macro_f1 = evaluate(model.predict(test, TARGET), test.labels)
        report.per_domain[TARGET] = report.accuracy
    if setting.source_test is not None:
        stest = encode_dataset(setting.source_test, vocab, cfg.max_len)
        report.per_domain[SOURCE] = _accuracy(model, stest, SOURCE)
    if model.disc is not None and setting.source_test is not None and setting.target_test is not None:
        report.extra["discriminator_accuracy"] = domain_confusion(model, setting)
    if model.gates:
        report.extra["gates"] = {d: model.gate(d) for d in model.domains}
    return model, report


def balanced_domain_batch(setting: TransferSetting, vocab, max_len):
    src = setting.source_test or setting.source
    tgt = setting.target_test or setting.target
    n = min(len(src), len(tgt))
    examples = list(src)[:n] + list(tgt)[:n]
    batch = encode_dataset(examples, vocab, max_len)
    return batch, np.array([0] * n + [1] * n)


def domain_confusion(model: SharedPrivateModel, setting: TransferSetting) -> float:
    """Discriminator accuracy on held-out samples, balanced between domains."""
    if model.disc is None:
        raise CapabilityError(f"mode {model.cfg.mode} has no domain discriminator")
    batch, labels = balanced_domain_batch(setting, model.vocab, model.cfg.max_len)
    return float(np.mean(model.predict_domain(batch) == labels))
