"""Application pipelines: one resolved config in, metrics and checkpoints out."""
from __future__ import annotations

import time
from pathlib import Path

from .checkpoint import Checkpoint, ModelRegistry, load_checkpoint, save_checkpoint
from .config import config_digest, validate_config, write_resolved
from .data import (DomainDataset, Example, TransferSetting, build_vocab, n_classes, read_examples,
                   split_by_domain, write_examples)
from .distill import DistillConfig, distill_train
from .distributed import CostModel, dp_train, speedup_table
from .errors import ConfigError, DataError
from .evaluation import MetricsReport, evaluate
from .feature import FeatureConfig, train_feature_shared
from .finetune import FinetuneConfig, finetune
from .instance import RTLConfig, rtl_report, rtl_train, write_history
from .layers import LayerSpec, ModelConfig, build_model
from .meta import MetaConfig, _write_jsonl, meta_adapt, meta_train
from .pretrain import PretrainConfig, pretrain_masked
from .training import TrainConfig, encode_dataset, fit, predict, score

HEAD_INPUT = {"text_classify": "pooled", "text_match": "pair", "sequence_label": "token"}


def load_dataset(path, task) -> DomainDataset:
    examples = read_examples(path, sequence=task == "sequence_label")
    if not examples:
        raise DataError(f"{path}: no examples")
    return DomainDataset(examples[0].domain, examples)


def _labelled(ds: DomainDataset, path):
    if any(ex.label is None for ex in ds):
        raise DataError(f"{path}: every example needs a label")
    return ds


def _texts(datasets):
    out = []
    for ds in datasets:
        for ex in ds:
            out.append(ex.text_a)
            if ex.text_b:
                out.append(ex.text_b)
    return out


def model_config(cfg: dict, vocab_size: int, n_out: int, n_blocks=None) -> ModelConfig:
    m = cfg["model"]
    h = m["hidden_dim"]
    head_input = HEAD_INPUT[cfg["task"]]
    if head_input == "token":
        # tagging runs an LSTM cell over token states
        return ModelConfig(vocab_size, h, 0, m["max_len"], n_out, cfg["seed"],
                           encoder=(LayerSpec("embedding", vocab_size, h), LayerSpec("lstm_cell", h, h)),
                           head_input="token")
    return ModelConfig(vocab_size, h, m["n_blocks"] if n_blocks is None else n_blocks,
                       m["max_len"], n_out, cfg["seed"], head_input=head_input)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["epochs"], t["lr"], t["batch_size"], t["optimizer"], t["patience"], cfg["seed"])


def resolve(ref: str, registry=None) -> Checkpoint:
    """A checkpoint by registry name (when a registry is configured) or by file path."""
    if registry:
        return ModelRegistry.load(registry).get(ref)
    return load_checkpoint(ref)


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output"])
        self.data = cfg["data"]

    def ds(self, key, labelled=True):
        path = self.data[key]
        if path is None:
            return None
        ds = load_dataset(path, self.cfg["task"])
        return _labelled(ds, path) if labelled else ds

    def examples(self, key) -> list:
        """Raw examples from a file that may mix domains."""
        examples = read_examples(self.data[key], sequence=self.cfg["task"] == "sequence_label")
        if not examples:
            raise DataError(f"{self.data[key]}: no examples")
        return examples

    def save(self, ckpt: Checkpoint, name: str) -> Path:
        return save_checkpoint(ckpt, self.out / name)

    # -- modes --------------------------------------------------------

    def train(self):
        train, dev, test = self.ds("train"), self.ds("dev"), self.ds("test")
        vocab = build_vocab(_texts([train]))
        mc = model_config(self.cfg, len(vocab), n_classes([train] + ([dev] if dev else [])))
        model = build_model(mc, {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
        enc = lambda d: encode_dataset(d, vocab, mc.max_len) if d is not None else None
        model, history = fit(model, enc(train), enc(dev), train_config(self.cfg))
        self.save(Checkpoint.from_model(model), "model.ckpt")
        report = MetricsReport(self.cfg["task"], "train", extra={"history": history})
        if test is not None:
            report.accuracy, report.macro_f1 = score(model, enc(test))
        return report

    def eval(self):
        test = self.ds("test")
        gold_ds = list(test)
        if self.data["predictions"]:
            pred_ds = load_dataset(self.data["predictions"], self.cfg["task"])
            by_guid = {ex.guid: ex.label for ex in pred_ds}
            missing = [ex.guid for ex in gold_ds if ex.guid not in by_guid]
            if missing:
                raise DataError(f"predictions missing for {len(missing)} example(s), e.g. {missing[0]!r}")
            preds = [by_guid[ex.guid] for ex in gold_ds]
            gold = [ex.label for ex in gold_ds]
            if self.cfg["task"] == "sequence_label":
                preds = [p[:len(g)] for p, g in zip(preds, gold)]
            acc, f1 = evaluate(preds, gold, self.cfg["task"])
        else:
            ckpt = resolve(self.cfg["model"]["checkpoint"], self.cfg["model"]["registry"])
            model = ckpt.to_model()
            acc, f1 = score(model, encode_dataset(test, ckpt.vocab(), model.config.max_len))
        return MetricsReport(self.cfg["task"], "eval", acc, f1)

    def predict(self):
        test = self.ds("test", labelled=False)
        ckpt = resolve(self.cfg["model"]["checkpoint"], self.cfg["model"]["registry"])
        model = ckpt.to_model()
        batch = encode_dataset(test, ckpt.vocab(), model.config.max_len)
        preds = predict(model, batch)
        rows = [Example(ex.guid, ex.text_a, p, ex.domain, ex.text_b) for ex, p in zip(test, preds)]
        write_examples(rows, self.out / "predictions.tsv")
        report = MetricsReport(self.cfg["task"], "predict", extra={"n_predictions": len(preds)})
        if all(ex.label is not None for ex in test):
            report.accuracy, report.macro_f1 = score(model, batch)
        return report

    def pretrain(self):
        corpus = self.examples("train")
        a = self.cfg["algorithm"]
        vocab = build_vocab(_texts([corpus]))
        mc = model_config(self.cfg, len(vocab), 0)
        model = build_model(mc, {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
        pc = PretrainConfig(a["mask_prob"], a["steps"], a["lr"], a["batch_size"], self.cfg["seed"])
        ckpt = pretrain_masked(model, [ex.text_a for ex in corpus], vocab, pc,
                               corpus_tag=Path(self.data["train"]).name)
        path = self.save(ckpt, "pretrained.ckpt")
        registry = self.cfg["model"]["registry"]
        if registry:
            reg = ModelRegistry.load(registry)
            name = self.cfg["model"]["name"] or "pretrained"
            reg.entries.pop(name, None)  # re-running a pipeline replaces its own entry
            reg.register(name, path, "masked-token pretrained encoder", ckpt.meta["corpus"])
            reg.save(registry)
        keys = ("initial_probe_loss", "final_probe_loss", "first_step_loss", "last_step_loss")
        return MetricsReport(self.cfg["task"], "pretrain", extra={k: ckpt.meta[k] for k in keys})

    def finetune(self):
        train, dev, test = self.ds("train"), self.ds("dev"), self.ds("test")
        ckpt = resolve(self.cfg["model"]["checkpoint"], self.cfg["model"]["registry"])
        t, a = self.cfg["train"], self.cfg["algorithm"]
        fc = FinetuneConfig(self.cfg["model"]["checkpoint"], t["epochs"], t["lr"], t["batch_size"],
                            tuple(a["frozen"]), a["head_seed"], t["patience"], self.cfg["seed"],
                            t["optimizer"])
        model, report = finetune(ckpt, train, fc, dev, test, head_input=HEAD_INPUT[self.cfg["task"]])
        self.save(Checkpoint.from_model(model), "finetuned.ckpt")
        report.task = self.cfg["task"]
        return report

    def _setting(self):
        return TransferSetting(self.ds("source"), self.ds("target"), self.ds("dev"), self.ds("test"))

    def feature_tl(self):
        setting = self._setting()
        t, a, m = self.cfg["train"], self.cfg["algorithm"], self.cfg["model"]
        fc = FeatureConfig(a["tl_mode"], a["lam"], m["hidden_dim"], m["n_blocks"], m["max_len"],
                           a["epochs"], a["lr"], t["batch_size"], a["patience"], a["max_ratio"],
                           optimizer=a["optimizer"], disc_lr=a["disc_lr"], disc_steps=a["disc_steps"],
                           seed=self.cfg["seed"])
        model, report = train_feature_shared(setting, cfg=fc)
        shared = model.shared
        self.save(Checkpoint(shared.config, model.state_dict(), model.vocab.digest,
                             {"kind": "shared_private", "tl_mode": fc.mode, "vocab": model.vocab.tokens}),
                  "feature.ckpt")
        return report

    def instance_tl(self):
        setting = self._setting()
        a, m = self.cfg["algorithm"], self.cfg["model"]
        rc = RTLConfig(**a, hidden_dim=m["hidden_dim"], n_blocks=m["n_blocks"], max_len=m["max_len"],
                       seed=self.cfg["seed"])
        vocab = build_vocab(setting.texts())
        model, policy, history = rtl_train(setting, rc, vocab)
        write_history(history, self.out / "episodes.jsonl")
        self.save(Checkpoint.from_model(model), "model.ckpt")
        return rtl_report(model, policy, history, setting, vocab, rc.max_len)

    def distill(self):
        train, dev, test = self.ds("train"), self.ds("dev"), self.ds("test")
        teacher_ckpt = resolve(self.cfg["model"]["teacher"], self.cfg["model"]["registry"])
        teacher = teacher_ckpt.to_model()
        vocab = teacher_ckpt.vocab()
        if vocab is None:
            raise ConfigError("teacher checkpoint carries no vocabulary")
        t, a = self.cfg["train"], self.cfg["algorithm"]
        student_cfg = ModelConfig(**{**teacher.config.__dict__, "n_blocks": a["student_blocks"],
                                     "seed": self.cfg["seed"]})
        dc = DistillConfig(a["temperature"], a["alpha"], a["method"],
                           tuple(map(tuple, a["layer_map"])) if a["layer_map"] else None, a["beta"],
                           t["epochs"], t["lr"], t["batch_size"], t["patience"], self.cfg["seed"])
        student, report = distill_train(teacher, student_cfg, train, dc, vocab, dev, test)
        self.save(Checkpoint.from_model(student), "student.ckpt")
        return report

    def _meta_config(self):
        a = self.cfg["algorithm"]
        return MetaConfig(a["inner_steps"], a["inner_lr"], "adam", a["outer_step"], a["episodes"],
                          a["episode_size"], a["support_fraction"], self.cfg["seed"])

    def meta_train(self):
        examples = self.examples("train")
        if any(ex.label is None for ex in examples):
            raise DataError(f"{self.data['train']}: every example needs a label")
        family = list(split_by_domain(examples).values())
        vocab = build_vocab(_texts(family))
        mc = model_config(self.cfg, len(vocab), n_classes(family))
        ckpt, log = meta_train(family, self._meta_config(), mc, vocab)
        _write_jsonl(log, self.out / "episodes.jsonl")
        self.save(ckpt, "meta.ckpt")
        return MetricsReport(self.cfg["task"], "meta_train", extra={
            "domains": sorted(ds.domain for ds in family), "episodes": len(log),
            "final_query_loss": log[-1]["query_loss"] if log else 0.0})

    def meta_adapt(self):
        fewshot, test = self.ds("train"), self.ds("test")
        ckpt = resolve(self.cfg["model"]["checkpoint"], self.cfg["model"]["registry"])
        a, t = self.cfg["algorithm"], self.cfg["train"]
        model, report = meta_adapt(ckpt, fewshot, a["adapt_steps"], None, test, t["lr"],
                                   t["batch_size"], self.cfg["seed"])
        self.save(Checkpoint.from_model(model), "adapted.ckpt")
        return report

    def dp_train(self):
        train, dev, test = self.ds("train"), self.ds("dev"), self.ds("test")
        vocab = build_vocab(_texts([train]))
        mc = model_config(self.cfg, len(vocab), n_classes([train] + ([dev] if dev else [])))
        model = build_model(mc, {"vocab": vocab.tokens, "vocab_digest": vocab.digest})
        enc = lambda d: encode_dataset(d, vocab, mc.max_len) if d is not None else None
        a = self.cfg["algorithm"]
        model, report = dp_train(model, enc(train), enc(dev), a["n_workers"], train_config(self.cfg),
                                 a["threads"], enc(test))
        self.save(Checkpoint.from_model(model), "model.ckpt")
        report.task = self.cfg["task"]
        return report

    def speedup_table(self):
        a = self.cfg["algorithm"]
        cost = CostModel(a["t_sample"], a["param_bytes"], a["bandwidth"], a["latency"])
        table = speedup_table(a["workers"], cost, a["global_batch"])
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "speedup.csv").write_text(table, encoding="utf-8")
        rows = [line.split(",") for line in table.strip().splitlines()[1:]]
        return MetricsReport(self.cfg["task"], "speedup_table",
                             extra={"speedup": {n: float(s) for n, s in rows}})


def run(config: dict) -> MetricsReport:
    """Validate (if raw), dispatch on mode, and write artifacts under the output directory."""
    resolved = config if "defaults_injected" in config else validate_config(config)
    digest = config_digest(resolved)
    runner = Run(resolved)
    write_resolved(resolved, runner.out)
    start = time.perf_counter()
    report = getattr(runner, resolved["mode"])()
    report.mode = resolved["mode"]
    report.config_digest = digest
    report.wall_clock_seconds = time.perf_counter() - start
    (runner.out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    return report
