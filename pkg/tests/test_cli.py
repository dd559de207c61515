import json
import subprocess
import sys
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_configs
from minitransfer.checkpoint import checkpoint_save, load_checkpoint
from minitransfer.cli import main
from minitransfer.config import validate_config
from minitransfer.data import build_vocab, read_examples, write_examples
from minitransfer.errors import ConfigError, EvaluationError
from minitransfer.evaluation import evaluate
from minitransfer.layers import ModelConfig, build_model

# evaluation

def test_macro_f1_pinned():
    acc, f1 = evaluate([1, 0, 0, 0], [1, 1, 0, 0])
    assert acc == 0.75
    assert f1 == 11 / 15


def test_identical_and_disjoint():
    assert evaluate([0, 1, 1], [0, 1, 1]) == (1.0, 1.0)
    assert evaluate([1, 0, 1], [0, 1, 0]) == (0.0, 0.0)
    assert evaluate([[1, 2], [0]], [[1, 2], [0]], "sequence_label") == (1.0, 1.0)


def test_length_mismatch():
    with pytest.raises(EvaluationError):
        evaluate([1], [1, 0])
    with pytest.raises(EvaluationError):
        evaluate([[1]], [[1, 0]], "sequence_label")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40),
       st.sampled_from(list(permutations(range(3)))))
def test_macro_f1_permutation_invariant(pairs, perm):
    pred, gold = zip(*pairs)
    relabel = lambda xs: [perm[x] for x in xs]
    assert evaluate(relabel(pred), relabel(gold)) == evaluate(pred, gold)


# config validation

def test_empty_document_lists_required():
    with pytest.raises(ConfigError) as e:
        validate_config({})
    assert {p.split(":")[0] for p in e.value.errors} >= {"task", "mode", "seed"}


def test_typo_suggestion():
    with pytest.raises(ConfigError) as e:
        validate_config({"task": "text_classify", "mode": "train", "seed": 0,
                         "data": {"train": "x"}, "train": {"epcohs": 3}})
    assert "did you mean 'train.epochs'" in str(e.value)


def test_defaults_echoed():
    r = validate_config({"task": "text_classify", "mode": "train", "seed": 0, "data": {"train": "x"}})
    assert r["train"]["epochs"] == 10
    assert {"train.epochs", "train.lr", "model.hidden_dim", "output"} <= set(r["defaults_injected"])
    assert "data.train" not in r["defaults_injected"]


def test_algorithm_defaults_echoed():
    r = validate_config({"task": "text_classify", "mode": "distill", "seed": 0,
                         "data": {"train": "x"}, "model": {"teacher": "t"},
                         "algorithm": {"alpha": 0.3}})
    assert r["algorithm"]["temperature"] == 2.0
    assert "algorithm.temperature" in r["defaults_injected"]
    assert "algorithm.alpha" not in r["defaults_injected"]


def test_strict_types():
    with pytest.raises(ConfigError):
        validate_config({"task": "text_classify", "mode": "train", "seed": "0", "data": {"train": "x"}})


# CLI exit codes

def run_cli(*argv):
    return main([str(a) for a in argv])


def test_exit_0_and_artifacts(bundle, tmp_path, write_config, capsys):
    out = tmp_path / "run"
    cfg = write_config({"task": "text_classify", "seed": 0, "train": {"epochs": 2},
                        "data": {"train": str(bundle / "target.tsv"), "test": str(bundle / "test.tsv")}})
    assert run_cli("train", "--config", cfg, "--output", out, "--seed", 3) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 3 and resolved["output"] == str(out)
    assert metrics["mode"] == "train" and (out / "model.ckpt").is_file()
    assert json.loads(capsys.readouterr().out) == metrics


def test_exit_2_missing_train(tmp_path, write_config, capsys):
    cfg = write_config({"task": "text_classify", "seed": 0})
    assert run_cli("train", "--config", cfg, "--output", tmp_path) == 2
    assert "data.train" in capsys.readouterr().err


def test_exit_2_typo(tmp_path, write_config, capsys):
    cfg = write_config({"task": "text_classify", "seed": 0, "data": {"train": "x"},
                        "train": {"epcohs": 1}})
    assert run_cli("train", "--config", cfg) == 2
    assert "train.epochs" in capsys.readouterr().err


def test_exit_2_missing_config_file(tmp_path):
    assert run_cli("train", "--config", tmp_path / "none.json") == 2


def test_exit_3_missing_data(tmp_path, write_config):
    cfg = write_config({"task": "text_classify", "seed": 0, "data": {"train": str(tmp_path / "no.tsv")}})
    assert run_cli("train", "--config", cfg, "--output", tmp_path / "o") == 3


def test_exit_3_corrupt_checkpoint(bundle, tmp_path, write_config):
    v = build_vocab(["a"])
    path = checkpoint_save(build_model(ModelConfig(len(v), 4, 1, 8, 2)), tmp_path / "m.ckpt",
                           vocab=v.tokens, vocab_digest=v.digest)
    path.write_bytes(path.read_bytes()[:-3])
    cfg = write_config({"task": "text_classify", "seed": 0, "data": {"test": str(bundle / "test.tsv")},
                        "model": {"checkpoint": str(path)}})
    assert run_cli("eval", "--config", cfg, "--output", tmp_path / "o") == 3


@pytest.mark.filterwarnings("ignore:overflow")
def test_exit_4_numeric_blowup(bundle, tmp_path, write_config, capsys):
    # weights large enough to overflow float64 in the forward pass
    v = build_vocab(read_examples(bundle / "test.tsv")[0].text_a.split())
    model = build_model(ModelConfig(len(v), 4, 1, 16, 2))
    for p in model.parameters():
        p.data = np.full(p.shape, 1e200)
    path = checkpoint_save(model, tmp_path / "m.ckpt", vocab=v.tokens, vocab_digest=v.digest)
    cfg = write_config({"task": "text_classify", "seed": 0, "data": {"test": str(bundle / "test.tsv")},
                        "model": {"checkpoint": str(path)}})
    assert run_cli("eval", "--config", cfg, "--output", tmp_path / "o") == 4
    assert "internal error" in capsys.readouterr().err


def test_eval_predictions_equal_gold(bundle, tmp_path, write_config):
    gold = read_examples(bundle / "test.tsv")
    write_examples(gold, tmp_path / "pred.tsv")
    cfg = write_config({"task": "text_classify", "seed": 0,
                        "data": {"test": str(bundle / "test.tsv"), "predictions": str(tmp_path / "pred.tsv")}})
    assert run_cli("eval", "--config", cfg, "--output", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["accuracy"] == 1.0


def test_generate(tmp_path):
    assert run_cli("generate", "--output", tmp_path, "--seed", 1) == 0
    assert len(read_examples(tmp_path / "source.tsv")) == 2000
    assert len(read_examples(tmp_path / "target.tsv")) == 100


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "minitransfer.cli", "train", "--config",
                           str(tmp_path / "missing.json")], capture_output=True, text=True)
    assert proc.returncode == 2


# every mode end to end

@pytest.fixture(scope="module")
def all_modes(bundle, tmp_path_factory):
    out = tmp_path_factory.mktemp("modes")
    results = {}
    for name, cfg in small_configs(bundle, out):
        path = out / f"{name}.json"
        path.write_text(json.dumps(cfg))
        results[name] = (main([cfg["mode"], "--config", str(path)]), cfg)
    return out, results


MODE_NAMES = [n for n, _ in small_configs(Path("."), Path("."))]


@pytest.mark.parametrize("name", MODE_NAMES)
def test_mode_runs(all_modes, name):
    out, results = all_modes
    code, cfg = results[name]
    assert code == 0
    assert (Path(cfg["output"]) / "metrics.json").is_file()


def test_pretrain_finetune_distill_chain(all_modes):
    out, _ = all_modes
    for key, ckpt in [("pretrain", "pretrained.ckpt"), ("finetune", "finetuned.ckpt"),
                      ("distill", "student.ckpt")]:
        assert (out / key / "metrics.json").is_file()
        load_checkpoint(out / key / ckpt)
    rep = json.loads((out / "distill" / "metrics.json").read_text())
    assert rep["extra"]["param_ratio"] > 1


def test_episode_logs(all_modes):
    out, _ = all_modes
    for key in ("instance", "meta"):
        rows = [json.loads(x) for x in (out / key / "episodes.jsonl").read_text().splitlines()]
        assert len(rows) == 5
    csv = (out / "speedup" / "speedup.csv").read_text().splitlines()
    assert csv[0] == "n_workers,predicted_speedup" and len(csv) == 3
