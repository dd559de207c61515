"""minitransfer <mode> --config <path> [--seed N] [--output DIR]"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import MODES, load_config
from .data import write_examples
from .errors import ConfigError, DataError, exit_code
from .synthetic import SyntheticTaskSpec, generate_matching, generate_synthetic, generate_tagging, poison_labels


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minitransfer", description="Config-driven transfer-learning pipelines.")
    p.add_argument("mode", choices=MODES + ("generate",))
    p.add_argument("--config", help="JSON config file (required except for generate)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    return p


def generate(out_dir, seed: int) -> list:
    """Write a synthetic data bundle for every pipeline."""
    out = Path(out_dir)
    task = generate_synthetic(SyntheticTaskSpec(sizes=(2000, 100), seed=seed))
    written = [
        write_examples(task.train[0], out / "source.tsv"),
        write_examples(poison_labels(task.train[0], 0.3, seed), out / "source_poisoned.tsv"),
        write_examples(task.target, out / "target.tsv"),
        write_examples(task.target_dev, out / "dev.tsv"),
        write_examples(task.target_test, out / "test.tsv"),
        write_examples(list(task.train[0]) + list(task.target), out / "corpus.tsv"),
    ]
    family = generate_synthetic(SyntheticTaskSpec(n_domains=5, sizes=(200,) * 4 + (100,), seed=seed))
    written.append(write_examples([ex for ds in family.sources for ex in ds], out / "family.tsv"))
    written.append(write_examples(family.target, out / "heldout_train.tsv"))
    written.append(write_examples(family.target_test, out / "heldout_test.tsv"))
    written.append(write_examples(generate_matching(400, seed), out / "match_train.tsv"))
    written.append(write_examples(generate_matching(200, seed + 1), out / "match_test.tsv"))
    written.append(write_examples(generate_tagging(400, seed), out / "tag_train.tsv"))
    written.append(write_examples(generate_tagging(200, seed + 1), out / "tag_test.tsv"))
    return written


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.mode == "generate":
            if not args.output:
                raise ConfigError("generate needs --output", ["--output: required for generate"])
            for path in generate(args.output, args.seed or 0):
                print(path)
            return 0
        if not args.config:
            raise ConfigError("--config is required", ["--config: required"])
        raw = load_config(args.config)
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object", ["<root>: expected an object"])
        raw["mode"] = args.mode
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.output is not None:
            raw["output"] = args.output
        from .pipeline import run
        report = run(raw)
        print(report.to_json(), end="")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except Exception as exc:  # anything else is a bug or a broken invariant
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
