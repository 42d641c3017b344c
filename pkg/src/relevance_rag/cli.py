"""Command-line entry point: gen-data, train, eval, sweep, ablate.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATION_VARIANTS, RunConfig, dump_config, load_config
from .data import corpus_statistics, generate_corpus, read_dataset, split_examples, write_dataset
from .evaluation import (
    corrupt_retrieval,
    evaluate,
    fingerprint,
    format_table,
    run_ablations,
    run_sweep,
    truncate_retrieval,
)
from .inference import VerificationPolicy
from .model import build_model
from .trainer import NonFiniteLossError, train, write_metrics

log = logging.getLogger("relevance_rag")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.strategy is not None or args.lam is not None:
        config = replace(
            config,
            policy=VerificationPolicy(
                strategy=args.strategy or config.policy.strategy,
                lam=config.policy.lam if args.lam is None else args.lam,
            ),
        )
    if args.k is not None:
        config = replace(config, eval=replace(config.eval, k=args.k))
    return config


def _dataset_path(config: RunConfig, out: Path) -> Path:
    return Path(config.paths.dataset) if config.paths.dataset else out / "dataset.jsonl"


def _checkpoint_path(config: RunConfig, out: Path) -> Path:
    return Path(config.paths.checkpoint) if config.paths.checkpoint else out / "checkpoint.npz"


def _reports_dir(config: RunConfig, out: Path) -> Path:
    path = Path(config.paths.reports) if config.paths.reports else out
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_examples(config: RunConfig, out: Path):
    path = _dataset_path(config, out)
    if not path.exists():
        raise ValidationError(f"dataset not found: {path}")
    return read_dataset(path)


def _load_model(config: RunConfig, out: Path):
    path = _checkpoint_path(config, out)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    return load_checkpoint(path, expected=config.model)


def _eval_examples(config: RunConfig, examples):
    data = split_examples(examples, config.eval.split)
    if not data:
        raise ValidationError(f"dataset has no {config.eval.split!r} split")
    if config.eval.k is not None:
        data = truncate_retrieval(data, config.eval.k)
    if config.eval.corruption:
        data = corrupt_retrieval(data, config.eval.corruption, config.seed)
    return data


def cmd_gen_data(config: RunConfig, args) -> int:
    out = _out_dir(args)
    examples = generate_corpus(config.corpus, config.seed, vocab_size=config.model.vocab_size)
    if args.dry_run:
        return EXIT_OK
    path = _dataset_path(config, out)
    write_dataset(examples, path)
    dump_config(config, out / "effective_config.json")
    stats = corpus_statistics(examples)
    for split, s in stats.items():
        print(
            f"{split:<6} queries={s['queries']:<6d} docs/query={s['docs_per_query']:.2f} "
            f"relevant-doc rate={s['relevant_doc_rate']:.3f}"
        )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    out = _out_dir(args)
    examples = _load_examples(config, out)
    if not split_examples(examples, "train"):
        raise ValidationError("dataset has no train split")
    if args.dry_run:
        print("config and dataset valid; not training (--dry-run)")
        return EXIT_OK
    model = build_model(config.model, config.seed)
    try:
        result = train(model, examples, config.schedule, config.sampler, config.objective)
    except NonFiniteLossError as exc:
        dump = out / "nonfinite_batch.json"
        exc.dump(dump)
        print(f"error: {exc}; offending batch written to {dump}", file=sys.stderr)
        return EXIT_RUNTIME
    ckpt = _checkpoint_path(config, out)
    save_checkpoint(model, ckpt, extra={"seed": config.seed, "config_fingerprint": fingerprint(config.to_dict())})
    write_metrics(result.metrics, _reports_dir(config, out) / "metrics.jsonl")
    dump_config(config, out / "effective_config.json")
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} steps; final loss {last.get('loss_total', float('nan')):.4f}; wrote {ckpt}")
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    out = _out_dir(args)
    examples = _load_examples(config, out)
    model = _load_model(config, out)
    data = _eval_examples(config, examples)
    if args.dry_run:
        return EXIT_OK
    fp = fingerprint(config.to_dict())
    report, records = evaluate(model, data, config.policy, config.eval.max_new_tokens, fp)
    reports = _reports_dir(config, out)
    with open(reports / "inference.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    payload = report.to_dict() | {"strategy": config.policy.strategy, "lambda": config.policy.lam, "k": config.eval.k}
    (reports / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    dump_config(config, out / "effective_config.json")
    print(format_table([(config.policy.strategy, report)]))
    return EXIT_OK


def cmd_sweep(config: RunConfig, args) -> int:
    out = _out_dir(args)
    examples = _load_examples(config, out)
    model = _load_model(config, out)
    data = split_examples(examples, config.eval.split)
    if not data:
        raise ValidationError(f"dataset has no {config.eval.split!r} split")
    if args.dry_run:
        return EXIT_OK
    reports = run_sweep(
        model, data, config.eval.sweep_axis, config.eval.sweep_levels, config.policy, config.seed,
        config.eval.max_new_tokens,
    )
    path = _reports_dir(config, out) / "sweep.json"
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    dump_config(config, out / "effective_config.json")
    print(format_table([(f"{config.eval.sweep_axis}={r.axis['level']}", r) for r in reports]))
    return EXIT_OK


def cmd_ablate(config: RunConfig, args) -> int:
    out = _out_dir(args)
    examples = _load_examples(config, out)
    unknown = set(config.eval.ablation_variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValidationError(f"unknown ablation variants: {sorted(unknown)}")
    data = _eval_examples(config, examples)
    if args.dry_run:
        return EXIT_OK

    def train_variant(variant: str, seed: int):
        cfg = config.with_seed(seed)
        model = build_model(cfg.model, seed)
        train(model, examples, cfg.schedule, cfg.sampler, ABLATION_VARIANTS[variant])
        return model

    table = run_ablations(
        train_variant, data, config.eval.ablation_variants, config.eval.ablation_seeds, config.policy,
        config.eval.max_new_tokens,
    )
    payload = {
        name: {
            "reports": [r.to_dict() for r in res.reports],
            "median": {m: res.median(m) for m in ("em", "f1", "hit_at_1", "jacc")},
        }
        for name, res in table.items()
    }
    (_reports_dir(config, out) / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    dump_config(config, out / "effective_config.json")
    print("medians over seeds", list(config.eval.ablation_seeds))
    for name, res in table.items():
        m = {k: res.median(k) for k in ("em", "f1", "hit_at_1", "jacc")}
        print(f"{name:<24}EM {m['em']:.4f}  F1 {m['f1']:.4f}  Hit@1 {m['hit_at_1']:.4f}  JAcc {m['jacc']:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults fill anything missing)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--strategy", choices=["source_reliability", "knowledge_consistency"])
    common.add_argument("--lambda", dest="lam", type=float, help="consistency weight for knowledge_consistency")
    common.add_argument("--k", type=int, help="number of retrieved documents per query at evaluation")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="relrag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _resolve(load_config(args.config), args)
        return COMMANDS[args.command](config, args)
    except (ValidationError, CheckpointError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
