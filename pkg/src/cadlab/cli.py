"""Command-line interface: generate / train / eval / probe / ablate / data-efficiency.

Exit codes: 0 on success, 1 on validation errors (bad config, bad data,
bad arguments), 2 on runtime failures. Reports are byte-identical across
reruns with the same seed, config, and data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import (
    DataError, FeatureGroups, GeneratorConfig, Vocab, generate_cad, load_jsonl,
    read_dataset, write_dataset,
)
from .evaluation import (
    config_fingerprint, evaluate, myopia_probe, run_ablation, run_data_efficiency,
    write_report,
)
from .model import load_checkpoint, save_checkpoint
from .training import NonFiniteLossError, TrainConfig, train


class CliError(Exception):
    """Validation failure surfaced as exit code 1."""


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"invalid JSON in {path}: {e}")


def _train_config(args) -> TrainConfig:
    payload = _load_json(args.config) if args.config else {}
    overrides = {
        "alpha": args.alpha, "beta": args.beta, "learning_rate": args.lr,
        "epochs": args.epochs, "batch_pairs": args.batch_pairs,
        "env_mode": args.env_mode, "embed_dim": args.embed_dim,
        "seed": getattr(args, "seed", None),
    }
    for key, value in overrides.items():
        if value is not None:
            payload[key] = value
    try:
        return TrainConfig.from_dict(payload)
    except (ValueError, TypeError) as e:
        raise CliError(f"bad train config: {e}")


def _add_train_overrides(parser, with_seed: bool) -> None:
    parser.add_argument("--config", help="JSON train config file")
    parser.add_argument("--alpha", type=float, help="invariance penalty weight")
    parser.add_argument("--beta", type=float, help="pair-alignment penalty weight")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-pairs", type=int, dest="batch_pairs")
    parser.add_argument("--env-mode", choices=("disjoint", "overlap"), dest="env_mode")
    parser.add_argument("--embed-dim", type=int, dest="embed_dim")
    if with_seed:
        parser.add_argument("--seed", type=int, required=True,
                            help="training seed (required for reproducible runs)")


def cmd_generate(args) -> int:
    payload = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        payload["seed"] = args.seed
    try:
        cfg = GeneratorConfig.from_dict(payload)
    except (DataError, TypeError) as e:
        raise CliError(f"bad generator config: {e}")
    dataset = generate_cad(cfg)
    paths = write_dataset(dataset, args.out)
    print(json.dumps({"out": args.out, "n_pairs": len(dataset.train_pairs),
                      "n_ood": len(dataset.ood), "files": sorted(paths)}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    try:
        dataset = read_dataset(args.data)
    except (DataError, FileNotFoundError) as e:
        raise CliError(f"bad data directory {args.data}: {e}")
    vocab = Vocab.from_examples(dataset.train_examples())
    checkpoint, log = train(config, dataset.train_pairs, vocab=vocab)
    os.makedirs(args.out, exist_ok=True)
    fingerprint = config_fingerprint({"train": config.to_dict(),
                                      "generator": dataset.config.to_dict()})
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(ckpt_path, checkpoint.snapshot, vocab, extra={
        "epoch": checkpoint.epoch,
        "train_accuracy": checkpoint.train_accuracy,
        "fingerprint": fingerprint,
        "train_config": config.to_dict(),
    })
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write(log.step_csv())
    with open(os.path.join(args.out, "epoch_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(log.epoch_csv())
    print(json.dumps({"checkpoint": ckpt_path, "epoch": checkpoint.epoch,
                      "train_accuracy": checkpoint.train_accuracy,
                      "fingerprint": fingerprint}, sort_keys=True))
    return 0


def _load_eval_examples(path):
    try:
        return load_jsonl(path, require_pairs=False)
    except (DataError, FileNotFoundError) as e:
        raise CliError(f"bad data file {path}: {e}")


def cmd_eval(args) -> int:
    try:
        snapshot, vocab, extra = load_checkpoint(args.checkpoint)
    except (ValueError, FileNotFoundError, KeyError) as e:
        raise CliError(f"bad checkpoint {args.checkpoint}: {e}")
    examples = _load_eval_examples(args.data)
    if not examples:
        raise CliError(f"no examples in {args.data}")
    report = evaluate(snapshot, examples, vocab, split=os.path.basename(args.data),
                      fingerprint=extra.get("fingerprint", ""))
    out = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    return 0


def cmd_probe(args) -> int:
    try:
        snapshot, vocab, extra = load_checkpoint(args.checkpoint)
    except (ValueError, FileNotFoundError, KeyError) as e:
        raise CliError(f"bad checkpoint {args.checkpoint}: {e}")
    examples = _load_eval_examples(args.data)
    groups_path = args.groups or os.path.join(os.path.dirname(args.data), "groups.json")
    try:
        with open(groups_path, encoding="utf-8") as fh:
            groups = FeatureGroups.from_dict(json.load(fh))
    except (FileNotFoundError, json.JSONDecodeError, KeyError, DataError) as e:
        raise CliError(f"bad groups file {groups_path}: {e}")
    try:
        probe = myopia_probe(snapshot, examples, groups, vocab)
    except ValueError as e:
        raise CliError(str(e))
    payload = probe.to_dict()
    payload["fingerprint"] = extra.get("fingerprint", "")
    out = json.dumps(payload, indent=2, sort_keys=True)
    print(out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    return 0


def _parse_int_list(text, what) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise CliError(f"{what} must be a comma-separated integer list, got {text!r}")
    if not values:
        raise CliError(f"{what} list is empty")
    return values


def cmd_ablate(args) -> int:
    config = _train_config(args)
    seeds = _parse_int_list(args.seeds, "seeds")
    try:
        dataset = read_dataset(args.data)
        result = run_ablation(config, dataset, seeds, workers=args.workers)
    except (DataError, FileNotFoundError, ValueError) as e:
        raise CliError(str(e))
    paths = write_report(result, args.out, "ablation")
    print(json.dumps({"report": paths, "summary": result["summary"]}, sort_keys=True))
    return 0


def cmd_data_efficiency(args) -> int:
    config = _train_config(args)
    sizes = _parse_int_list(args.sizes, "sizes")
    seeds = _parse_int_list(args.seeds, "seeds")
    try:
        dataset = read_dataset(args.data)
        result = run_data_efficiency(config, dataset, sizes, seeds, workers=args.workers)
    except (DataError, FileNotFoundError, ValueError) as e:
        raise CliError(str(e))
    paths = write_report(result, args.out, "data_efficiency")
    print(json.dumps({"report": paths, "rows": len(result["rows"])}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadlab",
        description="Counterfactual-pair training laboratory: synthetic data, "
                    "constrained training, and reliance probes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic paired dataset")
    p.add_argument("--config", help="JSON generator config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    _add_train_overrides(p, with_seed=True)
    p.add_argument("--data", required=True, help="dataset directory from `generate`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="feature-group reliance probe for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--groups", help="groups.json (default: next to the data file)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="four-arm ablation over a seed list")
    _add_train_overrides(p, with_seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("data-efficiency", help="train-size sweep across three arms")
    _add_train_overrides(p, with_seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated example counts")
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_data_efficiency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLossError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything to exit 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
