"""Command-line surface: synth | train | eval | sample | gradcheck.

Configuration comes from an optional JSON file with ``train`` and ``synth``
sections plus ``--set key=value`` overrides (dotted keys pick a section,
bare keys go to the command's own section); overrides win. Unknown keys are
rejected. Every randomized command echoes its seed. Exit codes: 0 success,
1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import verify
from .anchors import generate_anchors
from .data import FeatureDataset, SyntheticSpec, gen_synthetic, load_feature_file, write_feature_file
from .errors import ConfigError, FlowPriorError
from .prior import TruncationSpec
from .retrieval import embed, recall_at_k
from .trainer import TrainConfig, load_checkpoint, train

_SECTION_FIELDS = {
    "train": {f.name for f in fields(TrainConfig)},
    "synth": {f.name for f in fields(SyntheticSpec)},
}


def _parse_set(expr: str, primary: str) -> tuple[str, str, object]:
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    section, _, name = key.rpartition(".")
    section = section or primary
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def load_run_config(config_path, sets, primary: str) -> dict[str, dict]:
    """Layer file sections under --set overrides, validating every key."""
    merged: dict[str, dict] = {"train": {}, "synth": {}}
    if config_path is not None:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        for section, body in raw.items():
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be an object")
            merged[section].update(body)
    for expr in sets or []:
        section, name, value = _parse_set(expr, primary)
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r} in --set {expr!r}")
        merged[section][name] = value
    for section, body in merged.items():
        unknown = set(body) - _SECTION_FIELDS[section]
        if unknown:
            raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return merged


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_synth(args) -> int:
    merged = load_run_config(args.config, args.set, "synth")
    spec = SyntheticSpec(**merged["synth"])
    train_set, test_set = gen_synthetic(spec)
    write_feature_file(train_set, args.out_train)
    write_feature_file(test_set, args.out_test)
    _emit({
        "seed": spec.seed,
        "spec": asdict(spec),
        "train": {"path": str(args.out_train), "instances": train_set.size,
                  "classes": train_set.class_count},
        "test": {"path": str(args.out_test), "instances": test_set.size,
                 "classes": test_set.class_count},
    })
    return 0


def cmd_train(args) -> int:
    merged = load_run_config(args.config, args.set, "train")
    config = TrainConfig(**merged["train"])
    train_set = load_feature_file(args.train_path, split_tag="train")
    test_set = load_feature_file(args.test_path, split_tag="test")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state, history = train(
        config, train_set, test_set,
        metrics_path=out_dir / "metrics.jsonl",
        checkpoint_path=out_dir / "checkpoint.gapc",
    )
    final = history[-1]
    _emit({
        "seed": config.seed,
        "epochs": state.epoch,
        "metrics": str(out_dir / "metrics.jsonl"),
        "checkpoint": str(out_dir / "checkpoint.gapc"),
        "final": {k: v for k, v in final.items() if k.startswith("recall@") or k == "loss_total"},
    })
    return 0


def cmd_eval(args) -> int:
    state, config = load_checkpoint(args.checkpoint)
    dataset = load_feature_file(args.features, split_tag="test")
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(config.eval_ks)
    gallery = dataset.size - 1
    clamped = [min(k, gallery) for k in ks]
    for k in ks:
        if k > gallery:
            print(f"warning: k={k} exceeds gallery size {gallery}, clamped", file=sys.stderr)
    embeddings = embed(state.head, dataset.features.astype(np.float64))
    recalls = recall_at_k(embeddings, dataset.labels, sorted(set(clamped)))
    _emit({
        "checkpoint": str(args.checkpoint),
        "features": str(args.features),
        "instances": dataset.size,
        "recall": {f"recall@{k}": recalls[min(k, gallery)] for k in ks},
    })
    return 0


def cmd_sample(args) -> int:
    state, config = load_checkpoint(args.checkpoint)
    if not 0 <= args.class_id < state.priors.num_classes:
        raise ConfigError(
            f"class {args.class_id} out of range [0, {state.priors.num_classes})"
        )
    spec = TruncationSpec(args.d, args.mode or config.truncation_mode,
                          config.max_rejection_attempts)
    seed = config.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    anchors = generate_anchors(
        state.flow, state.priors, state.head, [args.class_id], args.n, spec, rng
    )
    features = anchors.features.reshape(args.n, -1)
    dataset = FeatureDataset(features, np.full(args.n, args.class_id), split_tag="train")
    write_feature_file(dataset, args.out)
    _emit({
        "seed": seed, "class": args.class_id, "n": args.n,
        "d": args.d, "mode": spec.interpretation, "path": str(args.out),
    })
    return 0


def cmd_gradcheck(args) -> int:
    results = verify.run_gradcheck(seed=args.seed, n_seeds=args.seeds)
    failed = sorted(k for k, v in results.items() if not (v <= verify.TOLERANCE))
    _emit({
        "seed": args.seed, "seeds": args.seeds, "tolerance": verify.TOLERANCE,
        "max_rel_err": {k: results[k] for k in sorted(results)},
        "failed": failed,
    })
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowprior",
        description="Flow-based class appearance priors with prior-guided retrieval alignment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="JSON run config with train/synth sections")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted keys pick a section)")

    p = sub.add_parser("synth", help="generate synthetic seen/unseen feature files")
    add_config_args(p)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-phase training schedule")
    add_config_args(p)
    p.add_argument("--train", dest="train_path", required=True)
    p.add_argument("--test", dest="test_path", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute Recall@K for a checkpointed head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--ks", default=None, help="comma-separated k values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="dump feature-space anchors for one class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--d", type=float, default=1.0)
    p.add_argument("--mode", choices=["absolute", "scaled"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="verify every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return 2
    except (FlowPriorError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
