"""Command-line interface: dataset preparation, training, evaluation,
ablation grids, hyperparameter sweeps, and synthetic data generation.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config, _parse_value
from .data import (ModalityFeatures, load_dataset, load_ibmf,
                   load_interactions, save_dataset, split_interactions)
from .errors import ConfigError, DataError, NumericalError
from .evaluation import MetricsResult
from .synth import SynthSpec, generate
from .training import (build_graph_bundle, evaluate_params, load_checkpoint,
                       run_training, save_checkpoint)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--ratios expects three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def cmd_prepare(args) -> int:
    pairs, user_map, item_map = load_interactions(args.interactions)
    interactions = split_interactions(pairs, user_map, item_map,
                                      _parse_ratios(args.ratios), seed=args.seed)
    names, matrices = [], []
    for spec in args.feature or []:
        if "=" not in spec:
            raise ConfigError(f"--feature expects name=path, got {spec!r}")
        name, path = spec.split("=", 1)
        matrix = load_ibmf(path)
        if matrix.shape[0] != interactions.num_items:
            raise DataError(f"modality '{name}': {matrix.shape[0]} feature rows "
                            f"for {interactions.num_items} items")
        names.append(name)
        matrices.append(matrix)
    if not names:
        raise ConfigError("prepare needs at least one --feature name=path")
    summary = save_dataset(args.out, interactions, ModalityFeatures(names, matrices))
    print(json.dumps(summary, indent=2))
    return 0


def _write_config_echo(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _write_metrics(path: Path, result: MetricsResult, split: str,
                   cfg: RunConfig) -> None:
    records = result.as_records(split, cfg.config_hash(), cfg.seed)
    path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or ()).resolved()
    interactions, features = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, cfg)
    result = run_training(interactions, features, cfg, out_dir=out)
    save_checkpoint(out / "checkpoint", result.params, cfg)
    val = evaluate_params(result.params, result.graphs, features, interactions,
                          cfg, "val")
    _write_metrics(out / "metrics_val.json", val, "val", cfg)
    best = result.report.best_val_recall
    print(json.dumps({"best_epoch": result.report.best_epoch,
                      "best_val_recall": None if not np.isfinite(best) else best,
                      "stop_reason": result.report.stop_reason}))
    return 0


def cmd_evaluate(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    interactions, features = load_dataset(args.data)
    graphs = build_graph_bundle(interactions, features.matrices, cfg)
    result = evaluate_params(params, graphs, features, interactions, cfg,
                             args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"metrics_{args.split}.json"
    _write_metrics(out, result, args.split, cfg)
    print(out)
    return 0


ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_fib", {"fib_enabled": False, "stage2_enabled": False}),
    ("wo_gib", {"gib_enabled": False}),
    ("wo_ib", {"fib_enabled": False, "gib_enabled": False,
               "stage2_enabled": False}),
)


def _train_and_test(interactions, features, cfg: RunConfig):
    result = run_training(interactions, features, cfg)
    val = evaluate_params(result.params, result.graphs, features, interactions,
                          cfg, "val")
    test = evaluate_params(result.params, result.graphs, features,
                           interactions, cfg, "test")
    return val, test


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set or ())
    interactions, features = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, base.resolved())
    n = 20 if 20 in base.eval_topk else base.eval_topk[0]
    rows = []
    for name, toggles in ABLATION_VARIANTS:
        cfg = dataclasses.replace(base, **toggles).resolved()
        val, test = _train_and_test(interactions, features, cfg)
        rows.append({"variant": name,
                     f"val_recall@{n}": val.per_n[n]["recall"],
                     f"test_recall@{n}": test.per_n[n]["recall"],
                     f"test_precision@{n}": test.per_n[n]["precision"],
                     f"test_ndcg@{n}": test.per_n[n]["ndcg"]})
    path = out / "ablation.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(path)
    return 0


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set or ())
    interactions, features = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, base.resolved())
    grid: list[tuple[str, list]] = []
    for spec in args.grid or []:
        if "=" not in spec:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {spec!r}")
        key, vals = spec.split("=", 1)
        key = key.strip()
        grid.append((key, [_parse_value(key, v) for v in vals.split(",")]))
    if not grid:
        raise ConfigError("sweep needs at least one --grid key=values")
    n = 20 if 20 in base.eval_topk else base.eval_topk[0]
    keys = [k for k, _ in grid]
    header = keys + ["seed", "kind", f"val_recall@{n}", f"val_recall@{n}_std"]
    rows = []
    best = (-np.inf, None)
    for point in itertools.product(*(vals for _, vals in grid)):
        recalls = []
        for s in range(args.seeds):
            cfg = dataclasses.replace(base, seed=base.seed + s,
                                      **dict(zip(keys, point))).resolved()
            val, _ = _train_and_test(interactions, features, cfg)
            recall = val.per_n[n]["recall"]
            recalls.append(recall)
            rows.append([*point, base.seed + s, "run", recall, ""])
        mean = float(np.mean(recalls))
        std = float(np.std(recalls))
        rows.append([*point, "", "summary", mean, std])
        if mean > best[0]:
            best = (mean, point)
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
        best_desc = ",".join(f"{k}={v}" for k, v in zip(keys, best[1]))
        fh.write(f"# best: {best_desc} mean_val_recall@{n}={best[0]}\n")
    print(path)
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(num_users=args.users, num_items=args.items,
                     rank=args.rank, relevant_dim=args.relevant_dim,
                     irrelevant_dim=args.irrelevant_dim,
                     noise_level=args.noise, seed=args.seed,
                     interactions_per_user=args.interactions_per_user)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    data = generate(spec)
    summary = save_dataset(args.out, data.interactions, data.features)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ibrec",
        description="Graph-based multimedia recommender with "
                    "information-bottleneck denoising")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split interactions and validate features")
    p.add_argument("--interactions", required=True)
    p.add_argument("--feature", action="append", metavar="NAME=PATH")
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the four-variant toggle grid")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="hyperparameter grid with repeated seeds")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--relevant-dim", type=int, default=16)
    p.add_argument("--irrelevant-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interactions-per-user", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
