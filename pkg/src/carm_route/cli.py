"""``carm-route`` command line: generate, train, eval, compare, analyze.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime fault.
Every command writes its outputs and a ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import DEFAULT_GAMMA, export_heatmap_csv, similarity_filename, trace_decode
from .instances import (
    InstanceParseError,
    deserialize_instances,
    generate_dataset,
    parse_variant,
    serialize_instances,
)
from .model import ModelConfig
from .oracle import brute_force_optimal, greedy_nearest_feasible, optimality_gap, two_opt_improve
from .env import STRATEGIES, tour_cost
from .training import TrainConfig, evaluate, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("carm_route")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


TRAIN_DEFAULTS = {
    "tasks": ["cvrp"],
    "protocol": "mvmoe",
    "n": 20,
    "epochs": 50,
    "batch_size": 64,
    "instances_per_epoch": 2000,
    "lr": 1e-4,
    "weight_decay": 1e-6,
    "milestones": [],
    "lr_gamma": 0.1,
    "seed": 0,
    "grad_clip": None,
    "checkpoint_every": 0,
    "strategy": "CARM",
    "idt_head": False,
    "embedding_dim": 64,
    "heads": 8,
    "layers": 3,
    "ff_hidden": 256,
    "clip": 10.0,
    "dynamic_features": 4,
    "resume": None,
}


def _comma_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carm-route", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--workers", type=int, default=None, help="parallel workers for reference solvers")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("generate", help="write a JSONL dataset per variant")
    g.add_argument("--variant", required=True, type=_comma_list,
                   help="comma-separated variant tokens, e.g. cvrp,ocvrptw")
    g.add_argument("--protocol", default=None, choices=("mvmoe", "routefinder"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, default=1000)
    common(g)

    t = sub.add_parser("train", help="train a policy with the shared-baseline estimator")
    t.add_argument("--config", default=None, help="JSON file mirroring these flags; flags win")
    t.add_argument("--tasks", type=_comma_list, default=None)
    t.add_argument("--protocol", default=None, choices=("mvmoe", "routefinder"))
    t.add_argument("--n", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--instances-per-epoch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--weight-decay", type=float, default=None)
    t.add_argument("--milestones", type=_int_list, default=None)
    t.add_argument("--lr-gamma", type=float, default=None)
    t.add_argument("--grad-clip", type=float, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--strategy", choices=STRATEGIES, default=None)
    t.add_argument("--idt-head", action="store_const", const=True, default=None)
    t.add_argument("--embedding-dim", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--layers", type=int, default=None)
    t.add_argument("--ff-hidden", type=int, default=None)
    t.add_argument("--clip", type=float, default=None)
    t.add_argument("--dynamic-features", type=int, choices=(1, 4), default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    common(t)

    def model_eval_flags(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--augment", action="store_true", help="best of the 8 dihedral transforms")
        p.add_argument("--starts", type=int, default=None, help="multi-start count (default n)")
        p.add_argument("--reference", default="auto", choices=("auto", "optimal", "greedy+2opt"))

    e = sub.add_parser("eval", help="greedy evaluation and optimality gaps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--strategy", choices=STRATEGIES, default=None,
                   help="attention mask to decode with (PRE and FGE share weights)")
    model_eval_flags(e)
    common(e, seed=False)

    c = sub.add_parser("compare", help="side-by-side gaps of several checkpoints/strategies")
    c.add_argument("--checkpoint", required=True, action="append", help="repeat once per column")
    c.add_argument("--strategy", action="append", choices=STRATEGIES, default=None,
                   help="one per --checkpoint, or a single value for all")
    model_eval_flags(c)
    common(c, seed=False)

    a = sub.add_parser("analyze", help="export similarity heatmap CSVs")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--index", type=int, default=0, help="instance index within the dataset")
    a.add_argument("--strategy", action="append", choices=STRATEGIES, default=None)
    a.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    common(a, seed=False)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return out


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _write_manifest(out: Path, argv: Sequence[str], args: dict, outputs: Sequence[Path]) -> None:
    doc = {
        "tool": "carm-route",
        "version": __version__,
        "argv": list(argv),
        "arguments": args,
        "outputs": sorted(str(Path(o).relative_to(out)) if Path(o).is_relative_to(out) else str(o)
                          for o in outputs),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_dataset(path: str):
    p = _require_file(path, "dataset")
    try:
        instances = deserialize_instances(p)
    except (InstanceParseError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if not instances:
        raise DataError(f"{path}: dataset is empty")
    return instances


def _load_model(path: str):
    p = _require_file(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _reference_one(args):
    inst, kind = args
    if kind == "optimal":
        return brute_force_optimal(inst)[1]
    tour, _ = greedy_nearest_feasible(inst)
    return tour_cost(inst, two_opt_improve(inst, tour))


def _references(instances, kind: str, workers: int | None) -> tuple[np.ndarray, str]:
    if kind == "auto":
        kind = "optimal" if all(inst.n <= 7 for inst in instances) else "greedy+2opt"
    if kind == "optimal" and any(inst.n > 9 for inst in instances):
        raise UsageError("--reference optimal supports n <= 9 only")
    jobs = [(inst, kind) for inst in instances]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            costs = list(pool.map(_reference_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        costs = [_reference_one(j) for j in jobs]
    return np.array(costs), kind


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> tuple[dict, list[Path]]:
    out = _out_dir(args.out)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    seed = 0 if args.seed is None else args.seed
    outputs = []
    for token in args.variant:
        try:
            spec = parse_variant(token, args.protocol)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        path = out / f"{spec.token}_n{args.n}_seed{seed}.jsonl"
        serialize_instances(generate_dataset(spec, args.n, args.count, seed), path)
        outputs.append(path)
        print(f"wrote {args.count} instances to {path}")
    return {"variant": args.variant, "protocol": args.protocol, "n": args.n, "count": args.count,
            "seed": seed}, outputs


def resolve_train_args(args) -> dict:
    merged = dict(TRAIN_DEFAULTS)
    if args.config:
        path = _require_file(args.config, "config file")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise DataError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(doc) - set(merged))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        merged.update(doc)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if isinstance(merged["tasks"], str):
        merged["tasks"] = _comma_list(merged["tasks"])
    if merged["lr"] is None or merged["lr"] <= 0:
        raise UsageError(f"lr must be positive, got {merged['lr']}")
    return merged


def cmd_train(args) -> tuple[dict, list[Path]]:
    cfg = resolve_train_args(args)
    out = _out_dir(args.out)
    try:
        model_config = ModelConfig(
            embedding_dim=cfg["embedding_dim"], heads=cfg["heads"], encoder_layers=cfg["layers"],
            ff_hidden=cfg["ff_hidden"], clip=cfg["clip"], strategy=cfg["strategy"], idt_head=bool(cfg["idt_head"]),
            dynamic_features=cfg["dynamic_features"])
        train_config = TrainConfig(
            batch_size=cfg["batch_size"], instances_per_epoch=cfg["instances_per_epoch"], epochs=cfg["epochs"],
            lr=cfg["lr"], weight_decay=cfg["weight_decay"], milestones=tuple(cfg["milestones"]),
            gamma=cfg["lr_gamma"], tasks=tuple(cfg["tasks"]), protocol=cfg["protocol"], n=cfg["n"],
            seed=cfg["seed"], grad_clip=cfg["grad_clip"], checkpoint_every=cfg["checkpoint_every"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None
    resume = cfg["resume"]
    if resume is not None:
        _require_file(resume, "resume checkpoint")
    _, history = train(model_config, train_config, out, resume=resume)
    for stats in history:
        costs = ", ".join(f"{k}={v['mean_cost']:.4f}" for k, v in sorted(stats.per_variant.items()))
        print(f"epoch {stats.epoch}: {costs} lr={stats.lr:g} ({stats.wall_time:.1f}s)")
    outputs = sorted(out.glob("checkpoint*.json")) + [out / "train_log.csv"]
    return cfg, outputs


def _eval_columns(instances, specs, args):
    columns = []
    for path, strategy in specs:
        params, config, _ = _load_model(path)
        if strategy is not None and (strategy == "CARM") != (config.strategy == "CARM"):
            raise UsageError(f"{path}: a {config.strategy} checkpoint cannot decode as {strategy}")
        res = evaluate(params, config, instances, augment=args.augment, n_starts=args.starts, strategy=strategy)
        columns.append((f"{Path(path).stem}:{strategy or config.strategy}", res))
    return columns


def cmd_eval(args) -> tuple[dict, list[Path]]:
    out = _out_dir(args.out)
    _require_file(args.checkpoint, "checkpoint")
    instances = _load_dataset(args.dataset)
    (name, res), = _eval_columns(instances, [(args.checkpoint, args.strategy)], args)
    ref, kind = _references(instances, args.reference, args.workers)
    try:
        report = optimality_gap(res.costs, ref, kind)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    gap_path = out / "gaps.csv"
    report.to_csv(gap_path)
    summary_path = out / "summary.txt"
    text = f"model         : {name}\naugment       : {args.augment}\n{report.summary()}\n"
    summary_path.write_text(text)
    print(text, end="")
    return {"checkpoint": args.checkpoint, "dataset": args.dataset, "strategy": args.strategy,
            "augment": args.augment, "starts": args.starts, "reference": kind}, [gap_path, summary_path]


def cmd_compare(args) -> tuple[dict, list[Path]]:
    out = _out_dir(args.out)
    for path in args.checkpoint:
        _require_file(path, "checkpoint")
    strategies = args.strategy or [None]
    if len(strategies) == 1:
        strategies = strategies * len(args.checkpoint)
    if len(strategies) != len(args.checkpoint):
        raise UsageError("give one --strategy per --checkpoint, or a single one for all")
    instances = _load_dataset(args.dataset)
    columns = _eval_columns(instances, list(zip(args.checkpoint, strategies)), args)
    ref, kind = _references(instances, args.reference, args.workers)
    reports = [(name, optimality_gap(res.costs, ref, kind)) for name, res in columns]
    costs = np.stack([r.model_costs for _, r in reports], axis=1)
    best = costs.min(axis=1, keepdims=True)
    wins = np.isclose(costs, best, rtol=0.0, atol=1e-9).sum(axis=0)
    table = out / "compare.csv"
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["instance", "reference"] + [name for name, _ in reports])
        for i in range(len(instances)):
            w.writerow([i, repr(float(ref[i]))] + [repr(float(costs[i, j])) for j in range(len(reports))])
        w.writerow(["Avg.Gap(%)", ""] + [f"{r.mean_gap:.4f}" for _, r in reports])
        w.writerow(["Best Solution", ""] + [int(x) for x in wins])
    width = max(len(name) for name, _ in reports)
    lines = [f"reference: {kind}, instances: {len(instances)}",
             f"{'model':<{width}}  {'Avg.Gap':>9}  {'Best':>5}"]
    for (name, r), win in zip(reports, wins):
        lines.append(f"{name:<{width}}  {r.mean_gap:>8.2f}%  {int(win):>5}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return {"checkpoint": args.checkpoint, "strategy": strategies, "dataset": args.dataset,
            "augment": args.augment, "starts": args.starts, "reference": kind}, [table, out / "summary.txt"]


def cmd_analyze(args) -> tuple[dict, list[Path]]:
    out = _out_dir(args.out)
    _require_file(args.checkpoint, "checkpoint")
    instances = _load_dataset(args.dataset)
    if not 0 <= args.index < len(instances):
        raise UsageError(f"--index {args.index} outside dataset of {len(instances)} instances")
    if args.gamma <= 0:
        raise UsageError("--gamma must be positive")
    params, config, _ = _load_model(args.checkpoint)
    strategies = args.strategy or [config.strategy]
    inst = instances[args.index]
    outputs = []
    for strategy in strategies:
        if (strategy == "CARM") != (config.strategy == "CARM"):
            raise UsageError(f"checkpoint with strategy {config.strategy} cannot decode as {strategy}")
        trace = trace_decode(inst, params, config, strategy, gamma=args.gamma)
        path = export_heatmap_csv(trace, out / similarity_filename(inst.variant.name, strategy))
        outputs.append(path)
        print(f"wrote {trace.shape[0]}x{trace.shape[1]} similarity table to {path}")
    return {"checkpoint": args.checkpoint, "dataset": args.dataset, "index": args.index,
            "strategy": strategies, "gamma": args.gamma}, outputs


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved, outputs = COMMANDS[args.command](args)
        _write_manifest(Path(args.out), argv, resolved, outputs)
    except UsageError as exc:
        print(f"carm-route {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InstanceParseError) as exc:
        print(f"carm-route {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort fault boundary
        logger.debug("runtime fault", exc_info=True)
        print(f"carm-route {args.command}: runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
