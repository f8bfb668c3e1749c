"""Command-line interface.

Subcommands cover the full workflow: ``import`` converts a raw dump into
a dataset directory, ``train`` produces a run directory (lock file,
splits, one checkpoint per epoch, training log), and ``ensemble`` /
``evaluate`` / ``sweep`` / ``bands`` post-process a finished run into CSV
and JSON reports. ``toy`` materializes the synthetic benchmark dataset.

Configuration precedence for ``train``: built-in defaults, then a JSON
config file (``--config``), then individual flags. The fully resolved
result is written to ``<run>/config.lock.json``; re-running from that
lock file reproduces the run bit-for-bit.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence, 5 checkpoint or other I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .cgraph import GraphConfig, build_graphs
from .ensemble import (
    EnsembleSpec,
    RankedCheckpoints,
    default_top_n,
    predict_ensemble,
    predict_prediction_ensemble,
    rank_checkpoints,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evalrep import (
    band_rows,
    emit_report,
    evaluate_predictions,
    percentile_bands,
    predictions_rows,
    summary_dict,
    sweep_ensemble,
    sweep_rows,
    write_summary_json,
)
from .net import ArchConfig
from .structio import Dataset, SplitIndices, import_mp_dump, load_dataset, split_dataset
from .toy import generate_toy_dataset
from .train import TrainConfig, checkpoint_path, load_checkpoint, predict_indices, train_run

LOCK_NAME = "config.lock.json"


def default_config() -> dict:
    return {
        "data": None,
        "out": None,
        "graph": {
            "cutoff": 8.0,
            "max_neighbors": 12,
            "gauss_step": 0.2,
            "gauss_width": 0.2,
            "atom_features": None,
        },
        "arch": {
            "d_init": 100,
            "d_atom": 64,
            "d_hidden": 128,
            "n_conv": 3,
            "tasks": ["formation_energy"],
            "seed": 0,
            # derived from the graph settings; locks carry it for the record
            "d_edge": None,
        },
        "train": {"epochs": 100, "batch_size": 256, "lr": 0.01, "task_weights": None, "seed": 0},
        "split": {"fractions": [0.7, 0.1, 0.2], "seed": 0, "file": None},
        "ensemble": {"n": None, "strategy": "prediction"},
    }


def merge_config(base: dict, overlay: dict, context: str = "config") -> None:
    for key, value in overlay.items():
        if key not in base:
            raise ConfigError(f"unknown config key {context}.{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merge_config(base[key], value, f"{context}.{key}")
        else:
            base[key] = value


def graph_config(cfg: dict) -> GraphConfig:
    g = cfg["graph"]
    return GraphConfig(
        cutoff=float(g["cutoff"]),
        max_neighbors=None if g["max_neighbors"] is None else int(g["max_neighbors"]),
        gauss_step=float(g["gauss_step"]),
        gauss_width=float(g["gauss_width"]),
        atom_features=g["atom_features"],
    )


def arch_config(cfg: dict) -> ArchConfig:
    a = cfg["arch"]
    d_edge = graph_config(cfg).n_gauss
    if a["d_edge"] is not None and int(a["d_edge"]) != d_edge:
        raise ConfigError(
            f"config arch.d_edge={a['d_edge']} conflicts with graph settings (width {d_edge})"
        )
    return ArchConfig(
        d_init=int(a["d_init"]),
        d_atom=int(a["d_atom"]),
        d_hidden=int(a["d_hidden"]),
        n_conv=int(a["n_conv"]),
        tasks=tuple(a["tasks"]),
        seed=int(a["seed"]),
        d_edge=d_edge,
    )


def train_config(cfg: dict, checkpoint_dir: Path) -> TrainConfig:
    t = cfg["train"]
    weights = None if t["task_weights"] is None else tuple(float(w) for w in t["task_weights"])
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=float(t["lr"]),
        task_weights=weights,
        seed=t["seed"],
        checkpoint_dir=checkpoint_dir,
    )


def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise DataError(f"missing {what} {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed {what} {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{what} {path} must hold a JSON object")
    return obj


def _csv_items(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_train(args: argparse.Namespace) -> int:
    cfg = default_config()
    if args.config:
        merge_config(cfg, _read_json(Path(args.config), "config file"))

    if args.data is not None:
        cfg["data"] = args.data
    if args.out is not None:
        cfg["out"] = args.out
    if args.tasks is not None:
        cfg["arch"]["tasks"] = _csv_items(args.tasks)
    for flag, section, key in (
        ("epochs", "train", "epochs"),
        ("batch_size", "train", "batch_size"),
        ("lr", "train", "lr"),
        ("n_conv", "arch", "n_conv"),
        ("d_init", "arch", "d_init"),
        ("d_atom", "arch", "d_atom"),
        ("d_hidden", "arch", "d_hidden"),
        ("cutoff", "graph", "cutoff"),
        ("gauss_step", "graph", "gauss_step"),
        ("gauss_width", "graph", "gauss_width"),
        ("atom_features", "graph", "atom_features"),
        ("split_seed", "split", "seed"),
        ("splits", "split", "file"),
    ):
        value = getattr(args, flag)
        if value is not None:
            cfg[section][key] = value
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["arch"]["seed"] = args.seed
    if args.task_weights is not None:
        cfg["train"]["task_weights"] = [float(w) for w in _csv_items(args.task_weights)]
    if args.max_neighbors is not None:
        cfg["graph"]["max_neighbors"] = args.max_neighbors if args.max_neighbors > 0 else None
    if args.fractions is not None:
        cfg["split"]["fractions"] = [float(f) for f in _csv_items(args.fractions)]

    if not cfg["data"]:
        raise ConfigError("no dataset directory given (--data or config data)")
    if not cfg["out"]:
        raise ConfigError("no run directory given (--out or config out)")

    gcfg = graph_config(cfg)
    arch = arch_config(cfg)
    cfg["arch"]["d_edge"] = arch.d_edge

    dataset = load_dataset(cfg["data"])
    if cfg["split"]["file"]:
        splits = SplitIndices.load(cfg["split"]["file"])
        if splits.n != len(dataset):
            raise DataError(
                f"split file covers {splits.n} samples but dataset has {len(dataset)}"
            )
    else:
        splits = split_dataset(
            len(dataset), fractions=cfg["split"]["fractions"], seed=int(cfg["split"]["seed"])
        )

    run_dir = Path(cfg["out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    (run_dir / LOCK_NAME).write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    splits.save(run_dir / "splits.json")

    tc = train_config(cfg, run_dir / "checkpoints")
    log = train_run(dataset, splits, arch, tc, gcfg, log_path=run_dir / "train_log.csv")
    last = log.rows[-1]
    print(f"trained {tc.epochs} epochs into {run_dir}")
    print(f"final train_loss={last.train_loss:.6g} val_mse={last.val_mse:.6g}")
    return 0


@dataclass
class RunContext:
    run_dir: Path
    cfg: dict
    dataset: Dataset
    splits: SplitIndices
    tasks: Tuple[str, ...]
    ranked: RankedCheckpoints
    graph_cfg: GraphConfig


def _load_run(run_dir: "str | Path") -> RunContext:
    run_dir = Path(run_dir)
    cfg = _read_json(run_dir / LOCK_NAME, "run lock file")
    base = default_config()
    merge_config(base, cfg, "config.lock.json")
    dataset = load_dataset(base["data"])
    splits = SplitIndices.load(run_dir / "splits.json")
    if splits.n != len(dataset):
        raise DataError(f"splits cover {splits.n} samples but dataset has {len(dataset)}")
    return RunContext(
        run_dir=run_dir,
        cfg=base,
        dataset=dataset,
        splits=splits,
        tasks=tuple(base["arch"]["tasks"]),
        ranked=rank_checkpoints(run_dir / "checkpoints"),
        graph_cfg=graph_config(base),
    )


def _split_arrays(ctx: RunContext, split: str):
    indices = ctx.splits.indices(split)
    structures = ctx.dataset.structures()
    all_ids = ctx.dataset.ids()
    ids = [all_ids[i] for i in indices]
    graphs = build_graphs([structures[i] for i in indices], ctx.graph_cfg)
    targets = ctx.dataset.targets(ctx.tasks)[indices]
    return ids, graphs, targets


def _resolve_top_n(ctx: RunContext, requested: Optional[int]) -> int:
    available = len(ctx.ranked)
    if requested is None:
        locked = ctx.cfg["ensemble"]["n"]
        if locked is not None:
            requested = int(locked)
        else:
            return default_top_n(len(ctx.tasks), available)
    if not 1 <= requested <= available:
        raise ConfigError(f"top-n {requested} out of range 1..{available}")
    return requested


def _reports_dir(ctx: RunContext) -> Path:
    path = ctx.run_dir / "reports"
    path.mkdir(exist_ok=True)
    return path


def cmd_ensemble(args: argparse.Namespace) -> int:
    ctx = _load_run(args.run_dir)
    ids, graphs, targets = _split_arrays(ctx, args.split)
    n = _resolve_top_n(ctx, args.top_n)
    spec = EnsembleSpec(n=n, strategy=args.strategy)

    ens = predict_ensemble(ctx.ranked, spec, graphs)
    best = predict_prediction_ensemble(ctx.ranked, 1, graphs)
    result_ens = evaluate_predictions(ctx.tasks, ens.y, targets)
    result_best = evaluate_predictions(ctx.tasks, best.y, targets)

    reports = _reports_dir(ctx)
    rows, fields = predictions_rows(ids, ctx.tasks, ens.y, targets)
    pred_path = reports / f"predictions_{spec.strategy}_n{n}.csv"
    emit_report(rows, fields, pred_path)
    summary = summary_dict(spec.strategy, n, ctx.tasks, result_best.maes, result_ens.maes)
    summary_path = reports / f"summary_{spec.strategy}_n{n}.json"
    write_summary_json(summary, summary_path)

    for task in ctx.tasks:
        stats = summary[task]
        print(
            f"{task}: best_val={stats['best_val_mae']:.6g} "
            f"ensemble={stats['ensemble_mae']:.6g} ({stats['improvement_pct']:+.2f}%)"
        )
    print(f"wrote {pred_path} and {summary_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    ctx = _load_run(args.run_dir)
    ids, graphs, targets = _split_arrays(ctx, args.split)

    if args.checkpoint == "best":
        label = "best"
        path = ctx.ranked.best.path
    else:
        try:
            epoch = int(args.checkpoint)
        except ValueError:
            raise ConfigError(f"--checkpoint must be 'best' or an epoch number, got {args.checkpoint!r}") from None
        path = checkpoint_path(ctx.run_dir / "checkpoints", epoch)
        if not path.is_file():
            raise DataError(f"no checkpoint for epoch {epoch} in {ctx.run_dir}")
        label = f"epoch{epoch:05d}"
    ckpt = load_checkpoint(path)
    preds = ckpt.normalizer.denormalize(
        predict_indices(ckpt.params, ckpt.arch, graphs, list(range(len(graphs))))
    )
    result = evaluate_predictions(ctx.tasks, preds, targets)

    reports = _reports_dir(ctx)
    rows, fields = predictions_rows(ids, ctx.tasks, preds, targets)
    out_path = reports / f"evaluate_{label}.csv"
    emit_report(rows, fields, out_path)
    for task in ctx.tasks:
        print(f"{task}: mae={result.maes[task]:.6g} (checkpoint {label}, n={result.n_test})")
    print(f"wrote {out_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    ctx = _load_run(args.run_dir)
    _, graphs, targets = _split_arrays(ctx, args.split)
    n_max = args.max_n
    if n_max is None:
        n_max = min(50, len(ctx.ranked))
    strategies = ("prediction", "model") if args.strategy == "both" else (args.strategy,)

    points = []
    for strategy in strategies:
        points.extend(sweep_ensemble(ctx.ranked, graphs, targets, n_max, strategy))
    rows, fields = sweep_rows(points)
    out_path = _reports_dir(ctx) / "sweep.csv"
    emit_report(rows, fields, out_path)
    print(f"wrote {out_path} ({len(rows)} rows, n=1..{n_max})")
    return 0


def cmd_bands(args: argparse.Namespace) -> int:
    ctx = _load_run(args.run_dir)
    _, graphs, targets = _split_arrays(ctx, args.split)
    n = _resolve_top_n(ctx, args.top_n)
    ens = predict_ensemble(ctx.ranked, EnsembleSpec(n=n, strategy=args.strategy), graphs)
    best = predict_prediction_ensemble(ctx.ranked, 1, graphs)

    directions = ("bottom_top", "top_bottom") if args.directions == "both" else (args.directions,)
    reports = []
    for direction in directions:
        for i, task in enumerate(ctx.tasks):
            reports.append(
                (task, percentile_bands(targets[:, i], best.y[:, i], ens.y[:, i], direction))
            )
    rows, fields = band_rows(reports)
    out_path = _reports_dir(ctx) / "bands.csv"
    emit_report(rows, fields, out_path)
    print(f"wrote {out_path} ({len(rows)} rows, top-n={n}, strategy={args.strategy})")
    return 0


def cmd_import(args: argparse.Namespace) -> int:
    count = import_mp_dump(args.mp_dump, args.out, permissive=args.permissive)
    print(f"imported {count} records into {args.out}")
    return 0


def cmd_toy(args: argparse.Namespace) -> int:
    count = generate_toy_dataset(args.out, n=args.n, seed=args.seed, multi=args.multi)
    print(f"wrote {count} toy structures into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crystens",
        description="Crystal-graph property prediction with checkpoint ensembling.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    p_train.add_argument("--data", help="dataset directory (id_prop.csv plus structures)")
    p_train.add_argument("--out", help="run directory to create")
    p_train.add_argument("--config", help="JSON config file; flags override it")
    p_train.add_argument("--tasks", help="comma-separated target properties")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--seed", type=int, help="sets both init and shuffle seeds")
    p_train.add_argument("--n-conv", dest="n_conv", type=int)
    p_train.add_argument("--d-atom", dest="d_atom", type=int)
    p_train.add_argument("--d-hidden", dest="d_hidden", type=int)
    p_train.add_argument("--task-weights", dest="task_weights", help="comma-separated loss weights")
    p_train.add_argument("--cutoff", type=float, help="neighbor cutoff in Angstrom")
    p_train.add_argument(
        "--max-neighbors", dest="max_neighbors", type=int, help="per-atom cap; 0 keeps all edges"
    )
    p_train.add_argument("--gauss-step", dest="gauss_step", type=float)
    p_train.add_argument("--gauss-width", dest="gauss_width", type=float)
    p_train.add_argument(
        "--atom-features",
        dest="atom_features",
        help="JSON file mapping atomic numbers to node feature vectors",
    )
    p_train.add_argument("--d-init", dest="d_init", type=int, help="node feature width")
    p_train.add_argument("--fractions", help="train,val,test fractions (default 0.7,0.1,0.2)")
    p_train.add_argument("--split-seed", dest="split_seed", type=int)
    p_train.add_argument("--splits", help="reuse an existing splits.json instead of resplitting")
    p_train.set_defaults(func=cmd_train)

    p_ens = sub.add_parser("ensemble", help="ensemble the top-n checkpoints and evaluate")
    p_ens.add_argument("run_dir")
    p_ens.add_argument("--top-n", dest="top_n", type=int)
    p_ens.add_argument("--strategy", choices=("prediction", "model"), default="prediction")
    p_ens.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_ens.set_defaults(func=cmd_ensemble)

    p_eval = sub.add_parser("evaluate", help="evaluate a single checkpoint")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--checkpoint", default="best", help="'best' or an epoch number")
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="MAE versus ensemble size")
    p_sweep.add_argument("run_dir")
    p_sweep.add_argument("--max-n", dest="max_n", type=int)
    p_sweep.add_argument("--strategy", choices=("prediction", "model", "both"), default="both")
    p_sweep.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_sweep.set_defaults(func=cmd_sweep)

    p_bands = sub.add_parser("bands", help="MAE across percentile bands of the target spectrum")
    p_bands.add_argument("run_dir")
    p_bands.add_argument("--top-n", dest="top_n", type=int)
    p_bands.add_argument("--strategy", choices=("prediction", "model"), default="prediction")
    p_bands.add_argument("--directions", choices=("bottom_top", "top_bottom", "both"), default="both")
    p_bands.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_bands.set_defaults(func=cmd_bands)

    p_imp = sub.add_parser("import", help="convert a materials JSON dump into a dataset directory")
    p_imp.add_argument("--mp-dump", dest="mp_dump", required=True, help="JSON array of records")
    p_imp.add_argument("--out", required=True)
    p_imp.add_argument(
        "--permissive", action="store_true", help="keep records with missing property values"
    )
    p_imp.set_defaults(func=cmd_import)

    p_toy = sub.add_parser("toy", help="generate the synthetic benchmark dataset")
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--n", type=int, default=300)
    p_toy.add_argument("--seed", type=int, default=42)
    p_toy.add_argument("--multi", action="store_true", help="emit all three target columns")
    p_toy.set_defaults(func=cmd_toy)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
