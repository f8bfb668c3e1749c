"""Test-set evaluation, ensemble-size sweeps, percentile-band analysis,
and deterministic report files.

All reported MAEs are in physical units (eV/atom, eV, g/cm3): predictions
are denormalized before any residual is taken. Report writers emit
byte-identical output for identical inputs; floats are rendered with
``repr`` for exact round-trips.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cgraph import CrystalGraph
from .ensemble import (
    RankedCheckpoints,
    load_members,
    member_predictions,
    require_shared_arch,
    require_shared_normalizer,
)
from .errors import ConfigError, DataError
from .train import predict_indices

PERCENTILES = tuple(range(10, 100, 10))
DIRECTIONS = ("bottom_top", "top_bottom")


def mae(preds: np.ndarray, targets: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape:
        raise ConfigError(f"shape mismatch: preds {preds.shape} vs targets {targets.shape}")
    if preds.size == 0:
        raise DataError("MAE of an empty sample set is undefined")
    return float(np.mean(np.abs(preds - targets)))


def improvement_pct(best_val_mae: float, ensemble_mae: float) -> float:
    """Signed percent change of the ensemble over the best-val baseline;
    positive means the ensemble is better (lower MAE)."""
    if not (math.isfinite(best_val_mae) and best_val_mae > 0):
        raise DataError(f"baseline MAE must be positive, got {best_val_mae}")
    return 100.0 * (best_val_mae - ensemble_mae) / best_val_mae


@dataclass
class EvalResult:
    """Denormalized predictions vs targets, with per-task MAE."""

    tasks: Tuple[str, ...]
    preds: np.ndarray
    targets: np.ndarray
    maes: Dict[str, float]

    @property
    def n_test(self) -> int:
        return self.preds.shape[0]


def evaluate_predictions(tasks: Sequence[str], preds: np.ndarray, targets: np.ndarray) -> EvalResult:
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if preds.shape != targets.shape or preds.shape[1] != len(tasks):
        raise ConfigError(
            f"shape mismatch: preds {preds.shape}, targets {targets.shape}, {len(tasks)} tasks"
        )
    maes = {task: mae(preds[:, i], targets[:, i]) for i, task in enumerate(tasks)}
    return EvalResult(tasks=tuple(tasks), preds=preds, targets=targets, maes=maes)


@dataclass
class SweepPoint:
    n: int
    strategy: str
    maes: Dict[str, float]


def sweep_ensemble(
    ranked: RankedCheckpoints,
    graphs: Sequence[CrystalGraph],
    targets: np.ndarray,
    n_max: Optional[int] = None,
    strategy: str = "prediction",
    batch_size: int = 256,
) -> List[SweepPoint]:
    """Ensemble MAE for every n in 1..n_max with O(n_max) model evaluations.

    Prediction strategy: each member is evaluated once and running prefix
    sums give every ensemble mean. Model strategy: parameters are
    prefix-summed in rank order and the averaged network runs once per n.
    ``targets`` are denormalized, aligned with ``graphs``.
    """
    if strategy not in ("prediction", "model"):
        raise ConfigError(f"unknown sweep strategy {strategy!r}")
    if n_max is None:
        n_max = min(50, len(ranked))
    if not 1 <= n_max <= len(ranked):
        raise ConfigError(f"n_max {n_max} out of range 1..{len(ranked)}")
    members = load_members(ranked, n_max)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))

    points: List[SweepPoint] = []
    if strategy == "prediction":
        normalizer = require_shared_normalizer(members)
        tasks = members[0].arch.tasks
        preds = member_predictions(members, graphs, batch_size)
        acc = np.zeros_like(preds[0])
        for n in range(1, n_max + 1):
            acc += preds[n - 1]
            denorm = normalizer.denormalize(acc / n)
            points.append(
                SweepPoint(
                    n=n,
                    strategy=strategy,
                    maes={t: mae(denorm[:, i], targets[:, i]) for i, t in enumerate(tasks)},
                )
            )
    else:
        arch = require_shared_arch(members)
        normalizer = members[0].normalizer
        tasks = arch.tasks
        indices = list(range(len(graphs)))
        acc = {name: np.zeros_like(tensor) for name, tensor in members[0].params.items()}
        for n in range(1, n_max + 1):
            for name, tensor in members[n - 1].params.items():
                acc[name] += tensor
            avg = {name: tensor / n for name, tensor in acc.items()}
            denorm = normalizer.denormalize(predict_indices(avg, arch, graphs, indices, batch_size))
            points.append(
                SweepPoint(
                    n=n,
                    strategy=strategy,
                    maes={t: mae(denorm[:, i], targets[:, i]) for i, t in enumerate(tasks)},
                )
            )
    return points


@dataclass
class BandRow:
    percentile: int
    band_size: int
    mae_best: float
    mae_ensemble: float


@dataclass
class BandReport:
    """Cumulative percentile bands over the sorted true-target spectrum.

    ``bottom_top`` at percentile p covers the p% smallest targets;
    ``top_bottom`` covers the p% largest. Bands nest as p grows.
    """

    direction: str
    rows: List[BandRow]


def percentile_bands(
    targets: np.ndarray,
    preds_best: np.ndarray,
    preds_ens: np.ndarray,
    direction: str,
) -> BandReport:
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    targets = np.asarray(targets, dtype=float).reshape(-1)
    preds_best = np.asarray(preds_best, dtype=float).reshape(-1)
    preds_ens = np.asarray(preds_ens, dtype=float).reshape(-1)
    if not (targets.shape == preds_best.shape == preds_ens.shape):
        raise ConfigError("targets and both prediction arrays must have equal length")
    n = targets.shape[0]
    if n < 10:
        raise DataError(f"percentile bands need at least 10 samples, got {n}")
    # stable: equal targets keep their original (id) order
    order = np.argsort(targets, kind="stable")
    rows = []
    for p in PERCENTILES:
        if direction == "bottom_top":
            size = int(math.floor(p / 100.0 * n + 0.5))
            band = order[:size]
        else:
            start = int(math.floor((100 - p) / 100.0 * n + 0.5))
            band = order[start:]
        rows.append(
            BandRow(
                percentile=p,
                band_size=len(band),
                mae_best=mae(preds_best[band], targets[band]),
                mae_ensemble=mae(preds_ens[band], targets[band]),
            )
        )
    return BandReport(direction=direction, rows=rows)


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(rows: List[dict], fieldnames: Sequence[str], path: "str | Path", fmt: str = "csv") -> None:
    """Write rows as CSV (fixed column order) or JSON; deterministic bytes."""
    if fmt not in ("csv", "json"):
        raise ConfigError(f"report format must be csv or json, got {fmt!r}")
    path = Path(path)
    if fmt == "csv":
        lines = [",".join(fieldnames)]
        for row in rows:
            lines.append(",".join(_cell(row[name]) for name in fieldnames))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def predictions_rows(
    ids: Sequence[str],
    tasks: Sequence[str],
    preds: np.ndarray,
    targets: Optional[np.ndarray] = None,
) -> Tuple[List[dict], List[str]]:
    """Rows + header for a predictions report: id, per-task pred, per-task true."""
    fields = ["id"] + [f"{t}_pred" for t in tasks]
    if targets is not None:
        fields += [f"{t}_true" for t in tasks]
    rows = []
    for i, rid in enumerate(ids):
        row = {"id": rid}
        for j, t in enumerate(tasks):
            row[f"{t}_pred"] = float(preds[i, j])
            if targets is not None:
                row[f"{t}_true"] = float(targets[i, j])
        rows.append(row)
    return rows, fields


def sweep_rows(points: List[SweepPoint]) -> Tuple[List[dict], List[str]]:
    rows = [
        {"n": pt.n, "strategy": pt.strategy, "task": task, "mae": float(pt.maes[task])}
        for pt in points
        for task in pt.maes
    ]
    return rows, ["n", "strategy", "task", "mae"]


def band_rows(reports: List[Tuple[str, BandReport]]) -> Tuple[List[dict], List[str]]:
    """Flatten (task, report) pairs into the band CSV schema."""
    rows = []
    for task, report in reports:
        for r in report.rows:
            rows.append(
                {
                    "direction": report.direction,
                    "percentile": r.percentile,
                    "band_size": r.band_size,
                    "task": task,
                    "mae_bestval": float(r.mae_best),
                    "mae_ensemble": float(r.mae_ensemble),
                }
            )
    return rows, ["direction", "percentile", "band_size", "task", "mae_bestval", "mae_ensemble"]


def summary_dict(
    strategy: str,
    n_used: int,
    tasks: Sequence[str],
    best_maes: Dict[str, float],
    ensemble_maes: Dict[str, float],
) -> dict:
    out: dict = {"strategy": strategy}
    for task in tasks:
        out[task] = {
            "best_val_mae": float(best_maes[task]),
            "ensemble_mae": float(ensemble_maes[task]),
            "improvement_pct": improvement_pct(best_maes[task], ensemble_maes[task]),
            "n_used": n_used,
        }
    return out


def write_summary_json(summary: dict, path: "str | Path") -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
