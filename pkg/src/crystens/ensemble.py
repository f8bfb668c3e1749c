"""Checkpoint ensembling: rank a training trajectory, average the top n.

Two strategies over the same ranked checkpoint list:

* ``prediction``: run every selected checkpoint and average the
  predictions (in normalized target space, denormalized once at the end),
* ``model``: average the parameter tensors elementwise into a single
  network and run that once.

Ranking trusts the validation MSE stored in each checkpoint; it is
computed once per epoch during training and never re-evaluated here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .cgraph import CrystalGraph
from .errors import ConfigError, DataError
from .net import ArchConfig, ParamDict
from .train import Checkpoint, Normalizer, load_checkpoint, predict_indices, read_checkpoint_metadata
from .util import ordered_map

STRATEGIES = ("prediction", "model")


@dataclass(frozen=True)
class RankedEntry:
    epoch: int
    val_mse: float
    path: Path


@dataclass
class RankedCheckpoints:
    """Checkpoints ordered by ascending stored val MSE, epoch tiebreak."""

    entries: List[RankedEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def top(self, n: int) -> List[RankedEntry]:
        if not 1 <= n <= len(self.entries):
            raise ConfigError(f"ensemble size {n} out of range 1..{len(self.entries)}")
        return self.entries[:n]

    @property
    def best(self) -> RankedEntry:
        return self.entries[0]


def rank_checkpoints(directory: "str | Path") -> RankedCheckpoints:
    """Rank every ``.cgen`` file in a directory by stored validation MSE.

    Only metadata is read. File discovery order cannot matter: entries
    are fully ordered by (val_mse, epoch) and epochs must be unique.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.cgen"))
    if not paths:
        raise DataError(f"no checkpoints found in {directory}")
    entries = []
    seen_epochs = set()
    for path in paths:
        meta = read_checkpoint_metadata(path)
        epoch = int(meta["epoch"])
        if epoch in seen_epochs:
            raise DataError(f"duplicate epoch {epoch} among checkpoints in {directory}")
        seen_epochs.add(epoch)
        entries.append(RankedEntry(epoch=epoch, val_mse=float(meta["val_mse"]), path=path))
    entries.sort(key=lambda e: (e.val_mse, e.epoch))
    return RankedCheckpoints(entries=entries)


@dataclass(frozen=True)
class EnsembleSpec:
    n: int = 1
    strategy: str = "prediction"

    def __post_init__(self) -> None:
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError(f"ensemble size must be a positive integer, got {self.n!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def default_top_n(n_tasks: int, available: int) -> int:
    """20 models for single-task runs, 40 for multi-task, capped by supply."""
    return min(20 if n_tasks == 1 else 40, available)


def load_members(ranked: RankedCheckpoints, n: int) -> List[Checkpoint]:
    return ordered_map(lambda e: load_checkpoint(e.path), ranked.top(n))


def require_shared_normalizer(members: Sequence[Checkpoint]) -> Normalizer:
    ref = members[0]
    for m in members[1:]:
        if m.normalizer != ref.normalizer:
            raise ConfigError(
                f"checkpoint epochs {ref.epoch} and {m.epoch} have different normalizers; "
                "their predictions are not in a shared target space"
            )
        if m.arch.tasks != ref.arch.tasks:
            raise ConfigError(
                f"checkpoint epochs {ref.epoch} and {m.epoch} predict different tasks"
            )
    return ref.normalizer


def require_shared_arch(members: Sequence[Checkpoint]) -> ArchConfig:
    ref = members[0]
    for m in members[1:]:
        if m.arch != ref.arch:
            raise ConfigError(
                f"checkpoint epochs {ref.epoch} and {m.epoch} have different architectures; "
                "parameter averaging needs identical networks from one initialization"
            )
    require_shared_normalizer(members)
    return ref.arch


@dataclass
class EnsemblePrediction:
    """Per-input, per-task ensemble output in both target spaces."""

    tasks: Tuple[str, ...]
    y_norm: np.ndarray
    y: np.ndarray
    n: int
    strategy: str


def member_predictions(
    members: Sequence[Checkpoint], graphs: Sequence[CrystalGraph], batch_size: int = 256
) -> List[np.ndarray]:
    """Normalized-space predictions of each member, in rank order."""
    indices = list(range(len(graphs)))

    def _run(member: Checkpoint) -> np.ndarray:
        return predict_indices(member.params, member.arch, graphs, indices, batch_size)

    return ordered_map(_run, members)


def predict_prediction_ensemble(
    ranked: RankedCheckpoints, n: int, graphs: Sequence[CrystalGraph], batch_size: int = 256
) -> EnsemblePrediction:
    """Average the top-n members' predictions; denormalize the mean once."""
    members = load_members(ranked, n)
    normalizer = require_shared_normalizer(members)
    preds = member_predictions(members, graphs, batch_size)
    acc = preds[0].copy()
    for p in preds[1:]:
        acc += p
    acc /= n
    return EnsemblePrediction(
        tasks=members[0].arch.tasks,
        y_norm=acc,
        y=normalizer.denormalize(acc),
        n=n,
        strategy="prediction",
    )


def average_params(ranked: RankedCheckpoints, n: int) -> ParamDict:
    """Elementwise mean of every tensor across the top-n checkpoints."""
    members = load_members(ranked, n)
    require_shared_arch(members)
    acc = {name: tensor.copy() for name, tensor in members[0].params.items()}
    for m in members[1:]:
        for name in acc:
            acc[name] += m.params[name]
    for name in acc:
        acc[name] /= n
    return acc


def predict_model_ensemble(
    ranked: RankedCheckpoints, n: int, graphs: Sequence[CrystalGraph], batch_size: int = 256
) -> EnsemblePrediction:
    """Run one forward pass with the parameter-averaged network."""
    members = load_members(ranked, n)
    arch = require_shared_arch(members)
    normalizer = members[0].normalizer
    acc = {name: tensor.copy() for name, tensor in members[0].params.items()}
    for m in members[1:]:
        for name in acc:
            acc[name] += m.params[name]
    for name in acc:
        acc[name] /= n
    y_norm = predict_indices(acc, arch, graphs, list(range(len(graphs))), batch_size)
    return EnsemblePrediction(
        tasks=arch.tasks,
        y_norm=y_norm,
        y=normalizer.denormalize(y_norm),
        n=n,
        strategy="model",
    )


def predict_ensemble(
    ranked: RankedCheckpoints,
    spec: EnsembleSpec,
    graphs: Sequence[CrystalGraph],
    batch_size: int = 256,
) -> EnsemblePrediction:
    if spec.strategy == "prediction":
        return predict_prediction_ensemble(ranked, spec.n, graphs, batch_size)
    return predict_model_ensemble(ranked, spec.n, graphs, batch_size)
