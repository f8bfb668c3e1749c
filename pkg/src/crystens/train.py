"""SGD training loop, per-epoch validation, and checkpoint persistence.

Every epoch ends with a validation MSE (computed in normalized target
space) and exactly one checkpoint file, so a finished run leaves the full
optimization trajectory on disk for the ensemble module to harvest.

Checkpoint files (``.cgen``) are little-endian binary: magic ``CGEN``,
format version u32, metadata length u64 + UTF-8 JSON (architecture,
epoch, validation MSEs, normalizer, train seed), tensor count u32, then
per tensor a u16-length name, u8 rank, u64 dims, and raw f32 data.
Training arithmetic stays in double precision; only storage is single.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cgraph import CrystalGraph, GraphConfig, build_graphs
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .net import (
    ArchConfig,
    ParamDict,
    batch_graphs,
    forward,
    init_model,
    loss_and_gradients,
    validate_params,
)
from .structio import Dataset, SplitIndices

CKPT_MAGIC = b"CGEN"
CKPT_VERSION = 1

# Optimization weights for joint training; single-task runs use 1.
DEFAULT_TASK_WEIGHTS = {"formation_energy": 1.5, "band_gap": 3.0, "density": 1.5}


@dataclass(frozen=True)
class Normalizer:
    """Per-task affine map to zero-mean unit-variance target space."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @classmethod
    def fit(cls, targets: np.ndarray) -> "Normalizer":
        """Fit on the training split only; constant columns get std 1."""
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        mean = targets.mean(axis=0)
        std = targets.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    @property
    def n_tasks(self) -> int:
        return len(self.mean)

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - np.array(self.mean)) / np.array(self.std)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * np.array(self.std) + np.array(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Normalizer":
        try:
            return cls(mean=tuple(float(x) for x in obj["mean"]), std=tuple(float(x) for x in obj["std"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed normalizer: {exc}") from None


def resolve_task_weights(tasks: Sequence[str], weights: Optional[Sequence[float]] = None) -> Tuple[float, ...]:
    """Explicit weights win; defaults are 1 for single-task, the standard
    per-property weights otherwise."""
    if weights is not None:
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(tasks):
            raise ConfigError(f"{len(weights)} task weights for {len(tasks)} tasks")
        if any(w <= 0 for w in weights):
            raise ConfigError(f"task weights must be positive, got {weights}")
        return weights
    if len(tasks) == 1:
        return (1.0,)
    return tuple(DEFAULT_TASK_WEIGHTS[t] for t in tasks)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.01
    task_weights: Optional[Tuple[float, ...]] = None
    seed: int = 0
    checkpoint_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not (isinstance(self.lr, (int, float)) and math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.task_weights is not None:
            object.__setattr__(self, "task_weights", tuple(float(w) for w in self.task_weights))
            if any(w <= 0 for w in self.task_weights):
                raise ConfigError(f"task weights must be positive, got {self.task_weights}")
        if self.checkpoint_dir is not None:
            object.__setattr__(self, "checkpoint_dir", Path(self.checkpoint_dir))


@dataclass
class Checkpoint:
    """One epoch's model state plus the statistics needed to rank and use it."""

    params: ParamDict
    epoch: int
    val_mse: float
    val_mse_tasks: Dict[str, float]
    normalizer: Normalizer
    arch: ArchConfig
    train_seed: int

    def metadata(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "epoch": self.epoch,
            "normalizer": self.normalizer.to_dict(),
            "train_seed": self.train_seed,
            "val_mse": self.val_mse,
            "val_mse_tasks": self.val_mse_tasks,
        }


def save_checkpoint(ckpt: Checkpoint, path: "str | Path") -> None:
    validate_params(ckpt.params, ckpt.arch)
    if not (math.isfinite(ckpt.val_mse) and ckpt.val_mse >= 0):
        raise CheckpointError(f"val_mse must be finite and >= 0, got {ckpt.val_mse}")
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<4sI", CKPT_MAGIC, CKPT_VERSION), struct.pack("<Q", len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, tensor in ckpt.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_metadata(reader: _Reader) -> dict:
    magic, version = reader.unpack("<4sI")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{reader.path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{reader.path}: unsupported format version {version}")
    (meta_len,) = reader.unpack("<Q")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{reader.path}: bad metadata ({exc})") from None
    for key in ("arch", "epoch", "normalizer", "train_seed", "val_mse", "val_mse_tasks"):
        if key not in meta:
            raise CheckpointError(f"{reader.path}: metadata missing {key!r}")
    return meta


def read_checkpoint_metadata(path: "str | Path") -> dict:
    """Parse only the JSON header; cheap enough to call on every rank pass."""
    path = Path(path)
    try:
        # metadata sits in the first kilobytes; tensors can be megabytes
        with open(path, "rb") as fh:
            head = fh.read(16)
            if len(head) < 16:
                raise CheckpointError(f"truncated checkpoint {path}")
            (meta_len,) = struct.unpack("<Q", head[8:16])
            blob = head + fh.read(meta_len)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return _read_metadata(_Reader(blob, path))


def load_checkpoint(path: "str | Path") -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    reader = _Reader(blob, path)
    meta = _read_metadata(reader)
    try:
        arch = ArchConfig.from_dict(meta["arch"])
        epoch = int(meta["epoch"])
        val_mse = float(meta["val_mse"])
        val_mse_tasks = {str(k): float(v) for k, v in meta["val_mse_tasks"].items()}
        train_seed = int(meta["train_seed"])
    except (ConfigError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    normalizer = Normalizer.from_dict(meta["normalizer"])

    (count,) = reader.unpack("<I")
    params: ParamDict = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: bad tensor name ({exc})") from None
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        n_elem = int(np.prod(dims)) if rank else 1
        raw = reader.take(4 * n_elem)
        tensor = np.frombuffer(raw, dtype="<f4").astype(float).reshape(dims)
        if name in params:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        params[name] = tensor
    if reader.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - reader.pos} trailing bytes")
    try:
        validate_params(params, arch)
    except (ConfigError, NumericError) as exc:
        raise CheckpointError(f"{path}: tensors inconsistent with architecture ({exc})") from None
    if set(val_mse_tasks) != set(arch.tasks):
        raise CheckpointError(f"{path}: per-task MSEs do not cover tasks {arch.tasks}")
    if normalizer.n_tasks != arch.n_tasks:
        raise CheckpointError(f"{path}: normalizer covers {normalizer.n_tasks} tasks, arch has {arch.n_tasks}")
    return Checkpoint(
        params=params,
        epoch=epoch,
        val_mse=val_mse,
        val_mse_tasks=val_mse_tasks,
        normalizer=normalizer,
        arch=arch,
        train_seed=train_seed,
    )


def sgd_step(params: ParamDict, grads: ParamDict, lr: float) -> ParamDict:
    """Plain SGD: p' = p - lr * g for every tensor. Fixed learning rate,
    no momentum, no weight decay."""
    out: ParamDict = {}
    for name, p in params.items():
        updated = p - lr * grads[name]
        if not np.isfinite(updated).all():
            raise NumericError(f"non-finite parameter {name} after SGD step")
        out[name] = updated
    return out


def _iter_batches(indices: Sequence[int], batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def predict_indices(
    params: ParamDict,
    cfg: ArchConfig,
    graphs: Sequence[CrystalGraph],
    indices: Sequence[int],
    batch_size: int = 256,
) -> np.ndarray:
    """Normalized-space predictions for a subset of graphs, in index order."""
    chunks = [
        forward(batch_graphs([graphs[i] for i in chunk]), params, cfg)
        for chunk in _iter_batches(list(indices), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def validate(
    params: ParamDict,
    cfg: ArchConfig,
    graphs: Sequence[CrystalGraph],
    targets_norm: np.ndarray,
    indices: Sequence[int],
    weights: Sequence[float],
    batch_size: int = 256,
) -> Tuple[float, Dict[str, float]]:
    """Validation MSE in normalized space.

    Returns the ranking scalar plus unweighted per-task components. For a
    single task the scalar is the plain MSE; for multi-task it is the
    task-weighted sum, the same quantity the loss optimizes.
    """
    if len(indices) == 0:
        raise DataError("validation split is empty")
    preds = predict_indices(params, cfg, graphs, indices, batch_size)
    per_task = np.mean((preds - targets_norm[list(indices)]) ** 2, axis=0)
    tasks = {task: float(v) for task, v in zip(cfg.tasks, per_task)}
    if cfg.n_tasks == 1:
        scalar = float(per_task[0])
    else:
        scalar = float(np.dot(np.asarray(weights, dtype=float), per_task))
    return scalar, tasks


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mse: float
    val_mse_tasks: Dict[str, float]
    seconds: float


@dataclass
class TrainLog:
    tasks: Tuple[str, ...]
    rows: List[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        task_cols = [f"val_mse_{t}" for t in self.tasks] if len(self.tasks) > 1 else []
        header = ["epoch", "train_loss", "val_mse", *task_cols, "seconds"]
        lines = [",".join(header)]
        for row in self.rows:
            cells = [str(row.epoch), repr(float(row.train_loss)), repr(float(row.val_mse))]
            cells += [repr(float(row.val_mse_tasks[t])) for t in self.tasks] if task_cols else []
            cells.append(repr(float(row.seconds)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def checkpoint_path(directory: Path, epoch: int) -> Path:
    return directory / f"ckpt_{epoch:05d}.cgen"


def train_run(
    data: Dataset,
    splits: SplitIndices,
    arch: ArchConfig,
    tc: TrainConfig,
    graph_cfg: Optional[GraphConfig] = None,
    log_path: "str | Path | None" = None,
) -> TrainLog:
    """Train for ``tc.epochs`` epochs, writing one checkpoint per epoch.

    The epoch loop is sequential and fully deterministic: shuffles come
    from one PCG64 stream seeded with ``tc.seed``, the final partial
    batch is kept, and gradients for a batch are accumulated in one
    vectorized pass. Identical inputs give bit-identical checkpoints.
    """
    if tc.checkpoint_dir is None:
        raise ConfigError("TrainConfig.checkpoint_dir is required for train_run")
    if splits.n != len(data):
        raise DataError(f"splits cover {splits.n} samples but dataset has {len(data)}")
    graph_cfg = graph_cfg or GraphConfig()
    if graph_cfg.n_gauss != arch.d_edge:
        raise ConfigError(
            f"graph features have width {graph_cfg.n_gauss} but architecture expects d_edge={arch.d_edge}"
        )
    weights = resolve_task_weights(arch.tasks, tc.task_weights)
    targets = data.targets(arch.tasks)
    graphs = build_graphs(data.structures(), graph_cfg)

    normalizer = Normalizer.fit(targets[splits.train])
    targets_norm = normalizer.normalize(targets)

    ckpt_dir = Path(tc.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    params = init_model(arch)
    rng = np.random.default_rng(tc.seed)
    log = TrainLog(tasks=arch.tasks)
    train_idx = np.array(splits.train, dtype=int)
    weights_arr = np.array(weights)

    for epoch in range(1, tc.epochs + 1):
        started = time.perf_counter()
        order = train_idx[rng.permutation(len(train_idx))]
        loss_sum = 0.0
        for chunk in _iter_batches(order, tc.batch_size):
            batch = batch_graphs([graphs[i] for i in chunk])
            try:
                loss, grads = loss_and_gradients(
                    batch, params, arch, targets_norm[chunk], weights_arr
                )
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            params = sgd_step(params, grads, tc.lr)
            loss_sum += loss * len(chunk)
        train_loss = loss_sum / len(train_idx)

        val_mse, val_tasks = validate(
            params, arch, graphs, targets_norm, splits.val, weights, tc.batch_size
        )
        ckpt = Checkpoint(
            params=params,
            epoch=epoch,
            val_mse=val_mse,
            val_mse_tasks=val_tasks,
            normalizer=normalizer,
            arch=arch,
            train_seed=tc.seed,
        )
        save_checkpoint(ckpt, checkpoint_path(ckpt_dir, epoch))
        log.rows.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_loss,
                val_mse=val_mse,
                val_mse_tasks=val_tasks,
                seconds=time.perf_counter() - started,
            )
        )
        if log_path is not None:
            Path(log_path).write_text(log.to_csv(), encoding="utf-8")
    return log
