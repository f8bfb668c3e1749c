"""Periodic neighbor search and graph featurization.

A crystal becomes a directed multigraph: every atom within the cutoff of
atom i, counting periodic images, is one incoming edge. Edge features are
a Gaussian expansion of the pair distance; node features come from an
:class:`AtomFeaturizer` (one-hot atomic numbers by default). Edges are
sorted per source atom by (distance, neighbor index, image), and
optionally truncated to the ``max_neighbors`` closest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .elements import MAX_Z, symbol
from .errors import ConfigError, DataError
from .structio import CrystalStructure
from .util import ordered_map

ONE_HOT_SPAN = 100


@dataclass(frozen=True)
class GraphConfig:
    """Neighbor-search and feature-expansion settings.

    ``max_neighbors=None`` keeps every edge inside the cutoff; the default
    12 keeps the twelve closest per atom. ``atom_features`` optionally
    points at a JSON file mapping atomic numbers to custom node feature
    vectors; ``None`` selects the built-in one-hot encoding.
    """

    cutoff: float = 8.0
    max_neighbors: Optional[int] = 12
    gauss_step: float = 0.2
    gauss_width: float = 0.2
    atom_features: Optional[str] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cutoff) and self.cutoff > 0):
            raise ConfigError(f"cutoff must be positive, got {self.cutoff}")
        if self.max_neighbors is not None and self.max_neighbors < 1:
            raise ConfigError(f"max_neighbors must be >= 1 or None, got {self.max_neighbors}")
        if not (math.isfinite(self.gauss_step) and self.gauss_step > 0):
            raise ConfigError(f"gauss_step must be positive, got {self.gauss_step}")
        if not (math.isfinite(self.gauss_width) and self.gauss_width > 0):
            raise ConfigError(f"gauss_width must be positive, got {self.gauss_width}")

    @property
    def n_gauss(self) -> int:
        """Number of expansion centers: floor(cutoff / step) + 1."""
        # floor() on the true quotient, not float //: 8.0 // 0.2 == 39.0
        # while floor(8.0 / 0.2) == 40.
        return int(math.floor(self.cutoff / self.gauss_step)) + 1


@dataclass
class Neighbor:
    """One directed edge: ``src`` receives from ``dst``'s periodic image."""

    src: int
    dst: int
    image: Tuple[int, int, int]
    distance: float


def _cell_heights(lattice: np.ndarray) -> np.ndarray:
    """Perpendicular distance between opposite cell faces, per axis.

    Height along axis k is volume / |a_j x a_l| with (j, l) the other two
    axes; it bounds how many image repeats can reach a given cutoff.
    """
    volume = abs(float(np.linalg.det(lattice)))
    heights = np.empty(3)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        cross = np.cross(lattice[j], lattice[l])
        heights[k] = volume / float(np.linalg.norm(cross))
    return heights


def find_neighbors(
    structure: CrystalStructure, cutoff: float, max_neighbors: Optional[int] = None
) -> List[List[Neighbor]]:
    """All neighbors within ``cutoff`` of each atom, over periodic images.

    Returns one list per atom, sorted by (distance, neighbor index,
    image) and truncated to ``max_neighbors`` when given. The self-pair
    at zero distance is excluded; images of the same atom at nonzero
    distance count. Raises :class:`DataError` when an atom ends up with
    no neighbors at all.
    """
    if not (math.isfinite(cutoff) and cutoff > 0):
        raise ConfigError(f"cutoff must be positive, got {cutoff}")
    lattice = structure.lattice
    frac = structure.frac_coords - np.floor(structure.frac_coords)
    cart = frac @ lattice
    n = structure.n_sites

    heights = _cell_heights(lattice)
    reps = [int(math.ceil(cutoff / h)) + 1 for h in heights]
    offsets = np.array(
        [
            (ia, ib, ic)
            for ia in range(-reps[0], reps[0] + 1)
            for ib in range(-reps[1], reps[1] + 1)
            for ic in range(-reps[2], reps[2] + 1)
        ],
        dtype=int,
    )
    shifts = offsets.astype(float) @ lattice  # (n_images, 3)

    # positions of every periodic image of every atom: (n, n_images, 3)
    images = cart[:, None, :] + shifts[None, :, :]
    result: List[List[Neighbor]] = []
    for i in range(n):
        delta = images - cart[i]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", delta, delta))
        keep = (dist <= cutoff) & (dist > 1e-12)
        pairs = [
            (float(dist[j, m]), j, tuple(int(x) for x in offsets[m]))
            for j, m in zip(*np.nonzero(keep))
        ]
        pairs.sort()
        if max_neighbors is not None:
            pairs = pairs[:max_neighbors]
        if not pairs:
            raise DataError(
                f"atom {i} ({symbol(structure.species[i])}) in structure "
                f"{structure.id!r} has no neighbors within cutoff {cutoff}"
            )
        result.append([Neighbor(src=i, dst=j, image=im, distance=d) for d, j, im in pairs])
    return result


def gaussian_expand(distances: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    """Expand distances onto Gaussians centered at k * step, k = 0..n-1.

    Component k is exp(-(d - k*step)^2 / width^2). Output shape is
    ``distances.shape + (cfg.n_gauss,)``.
    """
    distances = np.asarray(distances, dtype=float)
    centers = np.arange(cfg.n_gauss) * cfg.gauss_step
    diff = distances[..., None] - centers
    return np.exp(-(diff ** 2) / (cfg.gauss_width ** 2))


@dataclass
class AtomFeaturizer:
    """Initial node encoding: a table from atomic number to feature vector."""

    table: Dict[int, np.ndarray]

    def __post_init__(self) -> None:
        if not self.table:
            raise DataError("atom feature table is empty")
        widths = {v.shape for v in self.table.values()}
        if len(widths) != 1 or len(next(iter(widths))) != 1:
            raise DataError("atom feature vectors must be 1-d and share one length")
        for z, vec in self.table.items():
            if not np.all(np.isfinite(vec)):
                raise DataError(f"atom feature vector for Z={z} has non-finite entries")

    @property
    def d_init(self) -> int:
        return next(iter(self.table.values())).shape[0]

    def featurize(self, z: int) -> np.ndarray:
        try:
            return self.table[z]
        except KeyError:
            raise DataError(f"no atom features for atomic number {z}") from None


def one_hot_featurizer() -> AtomFeaturizer:
    """One-hot encoding over atomic numbers 1..100 (vector length 100)."""
    return AtomFeaturizer(table={z: np.eye(ONE_HOT_SPAN)[z - 1] for z in range(1, ONE_HOT_SPAN + 1)})


def load_atom_features(path: str) -> AtomFeaturizer:
    """Read a JSON map of atomic-number strings to numeric feature arrays."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read atom feature file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"atom feature file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"atom feature file {path} must hold a JSON object")
    table: Dict[int, np.ndarray] = {}
    for key, value in raw.items():
        try:
            z = int(key)
        except ValueError:
            raise DataError(f"atom feature key {key!r} is not an atomic number") from None
        if not 1 <= z <= MAX_Z:
            raise DataError(f"atom feature key {z} out of range 1..{MAX_Z}")
        table[z] = np.asarray(value, dtype=float)
    return AtomFeaturizer(table=table)


def resolve_featurizer(cfg: GraphConfig) -> AtomFeaturizer:
    """The featurizer a config selects: a feature file if set, else one-hot."""
    if cfg.atom_features is None:
        return one_hot_featurizer()
    return load_atom_features(cfg.atom_features)


@dataclass
class CrystalGraph:
    """Featurized crystal ready for the network.

    ``edge_src``/``edge_dst`` hold the flat edge list (directed, source
    receives); ``node_feat`` is (n_atoms, d_init), ``edge_feat`` is
    (n_edges, n_gauss).
    """

    node_feat: np.ndarray
    edge_feat: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    n_atoms: int
    id: str = ""

    def __post_init__(self) -> None:
        if self.edge_src.shape != self.edge_dst.shape:
            raise DataError("edge_src and edge_dst must have the same shape")
        if self.edge_feat.shape[0] != self.edge_src.shape[0]:
            raise DataError("edge_feat row count must match edge count")
        if self.node_feat.shape[0] != self.n_atoms:
            raise DataError("node_feat row count must match n_atoms")


def build_graph(
    structure: CrystalStructure,
    cfg: GraphConfig,
    featurizer: Optional[AtomFeaturizer] = None,
) -> CrystalGraph:
    """Run neighbor search and featurization for one structure."""
    if featurizer is None:
        featurizer = resolve_featurizer(cfg)
    neighbor_lists = find_neighbors(structure, cfg.cutoff, cfg.max_neighbors)
    src: List[int] = []
    dst: List[int] = []
    dists: List[float] = []
    for neighbors in neighbor_lists:
        for nb in neighbors:
            src.append(nb.src)
            dst.append(nb.dst)
            dists.append(nb.distance)
    return CrystalGraph(
        node_feat=np.stack([featurizer.featurize(z) for z in structure.species]),
        edge_feat=gaussian_expand(np.array(dists), cfg),
        edge_src=np.array(src, dtype=int),
        edge_dst=np.array(dst, dtype=int),
        n_atoms=structure.n_sites,
        id=structure.id,
    )


def build_graphs(structures: Sequence[CrystalStructure], cfg: GraphConfig) -> List[CrystalGraph]:
    """Featurize many structures; parallel across CRYSTENS_THREADS workers."""
    featurizer = resolve_featurizer(cfg)
    return ordered_map(lambda s: build_graph(s, cfg, featurizer), structures)
