"""Crystal-structure parsing, dataset loading, and split generation.

Supported inputs:

* a JSON structure format (3x3 lattice matrix, species, fractional
  coordinates, id),
* a small CIF subset: P1 cells described by the six cell parameters plus
  one atom-site loop (symmetry operations are ignored, structures must be
  pre-expanded),
* dataset directories indexed by ``id_prop.csv`` with one structure file
  per id,
* Materials-Project-style JSON dumps, converted to the directory layout
  by :func:`import_mp_dump`.

Splits use NumPy's PCG64 generator (``numpy.random.default_rng``), a
named, portable PRNG, so identical ``(n, fractions, seed)`` always yields
identical index lists.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .elements import atomic_number, symbol
from .errors import ConfigError, DataError
from .util import ordered_map

log = logging.getLogger(__name__)

PROPERTY_NAMES = ("formation_energy", "band_gap", "density")


@dataclass(eq=False)
class CrystalStructure:
    """A periodic crystal: lattice rows in Angstrom plus fractional sites.

    Fractional coordinates outside [0, 1) are allowed; consumers wrap them
    into the home cell.
    """

    lattice: np.ndarray
    species: Tuple[int, ...]
    frac_coords: np.ndarray
    id: str = ""

    def __post_init__(self) -> None:
        try:
            self.lattice = np.array(self.lattice, dtype=float)
            self.frac_coords = np.atleast_2d(np.array(self.frac_coords, dtype=float))
        except (TypeError, ValueError) as exc:
            raise DataError(f"non-numeric lattice or coordinates: {exc}") from None
        self.species = tuple(atomic_number(z) for z in self.species)
        if not self.species:
            raise DataError("structure has no sites")
        if self.lattice.shape != (3, 3):
            raise DataError(f"lattice must be 3x3, got shape {self.lattice.shape}")
        if not np.isfinite(self.lattice).all():
            raise DataError("lattice contains non-finite entries")
        if self.frac_coords.shape != (len(self.species), 3):
            raise DataError(
                f"frac_coords shape {self.frac_coords.shape} does not match "
                f"{len(self.species)} sites"
            )
        if not np.isfinite(self.frac_coords).all():
            raise DataError("fractional coordinates contain non-finite entries")
        det = float(np.linalg.det(self.lattice))
        if det <= 1e-12:
            raise DataError(f"lattice determinant must be positive, got {det:g}")

    @property
    def n_sites(self) -> int:
        return len(self.species)

    @property
    def volume(self) -> float:
        """Cell volume in cubic Angstrom."""
        return float(np.linalg.det(self.lattice))


def parse_structure_json(text: str) -> CrystalStructure:
    """Parse the JSON structure format.

    Expects an object with keys ``lattice`` (3x3), ``species`` (element
    symbols or atomic numbers), ``frac_coords`` (Nx3) and ``id``.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed structure JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise DataError("structure JSON must be an object")
    missing = [k for k in ("lattice", "species", "frac_coords", "id") if k not in obj]
    if missing:
        raise DataError(f"structure JSON missing keys: {', '.join(missing)}")
    species = obj["species"]
    coords = obj["frac_coords"]
    if not isinstance(species, list) or not isinstance(coords, list):
        raise DataError("species and frac_coords must be arrays")
    if len(species) != len(coords):
        raise DataError(
            f"species ({len(species)}) and frac_coords ({len(coords)}) lengths differ"
        )
    return CrystalStructure(
        lattice=obj["lattice"],
        species=tuple(atomic_number(s) for s in species),
        frac_coords=coords,
        id=str(obj["id"]),
    )


def structure_to_json(s: CrystalStructure) -> str:
    """Serialize to the JSON structure format; exact float round-trip."""
    obj = {
        "lattice": [[float(x) for x in row] for row in s.lattice],
        "species": [symbol(z) for z in s.species],
        "frac_coords": [[float(x) for x in row] for row in s.frac_coords],
        "id": s.id,
    }
    return json.dumps(obj)


def lattice_from_parameters(
    a: float, b: float, c: float, alpha: float, beta: float, gamma: float
) -> np.ndarray:
    """Lattice row matrix from cell lengths (Angstrom) and angles (degrees).

    Standard crystallographic frame: a along x, b in the xy-plane, alpha
    the angle between b and c, beta between a and c, gamma between a and b.
    """
    for name, val in (("a", a), ("b", b), ("c", c)):
        if not (math.isfinite(val) and val > 0):
            raise DataError(f"cell length {name} must be positive, got {val}")
    for name, val in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not (math.isfinite(val) and 0.0 < val < 180.0):
            raise DataError(f"cell angle {name} must be in (0, 180), got {val}")
    al, be, ga = (math.radians(v) for v in (alpha, beta, gamma))
    cos_al, cos_be, cos_ga = math.cos(al), math.cos(be), math.cos(ga)
    sin_ga = math.sin(ga)
    bx, by = b * cos_ga, b * sin_ga
    cx = c * cos_be
    cy = c * (cos_al - cos_be * cos_ga) / sin_ga
    cz_sq = c * c - cx * cx - cy * cy
    if cz_sq <= 0.0:
        raise DataError("cell parameters do not define a positive-volume cell")
    return np.array([[a, 0.0, 0.0], [bx, by, 0.0], [cx, cy, math.sqrt(cz_sq)]])


_CELL_TAGS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)

_SITE_TAGS = (
    "_atom_site_type_symbol",
    "_atom_site_fract_x",
    "_atom_site_fract_y",
    "_atom_site_fract_z",
)


def _cif_number(token: str, tag: str) -> float:
    # CIF numbers may carry a parenthesised standard uncertainty: 5.64(2)
    value = token.split("(", 1)[0]
    try:
        return float(value)
    except ValueError:
        raise DataError(f"non-numeric CIF value {token!r} for {tag}") from None


def parse_cif(text: str) -> CrystalStructure:
    """Parse the supported CIF subset into a structure.

    Requires the six cell-parameter tags and one loop with
    ``_atom_site_type_symbol`` and ``_atom_site_fract_x/y/z`` columns.
    Cells are treated as P1: symmetry-operation blocks are ignored and no
    equivalent positions are generated.
    """
    scalars: dict = {}
    loops: List[Tuple[List[str], List[List[str]]]] = []
    block_id = ""

    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        low = line.lower()
        if low.startswith("data_"):
            if not block_id:
                block_id = line[5:].strip()
            continue
        if low == "loop_":
            headers: List[str] = []
            while i < len(lines) and lines[i].strip().startswith("_"):
                headers.append(lines[i].strip().split()[0])
                i += 1
            rows: List[List[str]] = []
            while i < len(lines):
                nxt = lines[i].strip()
                if (
                    not nxt
                    or nxt.startswith(("_", "#"))
                    or nxt.lower() == "loop_"
                    or nxt.lower().startswith("data_")
                ):
                    break
                rows.append(nxt.split())
                i += 1
            loops.append((headers, rows))
            continue
        if line.startswith("_"):
            parts = line.split(None, 1)
            if len(parts) == 2:
                scalars[parts[0]] = parts[1].strip().strip("'\"")
            continue
        # free text (e.g. symmetry operator listings outside loops): ignored

    missing = [tag for tag in _CELL_TAGS if tag not in scalars]
    if missing:
        raise DataError(f"CIF missing required tags: {', '.join(missing)}")
    a, b, c, alpha, beta, gamma = (_cif_number(scalars[t], t) for t in _CELL_TAGS)
    lattice = lattice_from_parameters(a, b, c, alpha, beta, gamma)

    site_loop = None
    for headers, rows in loops:
        if "_atom_site_fract_x" in headers:
            site_loop = (headers, rows)
            break
    if site_loop is None:
        raise DataError("CIF has no atom-site loop")
    headers, rows = site_loop
    missing = [tag for tag in _SITE_TAGS if tag not in headers]
    if missing:
        raise DataError(f"CIF atom loop missing columns: {', '.join(missing)}")
    if not rows:
        raise DataError("CIF atom loop is empty")
    cols = {tag: headers.index(tag) for tag in _SITE_TAGS}

    species: List[int] = []
    coords: List[List[float]] = []
    for row in rows:
        if len(row) != len(headers):
            raise DataError(f"CIF atom row has {len(row)} fields, expected {len(headers)}")
        species.append(atomic_number(row[cols["_atom_site_type_symbol"]]))
        coords.append(
            [
                _cif_number(row[cols[tag]], tag)
                for tag in ("_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z")
            ]
        )
    return CrystalStructure(lattice=lattice, species=tuple(species), frac_coords=coords, id=block_id)


@dataclass
class PropertyRecord:
    """Target values for one material; absent properties stay ``None``."""

    id: str
    formation_energy: Optional[float] = None
    band_gap: Optional[float] = None
    density: Optional[float] = None

    def __post_init__(self) -> None:
        if self.band_gap is not None and self.band_gap < 0:
            raise DataError(f"band_gap must be >= 0, got {self.band_gap}")
        if self.density is not None and self.density <= 0:
            raise DataError(f"density must be > 0, got {self.density}")

    def get(self, name: str) -> Optional[float]:
        if name not in PROPERTY_NAMES:
            raise ConfigError(f"unknown property {name!r}; expected one of {PROPERTY_NAMES}")
        return getattr(self, name)


@dataclass
class Dataset:
    """Parsed structures paired with their property records, in CSV order."""

    entries: List[Tuple[CrystalStructure, PropertyRecord]]
    source_dir: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> List[str]:
        return [rec.id for _, rec in self.entries]

    def structures(self) -> List[CrystalStructure]:
        return [s for s, _ in self.entries]

    def targets(self, tasks: Sequence[str]) -> np.ndarray:
        """Target matrix (n_entries, n_tasks); errors if any value is absent."""
        out = np.empty((len(self.entries), len(tasks)))
        for row, (_, rec) in enumerate(self.entries):
            for col, task in enumerate(tasks):
                value = rec.get(task)
                if value is None:
                    raise DataError(f"entry {rec.id!r} has no {task} value")
                out[row, col] = value
        return out


def load_dataset(directory: "str | Path") -> Dataset:
    """Load a dataset directory indexed by ``id_prop.csv``.

    The CSV needs a header starting with ``id`` followed by a subset of
    {formation_energy, band_gap, density}; each id must have a matching
    ``<id>.json`` or ``<id>.cif`` structure file. Entries keep CSV order.
    """
    directory = Path(directory)
    csv_path = directory / "id_prop.csv"
    if not csv_path.is_file():
        raise DataError(f"missing dataset index {csv_path}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if not rows:
        raise DataError(f"{csv_path} is empty")
    header = [cell.strip() for cell in rows[0]]
    if not header or header[0] != "id":
        raise DataError("id_prop.csv header must start with 'id'")
    prop_cols = header[1:]
    unknown = [p for p in prop_cols if p not in PROPERTY_NAMES]
    if unknown:
        raise DataError(f"unknown property columns: {', '.join(unknown)}")
    if len(set(prop_cols)) != len(prop_cols):
        raise DataError("duplicate property columns in id_prop.csv")

    records: List[PropertyRecord] = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"id_prop.csv line {lineno}: expected {len(header)} cells, got {len(row)}")
        rid = row[0].strip()
        if not rid:
            raise DataError(f"id_prop.csv line {lineno}: empty id")
        if rid in seen:
            raise DataError(f"duplicate id {rid!r} in id_prop.csv")
        seen.add(rid)
        values = {}
        for name, cell in zip(prop_cols, row[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                values[name] = float(cell)
            except ValueError:
                raise DataError(f"id {rid!r}: non-numeric {name} value {cell!r}") from None
        try:
            records.append(PropertyRecord(id=rid, **values))
        except DataError as exc:
            raise DataError(f"id {rid!r}: {exc}") from None

    def _load_structure(rec: PropertyRecord) -> CrystalStructure:
        for suffix, parser in ((".json", parse_structure_json), (".cif", parse_cif)):
            path = directory / f"{rec.id}{suffix}"
            if path.is_file():
                try:
                    parsed = parser(path.read_text(encoding="utf-8"))
                except DataError as exc:
                    raise DataError(f"structure {rec.id!r}: {exc}") from None
                return replace(parsed, id=rec.id)
        raise DataError(f"no structure file for id {rec.id!r} ({rec.id}.json or {rec.id}.cif)")

    structures = ordered_map(_load_structure, records)
    return Dataset(entries=list(zip(structures, records)), source_dir=directory)


def _coerce_dump_record(rec: object, index: int) -> Tuple[str, dict, CrystalStructure]:
    ctx = f"dump record {index}"
    if not isinstance(rec, dict):
        raise DataError(f"{ctx}: not a JSON object")
    rid = rec.get("material_id") or rec.get("id")
    if not rid:
        raise DataError(f"{ctx}: missing material_id/id")
    rid = str(rid)
    if "/" in rid or "\\" in rid or rid in (".", ".."):
        raise DataError(f"{ctx}: id {rid!r} is not filename-safe")

    props = {}
    aliases = {
        "formation_energy": ("formation_energy_per_atom", "formation_energy"),
        "band_gap": ("band_gap",),
        "density": ("density",),
    }
    try:
        for name, keys in aliases.items():
            value = None
            for key in keys:
                if rec.get(key) is not None:
                    value = float(rec[key])
                    break
            props[name] = value

        st = rec.get("structure")
        if not isinstance(st, dict):
            raise DataError("missing structure object")
        lattice = st.get("lattice")
        if isinstance(lattice, dict):
            lattice = lattice.get("matrix")
        sites = st.get("sites")
        if lattice is None or not sites:
            raise DataError("structure needs a lattice and at least one site")
        species: List[int] = []
        coords: List[object] = []
        for site in sites:
            sp = site.get("species")
            if isinstance(sp, str):
                sym = sp
            elif isinstance(sp, list) and sp:
                if len(sp) > 1 or abs(float(sp[0].get("occu", 1.0)) - 1.0) > 1e-9:
                    raise DataError("disordered/partial-occupancy sites are unsupported")
                sym = sp[0]["element"]
            else:
                raise DataError("site has no species")
            species.append(atomic_number(sym))
            xyz = site.get("abc", site.get("frac_coords"))
            if xyz is None:
                raise DataError("site has no fractional coordinates")
            coords.append(xyz)
        structure = CrystalStructure(lattice=lattice, species=tuple(species), frac_coords=coords, id=rid)
        # validates band_gap/density sign constraints
        PropertyRecord(id=rid, **{k: v for k, v in props.items() if v is not None})
    except DataError as exc:
        raise DataError(f"{ctx} ({rid}): {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{ctx} ({rid}): malformed record ({exc})") from None
    return rid, props, structure


def import_mp_dump(json_path: "str | Path", out_dir: "str | Path", permissive: bool = False) -> int:
    """Convert a Materials-Project-style JSON dump into a dataset directory.

    The dump is a JSON array; each record carries an id, a structure
    (lattice matrix plus sites with fractional coordinates) and the three
    property values. Records missing any property are skipped, or written
    with empty cells when ``permissive`` is set. Returns the number of
    records written.
    """
    json_path = Path(json_path)
    out_dir = Path(out_dir)
    try:
        payload = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed dump JSON in {json_path}: {exc}") from None
    if not isinstance(payload, list):
        raise DataError("dump must be a JSON array of records")

    kept: List[Tuple[str, dict, CrystalStructure]] = []
    skipped = 0
    seen = set()
    for index, rec in enumerate(payload):
        rid, props, structure = _coerce_dump_record(rec, index)
        if rid in seen:
            raise DataError(f"duplicate id {rid!r} in dump")
        seen.add(rid)
        if not permissive and any(props[name] is None for name in PROPERTY_NAMES):
            skipped += 1
            continue
        kept.append((rid, props, structure))

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["id," + ",".join(PROPERTY_NAMES)]
    for rid, props, structure in kept:
        (out_dir / f"{rid}.json").write_text(structure_to_json(structure), encoding="utf-8")
        cells = ["" if props[name] is None else repr(float(props[name])) for name in PROPERTY_NAMES]
        lines.append(",".join([rid] + cells))
    (out_dir / "id_prop.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if skipped:
        log.warning("skipped %d of %d dump records with missing properties", skipped, len(payload))
    return len(kept)


@dataclass
class SplitIndices:
    """Disjoint train/val/test index lists covering 0..n-1 exactly."""

    train: List[int]
    val: List[int]
    test: List[int]
    seed: int
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    @property
    def n(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def indices(self, name: str) -> List[int]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "seed": self.seed,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitIndices":
        try:
            return cls(
                train=[int(i) for i in obj["train"]],
                val=[int(i) for i in obj["val"]],
                test=[int(i) for i in obj["test"]],
                seed=int(obj["seed"]),
                fractions=tuple(float(f) for f in obj["fractions"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed split file: {exc}") from None

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: "str | Path") -> "SplitIndices":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"missing split file {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed split file {path}: {exc}") from None
        return cls.from_dict(obj)


def split_dataset(
    n: int,
    fractions: Iterable[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitIndices:
    """Seeded random partition of 0..n-1 into train/val/test.

    Train and val sizes round half-up to the nearest integer; test takes
    the remainder. Identical arguments always give identical lists.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError(f"need exactly 3 split fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    n_train = int(math.floor(fractions[0] * n + 0.5))
    n_val = int(math.floor(fractions[1] * n + 0.5))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(
            f"n={n} with fractions {fractions} leaves an empty split "
            f"(sizes {n_train}/{n_val}/{n_test})"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndices(
        train=[int(i) for i in perm[:n_train]],
        val=[int(i) for i in perm[n_train : n_train + n_val]],
        test=[int(i) for i in perm[n_train + n_val :]],
        seed=seed,
        fractions=fractions,
    )
