"""Acceptance suite: ten release-gating criteria, one test per criterion.

Run as ``pytest tests/test_acceptance.py -v`` for one PASS/FAIL line per
criterion (add ``-s`` to also see the measured numbers). Tolerances and
runtime budgets are fixed here on purpose; loosening them is a release
decision, not a test fix.

The toy benchmark (criteria 7 and 9) trains twice from the same lock
file through the real CLI, so it also exercises config resolution, run
layout, and every report writer end to end.
"""

import hashlib
import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import random_structure
from oracles import brute_force_neighbors, elementwise_mean_params, mean_prediction

from crystens.cgraph import GraphConfig, build_graph, build_graphs, find_neighbors
from crystens.cli import main
from crystens.ensemble import (
    EnsembleSpec,
    average_params,
    load_members,
    member_predictions,
    predict_ensemble,
    rank_checkpoints,
)
from crystens.evalrep import improvement_pct
from crystens.net import ArchConfig, batch_graphs, fd_gradients, forward, init_model, loss_and_gradients, max_gradient_error
from crystens.structio import (
    CrystalStructure,
    lattice_from_parameters,
    parse_cif,
    parse_structure_json,
    structure_to_json,
)
from crystens.train import Checkpoint, Normalizer, checkpoint_path, load_checkpoint, save_checkpoint

GCFG = GraphConfig(cutoff=4.0, max_neighbors=8)
DATA = __file__.rsplit("/", 1)[0] + "/data"


def arch_for(tasks, d_atom=8, d_hidden=12, n_conv=2, seed=0):
    return ArchConfig(
        d_init=100, d_atom=d_atom, d_hidden=d_hidden, n_conv=n_conv,
        d_edge=GCFG.n_gauss, tasks=tasks, seed=seed,
    )


def synthetic_run(directory, count, tasks=("formation_energy",), normalizer=None):
    """Checkpoints with independent random weights; val MSE decorrelated
    from epoch so the ranking is non-trivial."""
    directory.mkdir(parents=True, exist_ok=True)
    if normalizer is None:
        normalizer = Normalizer(
            mean=tuple(0.5 for _ in tasks), std=tuple(2.0 for _ in tasks)
        )
    for e in range(1, count + 1):
        arch = arch_for(tasks, seed=1000 + e)
        ckpt = Checkpoint(
            params=init_model(arch),
            epoch=e,
            val_mse=((e * 7) % count) + 0.5,
            val_mse_tasks={t: 1.0 for t in tasks},
            normalizer=normalizer,
            arch=arch_for(tasks),
            train_seed=0,
        )
        save_checkpoint(ckpt, checkpoint_path(directory, e))
    return rank_checkpoints(directory)


@pytest.fixture(scope="module")
def eval_graphs():
    rng = np.random.default_rng(1234)
    graphs = []
    while len(graphs) < 8:
        try:
            graphs.append(build_graph(random_structure(rng), GCFG))
        except Exception:
            # lone atom in a roomy cell; draw another structure
            continue
    return graphs


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Criterion 7/9 workhorse: generate the frozen toy dataset, train
    twice from one lock file, post-process both runs identically."""
    root = tmp_path_factory.mktemp("bench")
    data = root / "data"
    assert main(["toy", "--out", str(data), "--n", "300", "--seed", "42"]) == 0
    seconds = {}
    for name in ("run1", "run2"):
        run = root / name
        start = time.monotonic()
        if name == "run1":
            rc = main([
                "train", "--data", str(data), "--out", str(run),
                "--epochs", "60", "--batch-size", "32", "--lr", "0.01",
                "--d-atom", "16", "--d-hidden", "32", "--n-conv", "3",
                "--seed", "42",
            ])
        else:
            rc = main(["train", "--config", str(root / "run1" / "config.lock.json"), "--out", str(run)])
        assert rc == 0
        assert main(["ensemble", str(run), "--top-n", "20", "--split", "test"]) == 0
        assert main(["bands", str(run), "--top-n", "20"]) == 0
        assert main(["sweep", str(run), "--max-n", "20"]) == 0
        seconds[name] = time.monotonic() - start
    return SimpleNamespace(run1=root / "run1", run2=root / "run2", seconds=seconds)


def test_criterion_01_gradient_correctness():
    start = time.monotonic()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        arch = arch_for(
            tasks=("formation_energy", "band_gap", "density") if seed % 3 == 0 else ("formation_energy",),
            d_atom=int(rng.integers(4, 9)),
            n_conv=int(rng.integers(1, 3)),
            seed=seed,
        )
        graphs = [random_structure(rng) for _ in range(2)]
        batch = batch_graphs(build_graphs(graphs, GCFG))
        params = init_model(arch)
        targets = rng.normal(size=(2, arch.n_tasks))
        weights = np.ones(arch.n_tasks)
        _, grads = loss_and_gradients(batch, params, arch, targets, weights)
        numeric = fd_gradients(batch, params, arch, targets, weights, step=1e-4)
        worst = max(worst, max_gradient_error(grads, numeric))
    elapsed = time.monotonic() - start
    print(f"criterion 1: worst relative gradient error {worst:.3g} in {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


def test_criterion_02_ensemble_of_one_identity(tmp_path, eval_graphs):
    start = time.monotonic()
    for tasks in (("formation_energy",), ("formation_energy", "band_gap", "density")):
        run_dir = tmp_path / f"tasks{len(tasks)}"
        ranked = synthetic_run(run_dir, 6, tasks)
        best = load_members(ranked, 1)[0]
        direct = member_predictions([best], eval_graphs)[0]
        for strategy in ("prediction", "model"):
            out = predict_ensemble(ranked, EnsembleSpec(n=1, strategy=strategy), eval_graphs)
            assert np.array_equal(out.y_norm, direct), (tasks, strategy)
    elapsed = time.monotonic() - start
    print(f"criterion 2: exact in both strategies and task modes, {elapsed:.2f}s")
    assert elapsed < 5


def test_criterion_03_mean_exactness(tmp_path, eval_graphs):
    start = time.monotonic()
    ranked = synthetic_run(tmp_path, 50)
    for n in (1, 2, 5, 20, 50):
        members = load_members(ranked, n)
        out = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="prediction"), eval_graphs)
        want = mean_prediction(member_predictions(members, eval_graphs))
        assert np.allclose(out.y_norm, want, rtol=1e-9, atol=0), n
        got = average_params(ranked, n)
        oracle = elementwise_mean_params([m.params for m in members])
        for name in oracle:
            assert np.allclose(got[name], oracle[name], rtol=1e-6, atol=1e-12), (n, name)
    elapsed = time.monotonic() - start
    print(f"criterion 3: n in (1,2,5,20,50) exact in {elapsed:.1f}s")
    assert elapsed < 10


def test_criterion_04_linear_commutation(tmp_path, eval_graphs):
    start = time.monotonic()
    arch = arch_for(("formation_energy",))
    shared = init_model(arch)
    rng = np.random.default_rng(77)
    norm = Normalizer(mean=(0.0,), std=(1.0,))
    for e in range(1, 6):
        params = {k: v.copy() for k, v in shared.items()}
        params["head_W_formation_energy"] = rng.normal(size=(12, 1))
        params["head_b_formation_energy"] = np.array(rng.normal())
        ckpt = Checkpoint(
            params=params, epoch=e, val_mse=float(e),
            val_mse_tasks={"formation_energy": float(e)},
            normalizer=norm, arch=arch_for(("formation_energy",)), train_seed=0,
        )
        save_checkpoint(ckpt, checkpoint_path(tmp_path, e))
    ranked = rank_checkpoints(tmp_path)
    for n in (2, 5):
        p = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="prediction"), eval_graphs)
        m = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="model"), eval_graphs)
        rel = np.max(np.abs(p.y_norm - m.y_norm) / np.maximum(np.abs(p.y_norm), 1e-12))
        assert rel < 1e-9, n
    elapsed = time.monotonic() - start
    print(f"criterion 4: strategies agree within 1e-9 in {elapsed:.2f}s")
    assert elapsed < 5


def test_criterion_05_neighbor_search_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    checked = 0
    for case in range(50):
        if case % 5 == 0:
            # deliberately skewed triclinic cell, heights kept above 1 A
            while True:
                lengths = rng.uniform(2.5, 6.0, size=3)
                angles = rng.uniform(50.0, 130.0, size=3)
                try:
                    lattice = lattice_from_parameters(*lengths, *angles)
                except Exception:
                    continue
                vol = abs(np.linalg.det(lattice))
                heights = [vol / np.linalg.norm(np.cross(lattice[(k + 1) % 3], lattice[(k + 2) % 3])) for k in range(3)]
                if min(heights) >= 1.0:
                    break
            n_atoms = int(rng.integers(1, 7))
            structure = CrystalStructure(
                lattice=lattice,
                species=tuple(int(z) for z in rng.integers(1, 21, size=n_atoms)),
                frac_coords=rng.uniform(0.0, 1.0, size=(n_atoms, 3)),
            )
        else:
            structure = random_structure(rng)
        cutoff = float(rng.uniform(2.5, 5.0))
        try:
            got = find_neighbors(structure, cutoff)
        except Exception:
            # a cell/cutoff combination can leave an atom isolated; the
            # oracle must agree that there was nothing to find
            oracle = brute_force_neighbors(structure, cutoff)
            assert any(len(lst) == 0 for lst in oracle)
            continue
        oracle = brute_force_neighbors(structure, cutoff)
        for i in range(len(structure.species)):
            mine = sorted((n.dst, n.image, n.distance) for n in got[i])
            ref = sorted((j, image, d) for d, j, image in oracle[i])
            assert len(mine) == len(ref), (case, i)
            for (j1, im1, d1), (j2, im2, d2) in zip(mine, ref):
                assert j1 == j2 and im1 == im2, (case, i)
                assert abs(d1 - d2) <= 1e-9, (case, i)
            checked += len(mine)
    elapsed = time.monotonic() - start
    print(f"criterion 5: {checked} edges matched over 50 lattices in {elapsed:.1f}s")
    assert elapsed < 60


def test_criterion_06_invariance_suite():
    start = time.monotonic()
    arch = arch_for(("formation_energy", "band_gap"))
    params = init_model(arch)
    rng = np.random.default_rng(55)
    for _ in range(20):
        structure = random_structure(rng)
        n = len(structure.species)
        graph = build_graph(structure, GCFG)
        base = forward(batch_graphs([graph]), params, arch)

        perm = rng.permutation(n)
        permuted = CrystalStructure(
            lattice=structure.lattice.copy(),
            species=tuple(structure.species[i] for i in perm),
            frac_coords=structure.frac_coords[perm],
        )
        out = forward(batch_graphs([build_graph(permuted, GCFG)]), params, arch)
        assert np.max(np.abs(out - base)) < 1e-10

        shifted = CrystalStructure(
            lattice=structure.lattice.copy(),
            species=structure.species,
            frac_coords=structure.frac_coords + rng.integers(-3, 4, size=(n, 3)),
        )
        before = find_neighbors(structure, GCFG.cutoff, GCFG.max_neighbors)
        after = find_neighbors(shifted, GCFG.cutoff, GCFG.max_neighbors)
        for i in range(n):
            d1 = sorted(nb.distance for nb in before[i])
            d2 = sorted(nb.distance for nb in after[i])
            assert len(d1) == len(d2)
            assert max((abs(a - b) for a, b in zip(d1, d2)), default=0.0) < 1e-9
    elapsed = time.monotonic() - start
    print(f"criterion 6: 20 structures invariant in {elapsed:.1f}s")
    assert elapsed < 30


def test_criterion_07_toy_benchmark(benchmark):
    log = (benchmark.run1 / "train_log.csv").read_text().splitlines()
    header = log[0].split(",")
    val_col = header.index("val_mse")
    first = float(log[1].split(",")[val_col])
    last = float(log[-1].split(",")[val_col])
    summary = json.loads(
        (benchmark.run1 / "reports" / "summary_prediction_n20.json").read_text()
    )["formation_energy"]
    print(
        f"criterion 7: val MSE {first:.6g} -> {last:.6g} (ratio {last / first:.4f}), "
        f"ensemble MAE {summary['ensemble_mae']:.4f} vs best {summary['best_val_mae']:.4f}, "
        f"{benchmark.seconds['run1']:.0f}s"
    )
    assert last < 0.5 * first
    assert summary["ensemble_mae"] <= summary["best_val_mae"] * 1.02
    assert benchmark.seconds["run1"] < 300


def test_criterion_08_improvement_percentage():
    start = time.monotonic()
    # published pairs: (baseline, ensemble, printed %, tolerance)
    table = [
        (0.058, 0.054, 6.90, 0.005),
        (0.293, 0.278, 5.12, 0.005),
        (0.134, 0.128, 4.47, 0.01),
        (0.145, 0.146, -0.69, 0.005),
        (0.082, 0.073, 11.0, 0.1),
        (0.216, 0.192, 11.11, 0.005),
    ]
    for best, ens, printed, tol in table:
        got = improvement_pct(best, ens)
        assert abs(got - printed) <= tol, (best, ens, got)
    # the published band-gap 0.322/0.301 row prints 6.90 but the pair
    # itself gives 6.52; we keep the arithmetic and document the gap
    divergent = improvement_pct(0.322, 0.301)
    assert abs(divergent - 6.52) <= 0.005
    assert abs(divergent - 6.90) > 0.3
    elapsed = time.monotonic() - start
    print(f"criterion 8: all published pairs reproduced in {elapsed:.3f}s")
    assert elapsed < 1


def test_criterion_09_determinism(benchmark):
    def digest(path):
        return hashlib.sha256(path.read_bytes()).hexdigest()

    for e in range(1, 61):
        name = f"checkpoints/ckpt_{e:05d}.cgen"
        assert digest(benchmark.run1 / name) == digest(benchmark.run2 / name), name
    reports1 = sorted(p.name for p in (benchmark.run1 / "reports").iterdir())
    reports2 = sorted(p.name for p in (benchmark.run2 / "reports").iterdir())
    assert reports1 == reports2 and reports1
    for name in reports1:
        assert digest(benchmark.run1 / "reports" / name) == digest(
            benchmark.run2 / "reports" / name
        ), name
    total = benchmark.seconds["run1"] + benchmark.seconds["run2"]
    print(f"criterion 9: 60 checkpoints + {len(reports1)} reports identical, {total:.0f}s total")
    assert total < 600


def test_criterion_10_format_round_trips(tmp_path, eval_graphs):
    start = time.monotonic()
    arch = arch_for(("formation_energy",))
    ckpt = Checkpoint(
        params=init_model(arch), epoch=3, val_mse=0.25,
        val_mse_tasks={"formation_energy": 0.25},
        normalizer=Normalizer(mean=(0.1,), std=(1.5,)),
        arch=arch, train_seed=4,
    )
    p1, p2 = tmp_path / "a.cgen", tmp_path / "b.cgen"
    save_checkpoint(ckpt, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()

    nacl_json = parse_structure_json(open(DATA + "/nacl.json").read())
    nacl_cif = parse_cif(open(DATA + "/nacl.cif").read())
    for nacl in (nacl_json, nacl_cif):
        assert len(nacl.species) == 8
        assert abs(nacl.volume - 179.4) <= 0.1

    tri = parse_cif(open(DATA + "/triclinic.cif").read())
    a, b, c = 3.0, 4.0, 5.0
    ca, cb, cg = (math.cos(math.radians(x)) for x in (70.0, 80.0, 60.0))
    want = a * b * c * math.sqrt(1 - ca * ca - cb * cb - cg * cg + 2 * ca * cb * cg)
    assert abs(tri.volume - want) / want < 1e-9

    back = parse_structure_json(structure_to_json(tri))
    assert np.array_equal(back.lattice, tri.lattice)
    assert np.array_equal(back.frac_coords, tri.frac_coords)
    assert back.species == tri.species
    elapsed = time.monotonic() - start
    print(f"criterion 10: round-trips exact in {elapsed:.2f}s")
    assert elapsed < 5
