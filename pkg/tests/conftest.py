import numpy as np
import pytest

from crystens.structio import CrystalStructure, lattice_from_parameters


def random_structure(rng, max_atoms=6, min_height=1.0, max_z=20):
    """Random triclinic cell with fracs already wrapped into [0, 1).

    Cells are resampled until every pair of opposite faces is at least
    ``min_height`` apart, so neighbor enumeration bounds stay sane.
    """
    while True:
        lengths = rng.uniform(2.0, 7.0, 3)
        angles = rng.uniform(60.0, 120.0, 3)
        try:
            lattice = lattice_from_parameters(*lengths, *angles)
        except Exception:
            continue
        volume = abs(float(np.linalg.det(lattice)))
        heights = [
            volume / float(np.linalg.norm(np.cross(lattice[(k + 1) % 3], lattice[(k + 2) % 3])))
            for k in range(3)
        ]
        if min(heights) >= min_height and volume > 0.5:
            break
    n = int(rng.integers(1, max_atoms + 1))
    return CrystalStructure(
        lattice=lattice,
        species=tuple(int(z) for z in rng.integers(1, max_z + 1, n)),
        frac_coords=rng.uniform(0.0, 1.0, (n, 3)),
        id=f"rand-{rng.integers(1 << 30)}",
    )


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """Small single-task toy dataset shared by training and CLI tests."""
    from crystens.toy import generate_toy_dataset

    path = tmp_path_factory.mktemp("toydata")
    generate_toy_dataset(path, n=48, seed=7)
    return path


@pytest.fixture(scope="session")
def toy_multi_dir(tmp_path_factory):
    from crystens.toy import generate_toy_dataset

    path = tmp_path_factory.mktemp("toymulti")
    generate_toy_dataset(path, n=48, seed=7, multi=True)
    return path
