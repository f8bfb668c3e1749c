import numpy as np
import pytest

from oracles import elementwise_mean_params, mean_prediction

from crystens.cgraph import GraphConfig, build_graphs
from crystens.ensemble import (
    EnsembleSpec,
    average_params,
    default_top_n,
    load_members,
    member_predictions,
    predict_ensemble,
    rank_checkpoints,
    require_shared_arch,
    require_shared_normalizer,
)
from crystens.errors import ConfigError, DataError
from crystens.net import ArchConfig, init_model
from crystens.structio import load_dataset
from crystens.train import Checkpoint, Normalizer, checkpoint_path, save_checkpoint

ARCH = ArchConfig(d_init=100, d_atom=8, d_hidden=12, n_conv=2, tasks=("formation_energy",), seed=0)
NORM = Normalizer(mean=(1.0,), std=(4.0,))


def write_ckpt(directory, epoch, val_mse, params, arch=ARCH, normalizer=NORM, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    ckpt = Checkpoint(
        params=params,
        epoch=epoch,
        val_mse=val_mse,
        val_mse_tasks={t: val_mse for t in arch.tasks},
        normalizer=normalizer,
        arch=arch,
        train_seed=seed,
    )
    save_checkpoint(ckpt, checkpoint_path(directory, epoch))
    return ckpt


def fill_run(directory, count, arch=ARCH, normalizer=NORM):
    """count checkpoints whose quality deliberately does not follow epoch
    order: epoch e gets val_mse |count/2 - e| + 0.25."""
    for e in range(1, count + 1):
        params = init_model(
            ArchConfig(**{**arch.to_dict(), "seed": e})
        )
        write_ckpt(directory, e, abs(count / 2 - e) + 0.25, params, arch, normalizer)


@pytest.fixture(scope="module")
def graphs(toy_dir):
    data = load_dataset(toy_dir)
    return build_graphs(data.structures()[:6], GraphConfig())


def test_ranking_order(tmp_path):
    fill_run(tmp_path, 7)
    ranked = rank_checkpoints(tmp_path)
    mses = [e.val_mse for e in ranked.entries]
    assert mses == sorted(mses)
    # val_mse 0.75 is a tie between epochs 3 and 4: earlier epoch first
    assert ranked.entries[0].epoch == 3 or ranked.entries[0].val_mse == 0.25
    tied = [e.epoch for e in ranked.entries if e.val_mse == 0.75]
    assert tied == sorted(tied)
    assert ranked.best.val_mse == min(mses)
    with pytest.raises(ConfigError):
        ranked.top(0)
    with pytest.raises(ConfigError):
        ranked.top(8)


def test_empty_run_dir(tmp_path):
    with pytest.raises(DataError):
        rank_checkpoints(tmp_path)


def test_ensemble_of_one_is_best_checkpoint(tmp_path, graphs):
    fill_run(tmp_path, 5)
    ranked = rank_checkpoints(tmp_path)
    best = load_members(ranked, 1)[0]
    direct = member_predictions([best], graphs)[0]
    for strategy in ("prediction", "model"):
        out = predict_ensemble(ranked, EnsembleSpec(n=1, strategy=strategy), graphs)
        assert np.array_equal(out.y_norm, direct)
        assert np.array_equal(out.y, direct * 4.0 + 1.0)


@pytest.mark.parametrize("n", [1, 2, 5, 20, 50])
def test_prediction_mean_matches_oracle(tmp_path, graphs, n):
    fill_run(tmp_path, 50)
    ranked = rank_checkpoints(tmp_path)
    out = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="prediction"), graphs)
    preds = member_predictions(load_members(ranked, n), graphs)
    want = mean_prediction(preds)
    assert np.allclose(out.y_norm, want, rtol=1e-9, atol=0)
    assert out.n == n and out.strategy == "prediction"


@pytest.mark.parametrize("n", [2, 5, 20])
def test_average_params_matches_oracle(tmp_path, n):
    fill_run(tmp_path, 20)
    ranked = rank_checkpoints(tmp_path)
    got = average_params(ranked, n)
    want = elementwise_mean_params([m.params for m in load_members(ranked, n)])
    for name in want:
        assert np.allclose(got[name], want[name], rtol=1e-7, atol=0)


@pytest.mark.parametrize("n", [2, 5])
def test_strategies_commute_on_affine_fixture(tmp_path, graphs, n):
    """Members sharing every non-head tensor make the forward pass affine
    in the remaining (head) parameters, so averaging parameters and
    averaging predictions must agree."""
    base = init_model(ARCH)
    rng = np.random.default_rng(13)
    for e in range(1, 6):
        params = {k: v.copy() for k, v in base.items()}
        params["head_W_formation_energy"] = rng.normal(size=(12, 1))
        params["head_b_formation_energy"] = np.array(rng.normal())
        write_ckpt(tmp_path, e, float(e), params)
    ranked = rank_checkpoints(tmp_path)
    p = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="prediction"), graphs)
    m = predict_ensemble(ranked, EnsembleSpec(n=n, strategy="model"), graphs)
    scale = np.maximum(np.abs(p.y_norm), 1e-12)
    assert np.max(np.abs(p.y_norm - m.y_norm) / scale) < 1e-9


def test_mixed_normalizers_refused(tmp_path, graphs):
    write_ckpt(tmp_path, 1, 0.5, init_model(ARCH))
    write_ckpt(tmp_path, 2, 0.6, init_model(ARCH), normalizer=Normalizer(mean=(0.0,), std=(1.0,)))
    ranked = rank_checkpoints(tmp_path)
    with pytest.raises(ConfigError, match="normalizer"):
        predict_ensemble(ranked, EnsembleSpec(n=2, strategy="prediction"), graphs)


def test_mixed_arch_refused_for_model_average(tmp_path):
    other = ArchConfig(**{**ARCH.to_dict(), "seed": 9})
    write_ckpt(tmp_path, 1, 0.5, init_model(ARCH))
    write_ckpt(tmp_path, 2, 0.6, init_model(other), arch=other)
    ranked = rank_checkpoints(tmp_path)
    with pytest.raises(ConfigError):
        average_params(ranked, 2)


def test_shared_checks_pass_through(tmp_path):
    fill_run(tmp_path, 3)
    members = load_members(rank_checkpoints(tmp_path), 3)
    assert require_shared_normalizer(members) == NORM
    assert require_shared_arch(members) == ARCH


def test_default_top_n():
    assert default_top_n(1, available=60) == 20
    assert default_top_n(3, available=60) == 40
    assert default_top_n(1, available=8) == 8
    assert default_top_n(3, available=25) == 25


def test_spec_validation():
    with pytest.raises(ConfigError):
        EnsembleSpec(n=0, strategy="prediction")
    with pytest.raises(ConfigError):
        EnsembleSpec(n=3, strategy="bagging")
