"""
test_data.py

Tests for dataset generation and the on-disk dataset format.
"""
import json

import numpy as np
import pytest
import torch

from nsindy import data
from nsindy.data import DataError
from nsindy.systems import BUILTIN, get_system

COUNTS = {"train": 3, "val": 1, "test": 2}


@pytest.fixture(scope="module")
def small_system():
    return get_system("hyperbolic").with_overrides(t_final=0.2)


@pytest.fixture(scope="module")
def dataset(small_system):
    return data.generate(small_system, COUNTS, seed=5)


def test_generate_shapes(dataset):
    assert dataset.counts() == COUNTS
    assert dataset.splits["train"].shape == (3, 21, 2)
    assert dataset.times[0] == 0.0
    assert dataset.times[-1] == pytest.approx(0.2)
    assert dataset.var_names == ("x", "y")


def test_first_sample_is_initial_condition(dataset, small_system):
    rng = np.random.default_rng([5, 0])
    assert np.array_equal(dataset.splits["train"][0, 0], small_system.sample_ic(rng))


def test_generated_trajectory_matches_exact_solution(dataset):
    # x' = -0.05 x has a closed form
    x = dataset.splits["test"][1, :, 0]
    assert np.allclose(x, x[0] * np.exp(-0.05 * dataset.times), rtol=1e-8, atol=1e-10)


def test_generation_is_deterministic(small_system, dataset):
    assert data.generate(small_system, COUNTS, seed=5) == dataset


def test_workers_do_not_change_results(small_system, dataset):
    assert data.generate(small_system, COUNTS, seed=5, workers=3) == dataset


def test_seed_changes_results(small_system, dataset):
    assert data.generate(small_system, COUNTS, seed=6) != dataset


def test_counts_must_be_positive(small_system):
    with pytest.raises(DataError):
        data.generate(small_system, {"train": 0, "val": 1, "test": 1}, seed=0)


def test_split_access(dataset):
    assert isinstance(dataset.split("val"), torch.Tensor)
    with pytest.raises(DataError):
        dataset.split("holdout")


def test_trajectories_carry_seed(dataset):
    trajectories = list(dataset.trajectories("val"))
    assert len(trajectories) == 1
    assert trajectories[0].seed == (5, 3)


def test_check_dimension(dataset):
    dataset.check_dimension(2)
    with pytest.raises(DataError):
        dataset.check_dimension(3)


def test_save_load_round_trip(dataset, tmp_path):
    path = data.save(dataset, tmp_path / "ds")
    loaded = data.load(path)
    assert loaded == dataset
    assert loaded.params == dataset.params
    meta = json.loads((path / "meta.json").read_text())
    assert meta["format_version"] == data.FORMAT_VERSION
    assert meta["num_samples"] == 21


def test_saved_bytes_are_stable(dataset, tmp_path):
    a = data.save(dataset, tmp_path / "a")
    b = data.save(dataset, tmp_path / "b")
    for name in ("meta.json", "times.bin", "train.bin", "val.bin", "test.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataError):
        data.load(tmp_path / "nothing")


def test_load_detects_checksum_mismatch(dataset, tmp_path):
    path = data.save(dataset, tmp_path / "ds")
    raw = bytearray((path / "train.bin").read_bytes())
    raw[0] ^= 0xFF
    (path / "train.bin").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum"):
        data.load(path)


def test_load_detects_truncation(dataset, tmp_path):
    path = data.save(dataset, tmp_path / "ds")
    (path / "val.bin").write_bytes((path / "val.bin").read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        data.load(path)


def test_load_rejects_other_format_version(dataset, tmp_path):
    path = data.save(dataset, tmp_path / "ds")
    meta = json.loads((path / "meta.json").read_text())
    meta["format_version"] = data.FORMAT_VERSION + 1
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match="version"):
        data.load(path)


def test_load_rejects_missing_key(dataset, tmp_path):
    path = data.save(dataset, tmp_path / "ds")
    meta = json.loads((path / "meta.json").read_text())
    del meta["seed"]
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match="seed"):
        data.load(path)


SHORT_SPAN = {"lorenz": 0.5}


@pytest.fixture(scope="module", params=sorted(BUILTIN))
def generated(request):
    system = get_system(request.param)
    system = system.with_overrides(t_final=SHORT_SPAN.get(system.name, 2.0))
    return system, data.generate(system, {"train": 2, "val": 1, "test": 1}, seed=0)


def test_central_differences_follow_the_true_velocity(generated):
    system, ds = generated
    times = torch.from_numpy(ds.times)
    for states in ds.splits["train"]:
        states = torch.from_numpy(states)
        slopes = (states[2:] - states[:-2]) / (2 * system.dt)
        field = system.velocity(times[1:-1], states[1:-1])
        # O(dt^2) truncation, normalized by amplitude times the cubed characteristic rate
        amplitude = float(states.abs().max()) + 1e-12
        rate = float(field.abs().max()) / amplitude
        bound = 10 * system.dt ** 2 * amplitude * max(rate, 1.0) ** 3
        assert float((slopes - field).abs().max()) <= bound


def test_pendulum_default_grid():
    ds = data.generate(get_system("pendulum"), {"train": 1, "val": 1, "test": 1}, seed=0)
    assert ds.splits["train"].shape == (1, 136, 2)


def test_mass_spring_conserves_energy():
    ds = data.generate(get_system("mass_spring"), {"train": 3, "val": 1, "test": 1}, seed=0)
    states = ds.splits["train"]
    energy = 0.5 * states[..., 0] ** 2 + 0.5 * states[..., 1] ** 2
    drift = np.abs(energy - energy[:, :1]) / energy[:, :1]
    assert drift.max() <= 1e-6


def test_damped_oscillator_entropy_grows_at_constant_energy():
    system = get_system("damped_oscillator")
    ds = data.generate(system, {"train": 3, "val": 1, "test": 1}, seed=0)
    states = ds.splits["train"]
    entropy = states[..., 2]
    assert np.all(np.diff(entropy, axis=1) >= -1e-10)
    assert np.all(entropy[:, -1] > 0)
    energy = system.potential(torch.from_numpy(states)).numpy()
    magnitude = 0.5 * states[:, :1, 1] ** 2 + 3.0 * np.abs(np.cos(states[:, :1, 0]))
    assert np.all(np.abs(energy - energy[:, :1]) <= 1e-6 * magnitude)
