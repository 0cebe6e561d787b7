"""
test_params.py

Tests for run-config parsing, overrides, scales and repro rows.
"""
import json
from pathlib import Path

import pytest
import torch

from nsindy.params import (DESK, FULL, REPRO_TABLES, ConfigError, ScaleParams, load_config, parse_config,
                           parse_override, scale_name, set_by_path)


def _key(raw, overrides=()):
    with pytest.raises(ConfigError) as err:
        parse_config(raw, overrides)
    return err.value.key


class TestDefaults:
    def test_minimal_config(self, output_root):
        cfg = parse_config({"system": "hyperbolic"})
        assert cfg.system.name == "hyperbolic"
        assert cfg.model.kind == "plain"
        assert cfg.counts == {"train": 200, "val": 40, "test": 40}
        assert cfg.dictionary == {"poly": {"n": 2, "d": 3}, "trig": []}
        assert cfg.train.n_batch == 100
        assert cfg.train.l_batch == 50
        assert cfg.dataset == output_root / "datasets" / "desk" / "hyperbolic"
        assert cfg.output_dir == output_root / "reports" / "desk" / "hyperbolic-plain"

    def test_system_defaults_for_structured_kinds(self, output_root):
        cfg = parse_config({"system": "damped_oscillator"})
        assert cfg.model.kind == "generic"
        assert cfg.model.entropy_index == 2
        assert cfg.model.num_lambda == 3
        assert cfg.model.poisson[0] == (0.0, 1.0, 0.0)
        assert cfg.train.l_batch == 20
        assert cfg.build_dictionary().size == 24

    def test_full_counts(self, output_root):
        assert parse_config({"system": "hyperbolic"}, scale=FULL).counts["train"] == 1600
        assert parse_config({"system": "mass_spring"}, scale=FULL).counts["train"] == 800

    def test_port_forcing_from_system(self, output_root):
        cfg = parse_config({"system": "duffing_chaotic"})
        assert (cfg.model.gamma, cfg.model.omega) == (0.1, 1.4)

    def test_n_batch_capped_by_train_count(self, output_root):
        cfg = parse_config({"system": "hyperbolic", "counts": {"train": 30}})
        assert cfg.train.n_batch == 30

    def test_mlp_has_no_dictionary(self, output_root):
        cfg = parse_config({"system": "hyperbolic", "model": {"kind": "mlp", "mlp": {"width": 16}}})
        assert cfg.dictionary is None
        assert cfg.build_model().net[0].out_features == 16

    def test_system_overrides(self, output_root):
        cfg = parse_config({"system": {"name": "lorenz", "params": {"rho": 20}, "t_final": 1.0,
                                       "ic": {"z": [5, 6]}}})
        assert cfg.system.params["rho"] == 20.0
        assert cfg.system.num_samples == 2001
        assert cfg.system.ic[2] == (5.0, 6.0)

    def test_build_model_is_seeded(self, output_root):
        cfg = parse_config({"system": "hyperbolic", "seed": 3})
        assert torch.equal(cfg.build_model().xi, cfg.build_model().xi)
        other = parse_config({"system": "hyperbolic", "seed": 4})
        assert not torch.equal(cfg.build_model().xi, other.build_model().xi)

    def test_to_dict_reparses(self, output_root):
        cfg = parse_config({"system": "duffing", "train": {"n_max": 7}, "seed": 2})
        again = parse_config(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
        assert again.train == cfg.train


class TestErrors:
    def test_missing_system(self):
        assert _key({}) == "system"

    def test_unknown_top_level_key(self):
        assert _key({"system": "hyperbolic", "trian": {}}) == "trian"

    def test_unknown_nested_key(self):
        assert _key({"system": "hyperbolic", "train": {"lr": 0.1}}) == "train.lr"

    def test_unknown_system(self):
        assert _key({"system": "rossler"}) == "system.name"

    def test_unknown_system_param(self):
        assert _key({"system": {"name": "lorenz", "params": {"r": 1}}}) == "system.params.r"

    def test_dictionary_arity(self):
        assert _key({"system": "lorenz", "dictionary": {"poly": {"n": 2, "d": 2}}}) == "dictionary.poly.n"

    def test_dictionary_given_twice(self):
        raw = {"system": "hyperbolic", "dictionary": {"poly": {"n": 2, "d": 2}},
               "model": {"dictionary": {"poly": {"n": 2, "d": 2}}}}
        assert _key(raw) == "model.dictionary"

    def test_duplicate_trig_index(self):
        raw = {"system": "pendulum", "dictionary": {"poly": {"n": 2, "d": 3}, "trig": [0, 0]}}
        assert _key(raw) == "dictionary.trig"

    def test_hamiltonian_needs_pair(self):
        assert _key({"system": "lorenz", "model": {"kind": "hamiltonian"}}) == "model.kind"

    def test_unknown_kind(self):
        assert _key({"system": "hyperbolic", "model": {"kind": "lagrangian"}}) == "model.kind"

    def test_generic_needs_poisson(self):
        assert _key({"system": "lorenz", "model": {"kind": "generic"}}) == "model.generic.L"

    def test_poisson_must_be_skew(self):
        raw = {"system": "damped_oscillator",
               "model": {"generic": {"L": [[0, 1, 0], [1, 0, 0], [0, 0, 0]]}}}
        assert _key(raw) == "model.generic.L"

    def test_port_needs_forcing(self):
        assert _key({"system": "pendulum", "model": {"kind": "port_hamiltonian"}}) == "model.port"

    def test_n_batch_exceeds_count(self):
        assert _key({"system": "hyperbolic", "counts": {"train": 5}, "train": {"n_batch": 6}}) == "train.n_batch"

    def test_window_exceeds_trajectory(self):
        raw = {"system": {"name": "hyperbolic", "t_final": 0.1}, "train": {"l_batch": 11}}
        assert _key(raw) == "train.l_batch"

    def test_type_errors(self):
        assert _key({"system": "hyperbolic", "train": {"n_max": 1.5}}) == "train.n_max"
        assert _key({"system": "hyperbolic", "train": {"prune_enabled": 1}}) == "train.prune_enabled"
        assert _key({"system": "hyperbolic", "solver": {"rtol": -1}}) == "solver.rtol"
        assert _key({"system": "hyperbolic", "solver": {"method": "euler"}}) == "solver.method"

    def test_bad_ic(self):
        assert _key({"system": {"name": "hyperbolic", "ic": {"x": [1, 0]}}}) == "system.ic.x"

    def test_t_final_off_grid(self):
        assert _key({"system": {"name": "hyperbolic", "t_final": 0.105}}) == "system.t_final"


class TestOverrides:
    def test_parse_values_as_json(self):
        assert parse_override("train.n_max=50") == ("train.n_max", 50)
        assert parse_override("train.prune_enabled=false") == ("train.prune_enabled", False)
        assert parse_override("model.kind=mlp") == ("model.kind", "mlp")

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_override("train.n_max")

    def test_set_below_string_system(self):
        assert set_by_path({"system": "lorenz"}, "system.t_final", 1.0) == {
            "system": {"name": "lorenz", "t_final": 1.0}}

    def test_set_below_scalar(self):
        with pytest.raises(ConfigError):
            set_by_path({"seed": 1}, "seed.x", 2)

    def test_overrides_apply_before_validation(self, output_root):
        cfg = parse_config({"system": "hyperbolic"}, [("train.n_max", 5), ("model.kind", "mlp")])
        assert cfg.train.n_max == 5
        assert cfg.model.kind == "mlp"
        assert _key({"system": "hyperbolic"}, [("train.bogus", 1)]) == "train.bogus"


class TestFiles:
    def test_load_config(self, tmp_path, output_root):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"system": "pendulum", "train": {"n_max": 3}}))
        cfg = load_config(path)
        assert cfg.model.kind == "hamiltonian"
        assert cfg.raw["train"]["n_max"] == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{system: hyperbolic")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(path)


class TestScale:
    def test_names(self):
        assert scale_name(DESK) == "desk"
        assert scale_name(FULL) == "full"
        assert scale_name(7) == "unknown"

    def test_directories(self, tmp_path):
        dirs = ScaleParams(FULL, rootdir=tmp_path)
        assert dirs.datadir("lorenz") == tmp_path / "datasets" / "full" / "lorenz"
        assert dirs.measuredir() == tmp_path / "measurements" / "full"
        with pytest.raises(ValueError):
            ScaleParams(2)


class TestReproRows:
    def test_every_row_parses(self, output_root):
        for rows in REPRO_TABLES.values():
            for row in rows:
                cfg = parse_config(row.config(DESK, rootdir=output_root))
                assert cfg.model.kind == row.kind
                assert cfg.train.n_max == row.n_max
                assert Path(cfg.output_dir).parent == output_root / "repro" / "desk"

    def test_full_iterations(self, output_root):
        row = REPRO_TABLES["table1"][4]
        assert row.system == "lorenz"
        assert row.config(FULL)["train"]["n_max"] == 2000

    def test_paired_plain_kind(self, output_root):
        row = REPRO_TABLES["table2"][0]
        raw = row.config(DESK, "plain", rootdir=output_root)
        assert raw["model"]["kind"] == "plain"
        assert raw["output_dir"].endswith("mass_spring-plain")
