"""
test_evaluate.py

Tests for equation rendering, coefficient scoring and rollout metrics.
"""
import re

import numpy as np
import pytest
import torch
import torch.nn as nn

from nsindy import data
from nsindy.dictionary import build_poly_library, from_spec
from nsindy.evaluate import (FitReport, MetricSeries, energy_entropy_rates, hamiltonian_trace, read_report,
                             reference_energy_entropy_rates, relative_drift, render_equations, render_model,
                             render_potential, score_coefficients, time_instant_mse, true_hamiltonian_trace,
                             truth_matrix, write_report, write_series)
from nsindy.integrate import SolverConfig, solve_ivp
from nsindy.models import GenericModel, HamiltonianModel, ModelError, PlainModel, PortHamiltonianModel
from nsindy.systems import get_system

TIGHT = SolverConfig(rtol=1e-12, atol=1e-12)
TERM = re.compile(r"(-?\d+\.\d{6})(?:\*(\S+))?")


def parse_equation(line):
    """Recover {term: coefficient} from a rendered line."""
    _, rhs = line.split(" = ", 1)
    if rhs == "0":
        return {}
    terms = {}
    for part in rhs.split(" + "):
        match = TERM.fullmatch(part)
        assert match, part
        terms[match.group(2) or "1"] = float(match.group(1))
    return terms


class SystemModel(nn.Module):
    """Wraps a ground-truth field so metrics can treat it as a model."""

    kind = "plain"

    def __init__(self, system):
        super().__init__()
        self.system = system
        self.n = system.n

    def forward(self, t, x):
        return self.system.velocity(t, x)


@pytest.fixture(scope="module")
def hyperbolic_test_split():
    system = get_system("hyperbolic").with_overrides(t_final=1.0)
    return data.generate(system, {"train": 1, "val": 1, "test": 3}, seed=2)


class TestRender:
    def test_single_term(self):
        lib = build_poly_library(2, 3)
        xi = np.zeros((lib.size, 2))
        xi[lib.index_of("x1"), 0] = -0.05
        assert render_equations(xi, lib, ("x", "y"))[0] == "dx/dt = -0.050000*x"

    def test_lorenz_third_row(self):
        system = get_system("lorenz")
        lib = from_spec(system.dictionary, system.var_names)
        lines = render_equations(truth_matrix(system, lib, "plain"), lib, system.var_names)
        # dictionary order puts the linear z ahead of x*y
        assert lines[2] == "dz/dt = -2.666667*z + 1.000000*x*y"

    def test_zero_column(self):
        lib = build_poly_library(2, 2)
        assert render_equations(np.zeros((lib.size, 2)), lib, ("x", "y")) == ["dx/dt = 0", "dy/dt = 0"]

    def test_constant_term_has_no_name(self):
        lib = build_poly_library(1, 1)
        assert render_equations(np.array([[1.5], [0.0]]), lib, ("u",)) == ["du/dt = 1.500000"]

    def test_potential(self):
        system = get_system("pendulum")
        lib = from_spec(system.dictionary, system.var_names)
        line = render_potential(truth_matrix(system, lib, "hamiltonian"), lib, system.var_names)
        assert line == "H = 0.500000*p^2 + -6.000000*cos(q)"

    def test_parse_back(self):
        lib = build_poly_library(3, 2, ("x", "y", "z"))
        gen = np.random.default_rng(0)
        xi = gen.uniform(-10, 10, size=(lib.size, 3)) * (gen.uniform(size=(lib.size, 3)) < 0.4)
        names = lib.names()
        for j, line in enumerate(render_equations(xi, lib, ("x", "y", "z"))):
            parsed = parse_equation(line)
            expected = {names[k]: xi[k, j] for k in range(lib.size) if xi[k, j] != 0}
            assert parsed.keys() == expected.keys()
            for term, value in expected.items():
                assert parsed[term] == pytest.approx(value, abs=1e-6)

    def test_port_model_reports_delta(self):
        model = PortHamiltonianModel(build_poly_library(2, 2, ("q", "p")), gamma=0.3, omega=1.2)
        with torch.no_grad():
            model.damping.fill_(-0.3)
        assert render_model(model, ("q", "p"))[-1] == "delta = 0.300000"

    def test_generic_model_renders_energy(self):
        system = get_system("damped_oscillator")
        model = GenericModel(from_spec(system.dictionary, system.var_names), system.poisson, 2)
        assert render_model(model, system.var_names)[0].startswith("E = ")


class TestScore:
    def test_identical(self):
        truth = np.array([[0.0, 1.0], [-0.05, 0.0]])
        score = score_coefficients(truth, truth)
        assert (score.support_exact, score.max_abs_err) == (True, 0.0)

    def test_hyperbolic_identified(self):
        system = get_system("hyperbolic")
        lib = from_spec(system.dictionary, system.var_names)
        truth = truth_matrix(system, lib, "plain")
        learned = np.zeros_like(truth)
        learned[lib.index_of("x"), 0] = -0.050006
        learned[lib.index_of("x^2"), 1] = 1.000063
        learned[lib.index_of("y"), 1] = -1.000063
        score = score_coefficients(learned, truth, lib.with_var_names(system.var_names).names())
        assert score.support_exact
        assert score.max_abs_err == pytest.approx(6.3e-5)
        assert [row["term"] for row in score.rows] == ["x", "y", "x^2"]

    def test_spurious_term(self):
        truth = np.array([[1.0], [0.0]])
        learned = np.array([[1.0], [1e-3]])
        score = score_coefficients(learned, truth)
        assert not score.support_exact
        assert score.max_abs_err == pytest.approx(1e-3)

    def test_symmetric(self):
        gen = np.random.default_rng(1)
        a, b = gen.normal(size=(6, 2)), gen.normal(size=(6, 2))
        assert score_coefficients(a, b).max_abs_err == score_coefficients(b, a).max_abs_err

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            score_coefficients(np.zeros((3, 2)), np.zeros((4, 2)))


class TestMse:
    def test_ground_truth_velocity(self, hyperbolic_test_split):
        ds = hyperbolic_test_split
        series = time_instant_mse(SystemModel(get_system("hyperbolic")), ds.split("test"), ds.times, TIGHT)
        assert len(series) == ds.num_samples
        assert series.values[0] == 0.0
        assert np.all(series.values <= 1e-10)
        assert not series.partial

    def test_zero_model(self, hyperbolic_test_split):
        ds = hyperbolic_test_split
        model = PlainModel(build_poly_library(2, 3))
        with torch.no_grad():
            model.xi.zero_()
        series = time_instant_mse(model, ds.split("test"), ds.times, TIGHT)
        states = ds.splits["test"]
        expected = ((states - states[:, :1]) ** 2).mean(axis=-1).mean(axis=0)
        assert np.allclose(series.values, expected, rtol=1e-12, atol=1e-15)

    def test_dimension_mismatch(self, hyperbolic_test_split):
        ds = hyperbolic_test_split
        with pytest.raises(ModelError):
            time_instant_mse(PlainModel(build_poly_library(3, 1)), ds.split("test"), ds.times, TIGHT)

    def test_failed_rollouts_mark_series_partial(self, hyperbolic_test_split):
        ds = hyperbolic_test_split
        model = PlainModel(build_poly_library(2, 3))
        with torch.no_grad():
            model.xi.zero_()
        cfg = SolverConfig(max_steps=1, initial_step=1e-4)
        series = time_instant_mse(model, ds.split("test"), ds.times, cfg)
        assert series.partial
        assert series.failures == [0, 1, 2]
        assert np.all(np.isnan(series.values))


def _dno_truth_model():
    system = get_system("damped_oscillator")
    lib = from_spec(system.dictionary, system.var_names)
    model = GenericModel(lib, system.poisson, system.entropy_index)
    with torch.no_grad():
        model.xi.copy_(torch.tensor(truth_matrix(system, lib, "generic")))
        model.lambda_seeds.zero_()
        model.lambda_seeds[0, 1, 2] = 2.0
        model.d_seed.zero_()
        model.d_seed[0, 0] = 0.2
    return system, model


class TestRates:
    def test_damped_oscillator_truth(self):
        _, model = _dno_truth_model()
        state = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        de, ds = energy_entropy_rates(model, state, np.array([0.0]))
        assert float(ds.values[0]) == pytest.approx(0.04)
        assert abs(float(de.values[0])) < 1e-15

    def test_along_rollout(self):
        system, model = _dno_truth_model()
        times = torch.linspace(0, 1, 21, dtype=torch.float64)
        states = solve_ivp(model, torch.tensor([0.5, -0.3, 0.0], dtype=torch.float64), times, TIGHT).states
        de, ds = energy_entropy_rates(model, states, times.numpy())
        assert np.all(np.abs(de.values) <= 1e-12)
        assert np.all(ds.values >= -1e-12)
        ref_de, ref_ds = reference_energy_entropy_rates(system, model, states, times.numpy())
        assert np.allclose(ref_de.values, de.values, atol=1e-12)
        assert np.allclose(ref_ds.values, ds.values, atol=1e-12)

    def test_wrong_kind(self):
        with pytest.raises(ModelError):
            energy_entropy_rates(PlainModel(build_poly_library(3, 1)), torch.zeros(1, 3), np.zeros(1))

    def test_reference_needs_entropy(self):
        with pytest.raises(ModelError):
            reference_energy_entropy_rates(get_system("pendulum"), None, torch.zeros(1, 2), np.zeros(1))


class TestHamiltonianTrace:
    def _mass_spring_model(self):
        system = get_system("mass_spring")
        lib = from_spec(system.dictionary, system.var_names)
        model = HamiltonianModel(lib)
        with torch.no_grad():
            model.xi.copy_(torch.tensor(truth_matrix(system, lib, "hamiltonian")))
        return system, model

    def test_conserved_along_own_flow(self):
        system, model = self._mass_spring_model()
        times = torch.linspace(0, 20, 201, dtype=torch.float64)
        states = solve_ivp(model, torch.tensor([1.0, 0.0], dtype=torch.float64), times, TIGHT).states
        trace = hamiltonian_trace(model, states, times.numpy())
        assert trace.values[0] == pytest.approx(0.5)
        assert relative_drift(trace) < 1e-8
        reference = true_hamiltonian_trace(system, states, times.numpy())
        assert np.allclose(reference.values, trace.values, atol=1e-12)

    def test_zero_hamiltonian(self):
        model = HamiltonianModel(build_poly_library(2, 2))
        with torch.no_grad():
            model.xi.zero_()
        trace = hamiltonian_trace(model, torch.ones(4, 2, dtype=torch.float64), np.arange(4.0))
        assert trace.values.tolist() == [0.0] * 4

    def test_wrong_kind(self):
        with pytest.raises(ModelError):
            hamiltonian_trace(PlainModel(build_poly_library(2, 1)), torch.zeros(1, 2), np.zeros(1))


class TestFiles:
    def test_series_length_check(self):
        with pytest.raises(ValueError):
            MetricSeries(np.arange(3.0), np.arange(4.0))

    def test_write_series(self, tmp_path):
        path = write_series(tmp_path / "mse.tsv", MetricSeries(np.array([0.0, 0.1]), np.array([0.0, 2.5e-3])))
        assert path.read_text().splitlines() == ["# time\tvalue", "0.0\t0.0", "0.1\t0.0025"]

    def test_report_round_trip(self, tmp_path):
        report = FitReport(system="hyperbolic", model_kind="plain", var_names=["x", "y"],
                           equations=["dx/dt = -0.050000*x", "dy/dt = 1.000000*x^2 + -1.000000*y"],
                           support=[[False, False], [True, False], [False, True]],
                           loss_history=[1.0, 0.5], val_history=[(0, 0.25)], lr_history=[0.01, 0.009987],
                           nnz_history=[6, 3], metrics={"max_abs_err": 1e-4})
        write_report(report, tmp_path)
        assert read_report(tmp_path) == report
        assert report.nnz == 2
        assert (tmp_path / "equations.txt").read_text().splitlines() == report.equations

    def test_missing_report(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_report(tmp_path)
