"""
test_dictionary.py

Tests for candidate-function libraries and their Jacobians.
"""
import math

import pytest
import torch

from nsindy.dictionary import (Dictionary, DictionaryError, Monomial, Trig, augment_trig, build_poly_library,
                               from_spec)


def test_poly_2_3_order_and_names():
    lib = build_poly_library(2, 3, ("x", "y"))
    assert lib.names() == ["1", "x", "y", "x^2", "x*y", "y^2", "x^3", "x^2*y", "x*y^2", "y^3"]


def test_poly_3_2_includes_linear_z():
    lib = build_poly_library(3, 2, ("x", "y", "z"))
    assert lib.size == 10
    assert "z" in lib.names()
    assert lib.names()[:4] == ["1", "x", "y", "z"]


def test_poly_1_0_is_constant():
    lib = build_poly_library(1, 0)
    assert lib.names() == ["1"]


@pytest.mark.parametrize("n,d", [(1, 4), (2, 3), (2, 4), (3, 2), (3, 3), (4, 2)])
def test_library_size(n, d):
    assert build_poly_library(n, d).size == math.comb(n + d, d)


def test_default_var_names():
    assert build_poly_library(2, 1).names() == ["1", "x1", "x2"]


def test_construction_is_deterministic():
    a = augment_trig(build_poly_library(3, 3, ("q", "p", "S")), [0, 1])
    b = augment_trig(build_poly_library(3, 3, ("q", "p", "S")), [0, 1])
    assert a == b
    assert a.names() == b.names()


def test_augment_trig_pendulum_library():
    lib = augment_trig(build_poly_library(2, 3, ("q", "p")), [0, 1])
    assert lib.size == 14
    assert lib.names()[10:] == ["cos(q)", "sin(q)", "cos(p)", "sin(p)"]


def test_augment_trig_empty_is_unchanged():
    lib = build_poly_library(2, 3)
    assert augment_trig(lib, []) == lib


def test_duffing_library_size():
    assert build_poly_library(2, 4).size == 15


def test_augment_trig_rejects_duplicates():
    lib = augment_trig(build_poly_library(2, 1), [0])
    with pytest.raises(DictionaryError):
        augment_trig(lib, [0])


def test_augment_trig_rejects_bad_index():
    with pytest.raises(DictionaryError):
        augment_trig(build_poly_library(2, 1), [2])


def test_eval_at_origin():
    lib = build_poly_library(2, 3)
    row = lib.eval(torch.tensor([0.0, 0.0], dtype=torch.float64))
    assert row.tolist() == [1, 0, 0, 0, 0, 0, 0, 0, 0, 0]


def test_eval_at_2_1():
    lib = build_poly_library(2, 3)
    row = lib.eval(torch.tensor([2.0, 1.0], dtype=torch.float64))
    assert row.tolist() == [1, 2, 1, 4, 2, 1, 8, 4, 2, 1]


def test_eval_trig_block_at_zero():
    lib = augment_trig(build_poly_library(2, 1, ("q", "p")), [0])
    row = lib.eval(torch.zeros(2, dtype=torch.float64))
    assert row[lib.index_of("cos(q)")] == 1.0
    assert row[lib.index_of("sin(q)")] == 0.0


def test_eval_batched():
    lib = build_poly_library(2, 2)
    x = torch.randn(5, 7, 2, dtype=torch.float64)
    rows = lib.eval(x)
    assert rows.shape == (5, 7, 6)
    assert torch.equal(rows[3, 4], lib.eval(x[3, 4]))


def test_eval_non_finite_reports_index():
    lib = build_poly_library(3, 2)
    with pytest.raises(DictionaryError) as err:
        lib.eval(torch.tensor([0.0, float("nan"), 1.0], dtype=torch.float64))
    assert err.value.index == 1


def test_eval_wrong_arity():
    with pytest.raises(DictionaryError):
        build_poly_library(2, 2).eval(torch.zeros(3, dtype=torch.float64))


def test_jacobian_of_linear_terms():
    lib = build_poly_library(2, 1)
    jac = lib.eval_jacobian(torch.tensor([0.3, -1.7], dtype=torch.float64))
    assert jac.tolist() == [[0, 0], [1, 0], [0, 1]]


def test_jacobian_of_x2y():
    lib = build_poly_library(2, 3, ("x", "y"))
    jac = lib.eval_jacobian(torch.tensor([2.0, 3.0], dtype=torch.float64))
    k = lib.index_of("x^2*y")
    assert jac[k].tolist() == [12.0, 4.0]


def test_jacobian_of_sin_at_half_pi():
    lib = augment_trig(build_poly_library(1, 0, ("q",)), [0])
    jac = lib.eval_jacobian(torch.tensor([math.pi / 2], dtype=torch.float64))
    assert abs(float(jac[lib.index_of("sin(q)"), 0])) < 1e-15
    assert float(jac[lib.index_of("cos(q)"), 0]) == pytest.approx(-1.0)


@pytest.mark.parametrize("spec", [
    {"poly": {"n": 2, "d": 3}, "trig": [0, 1]},
    {"poly": {"n": 3, "d": 3}, "trig": [0]},
    {"poly": {"n": 2, "d": 4}, "trig": []},
])
def test_jacobian_matches_central_differences(spec):
    lib = from_spec(spec)
    gen = torch.Generator().manual_seed(3)
    x = torch.empty(lib.arity, dtype=torch.float64).uniform_(-2, 2, generator=gen)
    jac = lib.eval_jacobian(x)
    h = 1e-6
    for j in range(lib.arity):
        step = torch.zeros_like(x)
        step[j] = h
        fd = (lib.eval(x + step) - lib.eval(x - step)) / (2 * h)
        assert torch.all((jac[:, j] - fd).abs() <= 1e-6 * (fd.abs() + 1))


def test_term_names():
    assert Monomial((2, 1)).name(("x", "y")) == "x^2*y"
    assert Monomial((0, 0)).name(("x", "y")) == "1"
    assert Trig(0, "cos").name(("q", "p")) == "cos(q)"


def test_term_name_out_of_range():
    with pytest.raises(DictionaryError):
        build_poly_library(2, 1).term_name(3)


def test_monomials_must_precede_trig():
    with pytest.raises(DictionaryError):
        Dictionary(1, [Monomial((0,)), Trig(0, "sin"), Monomial((1,))])


def test_constant_index():
    assert build_poly_library(2, 2).constant_index() == 0
    assert Dictionary(1, [Monomial((1,))]).constant_index() is None
