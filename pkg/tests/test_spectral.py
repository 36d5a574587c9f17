import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree import gallery
from afree.operators import LinearOperator, OperatorError
from afree.spectral import (
    RangeError,
    TorusField,
    a_representative,
    afree_part,
    apply_operator,
    helmholtz,
    integer_frequencies,
    nyquist_mask,
    poincare_check,
    potential_solve,
    representative_formulas,
    sobolev_norm,
)

PROJECTABLE = ["divergence_d2", "curl_d2", "symmetric_gradient_d2", "saint_venant_d2", "laplacian_d2",
               "second_component_gradient_d2"]
seeds = st.integers(0, 2**32 - 1)


def _rel(a: TorusField, b: TorusField) -> float:
    return float(np.max(np.abs(a.values - b.values))) / max(float(np.max(np.abs(b.values))), 1e-300)


def test_field_validation():
    with pytest.raises(ValueError, match="power of two"):
        TorusField(np.zeros((6, 6, 1)))
    with pytest.raises(ValueError, match="square"):
        TorusField(np.zeros((8, 4, 1)))
    with pytest.raises(ValueError):
        TorusField(np.zeros(8))


def test_field_is_immutable():
    u = TorusField.zeros(4, 2, 1)
    with pytest.raises(ValueError):
        u.values[0, 0, 0] = 1.0


def test_fourier_conventions():
    u = TorusField.from_function(lambda x: 3.0 + np.cos(2 * np.pi * x[..., 0]), 8, 2)
    c = u.fourier()
    assert c[0, 0, 0] == pytest.approx(3.0)
    assert c[1, 0, 0] == pytest.approx(0.5)
    assert integer_frequencies(8, 1)[:, 0].tolist() == [0, 1, 2, 3, -4, -3, -2, -1]
    assert nyquist_mask(4, 2).sum() == 7


def test_random_fields_are_band_limited():
    u = TorusField.random(8, 2, 2, seed=0)
    assert np.all(np.abs(u.fourier()[nyquist_mask(8, 2)]) < 1e-15)


def test_divergence_of_sine():
    u = TorusField.from_function(lambda x: np.stack([np.sin(2 * np.pi * x[..., 0]), 0 * x[..., 0]], -1), 16, 2)
    du = apply_operator(gallery.load("divergence2d"), u)
    expect = 2 * np.pi * np.cos(2 * np.pi * u.coords()[..., 0])
    np.testing.assert_allclose(du.values[..., 0], expect, atol=1e-12)


def test_laplacian_of_product_wave():
    f = lambda x: np.sin(2 * np.pi * x[..., 0]) * np.cos(4 * np.pi * x[..., 1])
    u = TorusField.from_function(f, 16, 2)
    lu = apply_operator(gallery.load("laplacian2d"), u)
    np.testing.assert_allclose(lu.values[..., 0], -20 * np.pi**2 * f(u.coords()), atol=1e-10)


def test_period_enters_the_symbol():
    f = lambda x: np.sin(np.pi * x[..., 0])
    u = TorusField.from_function(f, 16, 1, length=2.0)
    du = apply_operator(LinearOperator.first_order([[[1.0]]]), u)
    np.testing.assert_allclose(du.values[..., 0], np.pi * np.cos(np.pi * u.coords()[..., 0]), atol=1e-12)


@pytest.mark.parametrize("name", PROJECTABLE)
def test_projection_contract(name):
    op = gallery.load(name)
    for seed in range(5):
        u = TorusField.random(16, 2, op.dim_in, seed=seed)
        m, t, z = helmholtz(op, u)
        nu = sobolev_norm(u, 0.0)
        assert sobolev_norm(apply_operator(op, z), -op.order) <= 1e-9 * nu
        assert np.max(np.abs(t.mean())) < 1e-12 and np.max(np.abs(z.mean())) < 1e-12
        np.testing.assert_allclose((z + t + m).values, u.values, atol=1e-12)
        assert _rel(a_representative(op, t), t) < 1e-10
        a, b = representative_formulas(op, u)
        assert np.max(np.abs(a.values - b.values)) <= 1e-10 * np.max(np.abs(u.values))


@given(seeds)
def test_afree_part_is_idempotent(seed):
    op = gallery.load("curl2d")
    z = afree_part(op, TorusField.random(8, 2, 2, seed=seed))
    np.testing.assert_allclose(afree_part(op, z).values, z.values, atol=1e-12)


@given(seeds, st.floats(-3, 3))
def test_representative_is_linear(seed, c):
    op = gallery.load("divergence2d")
    u = TorusField.random(8, 2, 2, seed=seed)
    v = TorusField.random(8, 2, 2, seed=seed + 1)
    lhs = a_representative(op, u + c * v)
    rhs = a_representative(op, u) + c * a_representative(op, v)
    np.testing.assert_allclose(lhs.values, rhs.values, atol=1e-11)


def test_afree_field_has_zero_representative():
    op = gallery.load("divergence2d")
    z = TorusField.from_function(lambda x: np.stack([np.sin(2 * np.pi * x[..., 1]), np.cos(2 * np.pi * x[..., 0])], -1),
                                 16, 2)
    assert np.max(np.abs(a_representative(op, z).values)) < 1e-14


def test_non_constant_rank_is_refused():
    u = TorusField.random(8, 2, 2, seed=0)
    with pytest.raises(OperatorError, match="constant-rank"):
        a_representative(gallery.load("mueller_diagonal"), u)


def test_fiber_mismatch():
    with pytest.raises(OperatorError):
        apply_operator(gallery.load("divergence2d"), TorusField.zeros(8, 2, 3))


def test_potential_closed_form():
    z = TorusField.from_function(lambda x: np.stack([np.sin(2 * np.pi * x[..., 1]), 0 * x[..., 0]], -1), 16, 2)
    u = potential_solve(gallery.load("rotated_gradient"), z)
    # rotated gradient (-d2 u, d1 u): u = cos(2 pi x2) / (2 pi)
    expect = np.cos(2 * np.pi * u.coords()[..., 1]) / (2 * np.pi)
    np.testing.assert_allclose(np.abs(u.values[..., 0]), np.abs(expect), atol=1e-12)
    np.testing.assert_allclose(apply_operator(gallery.load("rotated_gradient"), u).values, z.values, atol=1e-12)


@pytest.mark.parametrize("a, b", [("curl_d2", "scalar_gradient_d2"), ("divergence_d2", "rotated_gradient_d2"),
                                  ("saint_venant_d2", "symmetric_gradient_d2")])
def test_potential_round_trip(a, b):
    opA, opB = gallery.load(a), gallery.load(b)
    for seed in range(3):
        z = afree_part(opA, TorusField.random(16, 2, opA.dim_in, seed=seed))
        back = apply_operator(opB, potential_solve(opB, z))
        assert sobolev_norm(back - z, 0.0) <= 1e-9 * sobolev_norm(z, 0.0)


def test_potential_rejects_out_of_range():
    u = TorusField.random(8, 2, 2, seed=3)
    with pytest.raises(RangeError):
        potential_solve(gallery.load("scalar_gradient_d2"), u)


def test_sobolev_norm_of_sine():
    u = TorusField.from_function(lambda x: np.sin(2 * np.pi * x[..., 0]), 16, 2)
    assert sobolev_norm(u, 0.0) == pytest.approx(np.sqrt(0.5))
    assert sobolev_norm(u, -1.0) == pytest.approx(0.5)


def test_poincare_single_frequency():
    op = gallery.load("divergence2d")
    xi = np.array([2, 1])
    a = xi / np.linalg.norm(xi)
    u = TorusField.from_function(lambda x: np.cos(2 * np.pi * x @ xi)[..., None] * a, 16, 2)
    rep = poincare_check(op, [u])
    k = np.linalg.norm(xi)
    assert rep.max_ratio == pytest.approx(np.sqrt(1 + k**2) / (2 * np.pi * k), rel=1e-12)


def test_poincare_skips_afree_fields():
    op = gallery.load("divergence2d")
    z = afree_part(op, TorusField.random(8, 2, 2, seed=0))
    rep = poincare_check(op, [z, TorusField.random(8, 2, 2, seed=1)])
    assert rep.skipped == 1 and rep.ratios.size == 1


def test_poincare_constant_is_grid_stable():
    op = gallery.load("divergence2d")
    c32 = poincare_check(op, [TorusField.random(32, 2, 2, seed=s) for s in range(100)]).max_ratio
    c64 = poincare_check(op, [TorusField.random(64, 2, 2, seed=s) for s in range(100)]).max_ratio
    assert np.isfinite(c32) and abs(c64 - c32) <= 0.1 * c32
