import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree import gallery
from afree.approximation import (
    Mollifier,
    area_strict_run,
    bgradient_run,
    circle_measure,
    disk_indicator,
    drop_nyquist,
    field_area,
    mollify,
    support_margin,
)
from afree.operators import OperatorError
from afree.spectral import TorusField, apply_operator, sobolev_norm
from afree.young import Box, DiscreteMeasure


def _box(n=64, half=2.0):
    return Box(np.full(2, -half), np.full(2, half), (n, n))


def test_mollifier_kernel_has_unit_mass():
    h = 0.05
    k = Mollifier(0.3).kernel(64, 2, h)
    assert k.sum() * h**2 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Mollifier(0.0)
    # below the grid spacing the kernel degenerates to a discrete delta
    delta = Mollifier(0.01).kernel(64, 2, h)
    assert delta[0, 0] * h**2 == pytest.approx(1.0) and np.count_nonzero(delta) == 1


@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.1, 3.0))
def test_mollified_atom_keeps_mass(x, y, m):
    box = _box(32)
    mu = DiscreteMeasure(box, np.zeros((box.ncells, 2)), [[x, y]], [m], [[0.6, -0.8]])
    u = mollify(mu, Mollifier(0.4))
    np.testing.assert_allclose(u.values.sum(axis=(0, 1)) * box.cell_volume, m * np.array([0.6, -0.8]), atol=1e-12)


def test_mollified_density_keeps_mass(rng):
    box = _box(32)
    dens = np.zeros((32, 32, 2))
    dens[10:20, 12:18] = rng.standard_normal((10, 6, 2))
    mu = DiscreteMeasure(box, dens.reshape(-1, 2))
    u = mollify(mu, Mollifier(0.3))
    np.testing.assert_allclose(u.values.sum(axis=(0, 1)), dens.sum(axis=(0, 1)), atol=1e-10)


def test_margin_is_enforced():
    box = _box(32)
    mu = circle_measure(box, radius=1.8)
    assert support_margin(mu) == pytest.approx(0.2, abs=1e-3)
    with pytest.raises(ValueError, match="2 eps"):
        mollify(mu, Mollifier(0.2))


def test_circle_measure_is_divergence_free_and_has_length_2pi():
    box = _box(64)
    mu = circle_measure(box)
    assert mu.total_variation() == pytest.approx(2 * np.pi)
    np.testing.assert_allclose(mu.total(), 0.0, atol=1e-12)
    u = mollify(mu, Mollifier(0.4))
    rel = sobolev_norm(apply_operator(gallery.load("divergence2d"), u), -1) / sobolev_norm(u, 0)
    assert rel < 1e-2


def test_zero_measure_stays_zero():
    run = area_strict_run(gallery.load("divergence2d"), DiscreteMeasure.zero(_box(16), 2), [0.5])
    st_ = run.stages[0]
    assert np.all(st_.field.values == 0) and st_.area == pytest.approx(16.0)


def test_area_strict_run_diagnostics():
    box = _box(128)
    h = box.h[0]
    run = area_strict_run(gallery.load("divergence2d"), circle_measure(box), [16 * h, 8 * h])
    assert run.target_area == pytest.approx(16.0 + 2 * np.pi)
    a, b = run.stages
    assert b.area_error < a.area_error
    assert max(np.max(a.weak_errors), np.max(b.weak_errors)) < 2e-2
    assert a.residual < 1e-12 and b.residual < 1e-12
    # the corrected field is close to the mollified one (the target is div-free)
    assert b.representative_ratio < 5e-2
    rows = run.table()
    assert rows[0]["epsilon"] == pytest.approx(16 * h) and "weak_4" in rows[0]


def test_area_of_constant_field():
    w = TorusField.constant([3.0, 4.0], 8, 2, length=2.0)
    assert field_area(w) == pytest.approx(4.0 * np.sqrt(26))


def test_precheck_rejects_non_afree_target():
    box = _box(64)
    mu = DiscreteMeasure(box, np.zeros((box.ncells, 2)), [[0.0, 0.0]], [1.0], [[1.0, 0.0]])
    with pytest.raises(ValueError, match="free"):
        area_strict_run(gallery.load("divergence2d"), mu, [0.5])


def test_fiber_mismatch():
    with pytest.raises(OperatorError):
        area_strict_run(gallery.load("laplacian2d"), circle_measure(_box(16)), [0.5])


def test_drop_nyquist():
    u = TorusField.from_function(lambda x: np.cos(np.pi * 8 * x[..., 0]), 8, 2)
    v, removed = drop_nyquist(u)
    assert removed == pytest.approx(1.0) and np.max(np.abs(v.values)) < 1e-15


def test_disk_indicator_area():
    box = _box(128)
    chi = disk_indicator(box)
    assert chi.values.sum() * box.cell_volume == pytest.approx(np.pi, rel=1e-3)


def test_bgradient_recovers_potential():
    box = _box(128)
    h = box.h[0]
    opA, opB = gallery.load("divergence2d"), gallery.load("rotated_gradient")
    run = bgradient_run(opA, opB, circle_measure(box), [16 * h, 8 * h, 4 * h], potential=disk_indicator(box))
    errs = [s.potential_error for s in run.stages]
    assert errs[0] > errs[1] > errs[2]
    for s in run.stages:
        back = apply_operator(opB, s.potential)
        ref = s.field - s.field.mean()
        assert sobolev_norm(back - drop_nyquist(ref)[0], 0) <= 1e-9 * sobolev_norm(ref, 0)


def test_bgradient_requires_exact_pair():
    with pytest.raises(OperatorError, match="exact"):
        bgradient_run(gallery.load("divergence2d"), gallery.load("scalar_gradient_d2"), circle_measure(_box(32)), [0.5])
