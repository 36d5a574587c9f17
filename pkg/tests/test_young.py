import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from afree import gallery
from afree.integrands import IntegrandError, area, linear, norm, quadratic
from afree.spectral import TorusField
from afree.young import (
    Box,
    DiscreteMeasure,
    DiscreteYoungMeasure,
    area_functional,
    barycenter,
    barycenter_residual,
    bump,
    concentration_builder,
    divergence_flexibility,
    elementary,
    field_pairing,
    generation_estimate,
    integer_witness,
    jensen_certificate,
    pairing,
    shift,
)

E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
HALF = (np.full(2, 0.5), np.array([E1, -E1]))


def _triple(n=16, lam=1.0, nu=(np.ones(1), np.zeros((1, 2))), nu_inf=HALF, m=2):
    box = Box.unit(2, n)
    return DiscreteYoungMeasure.homogeneous(box, nu, DiscreteMeasure.scalar(box, np.full(box.ncells, lam)), nu_inf)


def test_box_geometry():
    box = Box(np.array([-1.0, 0.0]), np.array([1.0, 4.0]), (4, 8))
    assert box.cell_volume == pytest.approx(0.25) and box.volume == 8.0
    assert box.centers()[0].tolist() == [-0.75, 0.25]
    assert box.locate([[0.9, 3.9]])[0] == box.ncells - 1
    assert box.boundary_cells().sum() == 4 * 8 - 2 * 6
    with pytest.raises(ValueError):
        box.locate([[2.0, 0.0]])
    with pytest.raises(ValueError):
        Box(np.zeros(2), np.zeros(2), (2, 2))


def test_measure_validation():
    box = Box.unit(2, 4)
    with pytest.raises(ValueError, match="cells"):
        DiscreteMeasure(box, np.zeros((3, 2)))
    with pytest.raises(ValueError, match="positive"):
        DiscreteMeasure.scalar(box, np.zeros(16), [[0.5, 0.5]], [-1.0])
    with pytest.raises(ValueError, match="unit"):
        DiscreteMeasure(box, np.zeros((16, 2)), [[0.5, 0.5]], [1.0], [[2.0, 0.0]])
    with pytest.raises(ValueError, match="non-negative"):
        DiscreteMeasure.scalar(box, -np.ones(16))


def test_measure_totals_and_area():
    box = Box.unit(2, 4)
    mu = DiscreteMeasure(box, np.tile([3.0, 4.0], (16, 1)), [[0.5, 0.5]], [2.0], [[0.0, 1.0]])
    assert mu.total_variation() == pytest.approx(5.0 + 2.0)
    np.testing.assert_allclose(mu.total(), [3.0, 6.0])
    assert area_functional(mu) == pytest.approx(np.sqrt(26) + 2.0)
    np.testing.assert_allclose(mu.pair(lambda x: x[:, 0]), [1.5 + 0, 2.0 + 1.0])


def test_young_measure_validation():
    box = Box.unit(2, 2)
    lam = DiscreteMeasure.zero(box, 1)
    with pytest.raises(ValueError, match="sum to 1"):
        DiscreteYoungMeasure.homogeneous(box, (np.array([0.5]), np.zeros((1, 2))), lam, HALF)
    with pytest.raises(ValueError, match="unit"):
        DiscreteYoungMeasure.homogeneous(box, (np.ones(1), np.zeros((1, 2))),
                                         DiscreteMeasure.scalar(box, np.ones(4)), (np.ones(1), np.array([[2.0, 0]])))


def test_pairing_concentration_triple():
    ym = _triple()
    rep = pairing(norm(), ym)
    assert rep.value == pytest.approx(1.0) and rep.oscillation_part == 0.0
    assert pairing(area(), ym).value == pytest.approx(2.0)
    # a weight picks out half the box
    assert pairing(norm(), ym, lambda x: (x[:, 0] < 0.5).astype(float)).value == pytest.approx(0.5)


def test_pairing_needs_recession_when_lambda_charges():
    with pytest.raises(IntegrandError):
        pairing(quadratic(), _triple())
    assert pairing(quadratic(), _triple(lam=0.0, nu=(np.ones(1), np.array([[1.0, 1.0]])))).value == pytest.approx(2.0)


@given(arrays(float, 2, elements=st.floats(-3, 3)), st.floats(0.1, 5.0))
def test_pairing_of_linear_integrand_is_barycenter(c, lam):
    # for linear f, <<f, ym>> = f([ym](box)) by linearity
    nu = (np.array([0.25, 0.75]), np.array([[1.0, -2.0], [0.5, 0.0]]))
    nu_inf = (np.array([0.3, 0.7]), np.array([E1, E2]))
    ym = _triple(n=4, lam=lam, nu=nu, nu_inf=nu_inf)
    assert pairing(linear(c), ym).value == pytest.approx(float(barycenter(ym).total() @ c), abs=1e-10)


def test_elementary_pairing_equals_integral():
    box = Box.unit(2, 4)
    rng = np.random.default_rng(0)
    mu = DiscreteMeasure(box, rng.standard_normal((16, 2)), [[0.3, 0.6]], [1.5], [[0.6, 0.8]])
    f = area()
    ym = elementary(mu)
    assert pairing(f, ym).value == pytest.approx(area_functional(mu))
    b = barycenter(ym)
    np.testing.assert_allclose(b.density, mu.density)
    np.testing.assert_allclose(b.masses, mu.masses)


def test_shift_moves_oscillation_only():
    ym = shift(_triple(n=4), np.array([3.0, 4.0]))
    np.testing.assert_allclose(ym.means()[0], np.tile([3.0, 4.0], (16, 1)))
    assert pairing(norm(), ym).value == pytest.approx(6.0)


def test_in_y0():
    assert not _triple(n=4).in_y0()
    box = Box.unit(2, 4)
    dens = (~box.boundary_cells()).astype(float)
    ym = DiscreteYoungMeasure.homogeneous(box, (np.ones(1), np.zeros((1, 2))), DiscreteMeasure.scalar(box, dens), HALF)
    assert ym.in_y0()


def test_field_pairing_and_generation_of_constant_sequence():
    u = TorusField.constant([3.0, 4.0], 8, 2)
    assert field_pairing(norm(), u) == pytest.approx(5.0)
    est = generation_estimate([u, u, u], [norm(), area()])
    np.testing.assert_allclose(est.limits, [5.0, np.sqrt(26)])
    assert est.converged.all()


def test_generation_extrapolation_is_exact_for_one_over_j():
    # values 1 + 1/j are extrapolated exactly from the last two terms
    fields = [TorusField.constant([1.0 + 1.0 / j, 0.0], 8, 2) for j in (1, 2, 4, 8)]
    est = generation_estimate(fields, [norm()], scales=[1, 2, 4, 8])
    assert est.limits[0] == pytest.approx(1.0, abs=1e-14)


def test_certificate_on_concentration_triple():
    rep = jensen_certificate(_triple(), gallery.load("divergence2d"))
    assert rep.passed, rep.conditions
    assert {"norm()", "area()"} <= set(rep.family)


def test_certificate_laplacian_rejects_via_iii():
    ym = _triple(nu=(np.ones(1), np.zeros((1, 1))), nu_inf=(np.full(2, 0.5), np.array([[1.0], [-1.0]])))
    rep = jensen_certificate(ym, gallery.load("laplacian2d"))
    assert rep.failed() == ["iii"]


def test_certificate_oscillation_and_span_conditions():
    # a symmetric laminate between e1 and -e1 with no concentration is div-free
    nu = (np.full(2, 0.5), np.array([E1, -E1]))
    assert jensen_certificate(_triple(lam=0.0, nu=nu), gallery.load("divergence2d")).passed
    # W_A = span(e1) here, so concentration along e2 violates (iii) only
    op = gallery.load("second_component_gradient_d2")
    ym = _triple(lam=1.0, nu_inf=(np.full(2, 0.5), np.array([E2, -E2])))
    assert jensen_certificate(ym, op).failed() == ["iii"]


def test_certificate_rejects_jensen_violation():
    # -|.| is not quasiconvex: on the laminate it gives h(0) = 0 > -1 = <h, nu>
    ym = _triple(lam=0.0, nu=(np.full(2, 0.5), np.array([E1, -E1])))
    fam = [(-1.0 * norm(), "analytic")]
    rep = jensen_certificate(ym, gallery.load("divergence2d"), qc_family=fam)
    assert rep.failed() == ["ii"]


def test_barycenter_residual_detects_non_afree():
    box = Box.unit(2, 16)
    x = box.centers()
    dens = np.stack([np.sin(2 * np.pi * x[:, 0]), np.zeros(len(x))], axis=1)
    mu = DiscreteMeasure(box, dens)
    assert barycenter_residual(gallery.load("divergence2d"), mu) > 0.1
    assert barycenter_residual(gallery.load("curl2d"), mu) < 1e-12


def test_integer_witness():
    op = gallery.load("divergence2d")
    assert integer_witness(op, E1).tolist() == [0, 1]
    assert integer_witness(op, np.array([1.0, 1.0])).tolist() == [1, -1]
    with pytest.raises(Exception):
        integer_witness(gallery.load("second_component_gradient_d2"), E2)


def test_bump_is_smooth_and_compact():
    s = np.linspace(-1.5, 1.5, 301)
    b = bump(s)
    assert b[np.abs(s) >= 1].max() == 0 and b.max() == pytest.approx(np.exp(-1))


def test_concentration_builder_constant_lambda():
    run = concentration_builder(gallery.load("divergence2d"), np.zeros(2), None, HALF, n_stages=3)
    assert max(run.residual_after) < 1e-12
    est = generation_estimate(run.fields, [norm()], scales=run.scales)
    np.testing.assert_allclose(est.values[0], 1.0, rtol=1e-10)
    assert jensen_certificate(run.target, gallery.load("divergence2d")).passed


def test_concentration_builder_rejects_bad_p():
    op = gallery.load("divergence2d")
    with pytest.raises(ValueError, match="zero mean"):
        concentration_builder(op, np.zeros(2), None, (np.ones(1), E1[None]))
    with pytest.raises(Exception, match="wave cone"):
        concentration_builder(gallery.load("second_component_gradient_d2"), np.zeros(2), None,
                              (np.full(2, 0.5), np.array([E2, -E2])))


def test_divergence_flexibility():
    n = 128
    x = TorusField.zeros(n, 2, 1).coords()
    r = np.linalg.norm(x - 0.5, axis=-1)
    lam = TorusField(bump(r / 0.35)[..., None])
    p = (np.array([0.5, 0.5]), np.array([E1, E2 * 1.0]))
    res = divergence_flexibility(lam, p)
    assert res.residual < 1e-2
    assert res.certificate.passed, res.certificate.conditions
    # free-space and periodic solutions agree inside the window up to discretisation
    assert res.spectral_gap < 2e-2


def test_flexibility_requires_interior_support():
    lam = TorusField.constant(1.0, 16, 2)
    with pytest.raises(ValueError, match="boundary"):
        divergence_flexibility(lam, HALF)
