"""Discrete generalized Young measures.

A measure on a box is a per-cell density plus finitely many atoms; a Young
measure is a triple ``(nu, lambda, nu_inf)`` with atomic probabilities

* ``nu``: per cell, ``q`` weighted points in ``W``;
* ``lambda``: non-negative scalar density per cell plus non-negative atoms;
* ``nu_inf``: per cell and per lambda-atom, weighted points on the unit sphere of ``W``.

Cells are indexed row-major (``ij`` ordering) and every per-cell array has the
cell axis first.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .integrands import Integrand, IntegrandError, norm, area, tilde_transform, linear, upper_recession
from .operators import (
    LinearOperator,
    OperatorError,
    constant_rank_audit,
    projector,
    wave_cone_membership,
)
from .spectral import (
    TorusField,
    a_representative,
    apply_operator,
    sobolev_norm,
    symbol_grid,
)
from . import gallery

Weight = Optional[Callable[[np.ndarray], np.ndarray]]


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box split into ``shape`` uniform cells."""

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        shape = tuple(int(s) for s in np.broadcast_to(np.asarray(self.shape), lo.shape))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs lower < upper in every coordinate")
        if any(s < 1 for s in shape):
            raise ValueError("cell counts must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def unit(cls, d: int, n: int) -> "Box":
        return cls(np.zeros(d), np.ones(d), (n,) * d)

    @classmethod
    def for_field(cls, u: TorusField) -> "Box":
        """Cells centred on the grid nodes of ``u``."""
        off = np.full(u.d, -0.5 * u.h)
        return cls(off, off + u.length, (u.n,) * u.d)

    @property
    def d(self) -> int:
        return self.lower.size

    @property
    def ncells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def h(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def centers(self) -> np.ndarray:
        axes = [self.lower[i] + (np.arange(s) + 0.5) * self.h[i] for i, s in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def locate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.floor((x - self.lower) / self.h).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            raise ValueError("point outside the box")
        return np.ravel_multi_index(idx.T, self.shape)

    def boundary_cells(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.d, -1)
        hi = np.array(self.shape)[:, None] - 1
        return np.any((idx == 0) | (idx == hi), axis=0)

    def same_as(self, other: "Box") -> bool:
        return self.shape == other.shape and np.allclose(self.lower, other.lower) and np.allclose(self.upper, other.upper)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """``density * Lebesgue + sum_a mass_a direction_a delta_{x_a}`` on a box.

    ``density`` has shape ``(ncells, m)``; atom directions are unit vectors.
    Scalar non-negative measures use ``m = 1`` and direction ``+1``.
    """

    box: Box
    density: np.ndarray
    positions: np.ndarray = None
    masses: np.ndarray = None
    directions: np.ndarray = None

    def __post_init__(self):
        dens = np.asarray(self.density, dtype=float)
        if dens.ndim == 1:
            dens = dens[:, None]
        if dens.shape[0] != self.box.ncells:
            raise ValueError(f"density has {dens.shape[0]} cells, box has {self.box.ncells}")
        m = dens.shape[1]
        pos = np.zeros((0, self.box.d)) if self.positions is None else np.atleast_2d(np.asarray(self.positions, float))
        mass = np.zeros(0) if self.masses is None else np.asarray(self.masses, dtype=float).reshape(-1)
        if self.directions is None:
            dirs = np.zeros((mass.size, m))
            if m == 1:
                dirs[:] = 1.0
        else:
            dirs = np.asarray(self.directions, dtype=float).reshape(mass.size, m)
        if pos.shape[0] != mass.size:
            raise ValueError("atom positions and masses differ in length")
        if pos.size and pos.shape[1] != self.box.d:
            raise ValueError("atom positions have the wrong dimension")
        if np.any(mass <= 0):
            raise ValueError("atom masses must be positive")
        if mass.size and np.max(np.abs(np.linalg.norm(dirs, axis=1) - 1.0)) > 1e-12:
            raise ValueError("atom directions must be unit vectors")
        if pos.size:
            self.box.locate(pos)
        for name, v in (("density", dens), ("positions", pos), ("masses", mass), ("directions", dirs)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def dim(self) -> int:
        return self.density.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.masses.size

    @classmethod
    def zero(cls, box: Box, m: int) -> "DiscreteMeasure":
        return cls(box, np.zeros((box.ncells, m)))

    @classmethod
    def scalar(cls, box: Box, density, positions=None, masses=None) -> "DiscreteMeasure":
        dens = np.asarray(density, dtype=float).reshape(-1)
        if np.any(dens < 0):
            raise ValueError("scalar measure must be non-negative")
        return cls(box, dens[:, None], positions, masses)

    def total_variation(self) -> float:
        return float(np.sum(np.linalg.norm(self.density, axis=1)) * self.box.cell_volume + np.sum(self.masses))

    def total(self) -> np.ndarray:
        """``mu(box)`` as a vector."""
        return self.density.sum(axis=0) * self.box.cell_volume + self.masses @ self.directions

    def atom_cells(self) -> np.ndarray:
        return self.box.locate(self.positions) if self.n_atoms else np.zeros(0, dtype=int)

    def to_grid(self) -> np.ndarray:
        """Cell densities with every atom spread uniformly over its cell."""
        out = self.density.copy()
        if self.n_atoms:
            np.add.at(out, self.atom_cells(), (self.masses[:, None] * self.directions) / self.box.cell_volume)
        return out

    def pair(self, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``int phi dmu`` for a scalar test function ``phi``."""
        v = self.box.cell_volume * (phi(self.box.centers())[:, None] * self.density).sum(axis=0)
        if self.n_atoms:
            v = v + (phi(self.positions) * self.masses) @ self.directions
        return v


def area_functional(mu: DiscreteMeasure) -> float:
    """``int sqrt(1 + |ac mu|^2) dx + |mu^s|(box)``."""
    ac = np.sqrt(1.0 + np.sum(mu.density**2, axis=1))
    return float(ac.sum() * mu.box.cell_volume + mu.masses.sum())


# --------------------------------------------------------------------------
# Young measures
# --------------------------------------------------------------------------


def _prob(weights, points, n, m, what):
    w = np.asarray(weights, dtype=float)
    p = np.asarray(points, dtype=float)
    if w.ndim == 1:
        w = np.broadcast_to(w, (n, w.size)).copy()
    if p.ndim == 2:
        p = np.broadcast_to(p, (n,) + p.shape).copy()
    if w.shape[0] != n or p.shape[:2] != w.shape or p.shape[2] != m:
        raise ValueError(f"{what}: expected weights (n, q) and points (n, q, {m}) with n={n}")
    if np.any(w < -1e-15):
        raise ValueError(f"{what}: negative weights")
    if w.size and np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError(f"{what}: weights must sum to 1")
    return w, p


@dataclass(frozen=True, eq=False)
class DiscreteYoungMeasure:
    box: Box
    nu_weights: np.ndarray
    nu_points: np.ndarray
    lam: DiscreteMeasure
    inf_weights: np.ndarray
    inf_points: np.ndarray
    atom_inf_weights: np.ndarray = None
    atom_inf_points: np.ndarray = None

    def __post_init__(self):
        n = self.box.ncells
        pts = np.asarray(self.nu_points, dtype=float)
        m = pts.shape[-1]
        w, p = _prob(self.nu_weights, pts, n, m, "nu")
        if self.lam.dim != 1 or not self.lam.box.same_as(self.box):
            raise ValueError("lambda must be a scalar measure on the same box")
        if np.any(self.lam.density < 0):
            raise ValueError("lambda density must be non-negative")
        wi, pi = _prob(self.inf_weights, self.inf_points, n, m, "nu_inf")
        na = self.lam.n_atoms
        if self.atom_inf_weights is None:
            wa, pa = np.ones((na, 1)), np.tile(pi[:1, :1], (na, 1, 1)) if na else np.zeros((0, 1, m))
            if na:
                raise ValueError("lambda has atoms but no nu_inf was given at them")
        else:
            wa, pa = _prob(self.atom_inf_weights, self.atom_inf_points, na, m, "nu_inf at atoms")
        for what, ww, pp, sites in (("cells", wi, pi, self.lam.density[:, 0] > 0), ("atoms", wa, pa, None)):
            nrm = np.linalg.norm(pp, axis=-1)
            bad = np.abs(nrm - 1.0) > 1e-10
            if sites is not None:
                bad &= sites[:, None]
            if np.any(bad & (ww > 0)):
                raise ValueError(f"nu_inf support points must be unit vectors ({what})")
        for name, v in (("nu_weights", w), ("nu_points", p), ("inf_weights", wi), ("inf_points", pi),
                        ("atom_inf_weights", wa), ("atom_inf_points", pa)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def dim(self) -> int:
        return self.nu_points.shape[-1]

    @classmethod
    def homogeneous(cls, box: Box, nu, lam: DiscreteMeasure, nu_inf, atom_nu_inf=None) -> "DiscreteYoungMeasure":
        """Same ``nu`` in every cell, same ``nu_inf`` at every lambda-site.

        ``nu`` and ``nu_inf`` are ``(weights, points)`` pairs.
        """
        n = box.ncells
        w, p = (np.atleast_1d(np.asarray(a, dtype=float)) for a in nu)
        wi, pi = (np.atleast_1d(np.asarray(a, dtype=float)) for a in nu_inf)
        p, pi = p.reshape(w.size, -1), pi.reshape(wi.size, -1)
        if atom_nu_inf is None and lam.n_atoms:
            atom_nu_inf = (wi, pi)
        aw = ap = None
        if lam.n_atoms:
            aw_, ap_ = (np.atleast_1d(np.asarray(a, dtype=float)) for a in atom_nu_inf)
            ap_ = ap_.reshape(aw_.size, -1)
            aw, ap = np.tile(aw_, (lam.n_atoms, 1)), np.tile(ap_, (lam.n_atoms, 1, 1))
        return cls(box, np.tile(w, (n, 1)), np.tile(p, (n, 1, 1)), lam, np.tile(wi, (n, 1)), np.tile(pi, (n, 1, 1)),
                   aw, ap)

    def means(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``<id, nu_x>`` per cell, ``<id, nu_inf>`` per cell and per atom."""
        a = np.einsum("nq,nqm->nm", self.nu_weights, self.nu_points)
        b = np.einsum("nq,nqm->nm", self.inf_weights, self.inf_points)
        c = np.einsum("nq,nqm->nm", self.atom_inf_weights, self.atom_inf_points)
        return a, b, c

    def in_y0(self) -> bool:
        """``lambda`` charges no boundary cell (atoms strictly interior)."""
        if np.any(self.lam.density[self.box.boundary_cells(), 0] > 0):
            return False
        return not np.any(self.box.boundary_cells()[self.lam.atom_cells()])


@dataclass
class PairingReport:
    value: float
    oscillation_part: float
    concentration_part: float
    integrand: str


def _weight(phi: Weight, x: np.ndarray) -> np.ndarray:
    return np.ones(x.shape[0]) if phi is None else np.asarray(phi(x), dtype=float).reshape(-1)


def pairing(f: Integrand, ym: DiscreteYoungMeasure, weight: Weight = None) -> PairingReport:
    """``int phi <f, nu_x> dx + int phi <f^inf, nu_inf_x> dlambda``."""
    box = ym.box
    x = box.centers()
    phi = _weight(weight, x)
    osc = float(np.sum(phi * np.sum(ym.nu_weights * f(ym.nu_points), axis=1)) * box.cell_volume)
    lam = ym.lam
    conc = 0.0
    if np.any(lam.density > 0) or lam.n_atoms:
        if not f.has_recession:
            raise IntegrandError(f"{f.label} has no recession function but lambda is nonzero")
        dens = lam.density[:, 0]
        sites = dens > 0
        if np.any(sites):
            rec = np.sum(ym.inf_weights[sites] * f.recession_value(ym.inf_points[sites]), axis=1)
            conc += float(np.sum(phi[sites] * dens[sites] * rec) * box.cell_volume)
        if lam.n_atoms:
            rec = np.sum(ym.atom_inf_weights * f.recession_value(ym.atom_inf_points), axis=1)
            conc += float(np.sum(_weight(weight, lam.positions) * lam.masses * rec))
    return PairingReport(osc + conc, osc, conc, f.label)


def barycenter(ym: DiscreteYoungMeasure, tol: float = 1e-14) -> DiscreteMeasure:
    """``<id, nu> L^d + <id, nu_inf> lambda`` as a discrete measure."""
    a, b, c = ym.means()
    dens = a + ym.lam.density[:, :1] * b
    lam = ym.lam
    if lam.n_atoms:
        vec = lam.masses[:, None] * c
        mag = np.linalg.norm(vec, axis=1)
        keep = mag > tol * np.maximum(lam.masses, 1.0)
        return DiscreteMeasure(ym.box, dens, lam.positions[keep], mag[keep], vec[keep] / mag[keep, None])
    return DiscreteMeasure(ym.box, dens)


def elementary(mu: DiscreteMeasure) -> DiscreteYoungMeasure:
    """``delta_mu = (delta_{ac mu}, |mu^s|, delta_{g_mu})``."""
    n, m = mu.box.ncells, mu.dim
    lam = DiscreteMeasure.scalar(mu.box, np.zeros(n), mu.positions, mu.masses)
    e1 = np.zeros(m)
    e1[0] = 1.0
    return DiscreteYoungMeasure(
        mu.box,
        np.ones((n, 1)),
        mu.density[:, None, :].copy(),
        lam,
        np.ones((n, 1)),
        np.tile(e1, (n, 1, 1)),
        np.ones((mu.n_atoms, 1)),
        mu.directions[:, None, :].copy(),
    )


def shift(ym: DiscreteYoungMeasure, v) -> DiscreteYoungMeasure:
    """Translate every ``nu_x`` support point by ``v(x)``; ``lambda`` and ``nu_inf`` unchanged."""
    v = np.asarray(v, dtype=float)
    v = np.broadcast_to(v, (ym.box.ncells, ym.dim)) if v.ndim == 1 else v.reshape(ym.box.ncells, ym.dim)
    return DiscreteYoungMeasure(ym.box, ym.nu_weights, ym.nu_points + v[:, None, :], ym.lam, ym.inf_weights,
                                ym.inf_points, ym.atom_inf_weights, ym.atom_inf_points)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


@dataclass
class GenerationEstimate:
    scales: np.ndarray
    values: np.ndarray  # (n_tests, n_fields)
    limits: np.ndarray  # extrapolated
    error_bars: np.ndarray
    converged: np.ndarray
    labels: list


def _values_of(u) -> tuple[np.ndarray, Box]:
    if isinstance(u, TorusField):
        return u.values.reshape(-1, u.fiber), Box.for_field(u)
    vals, box = u
    return np.asarray(vals, dtype=float).reshape(box.ncells, -1), box


def field_pairing(f: Integrand, u, weight: Weight = None) -> float:
    """``int phi f(w)`` for an absolutely continuous ``w L^d`` (a TorusField or ``(values, box)``)."""
    vals, box = _values_of(u)
    return float(np.sum(_weight(weight, box.centers()) * f(vals)) * box.cell_volume)


def generation_estimate(
    fields: Sequence,
    tests: Sequence,
    scales: Optional[Sequence[float]] = None,
    rel_tol: float = 1e-2,
) -> GenerationEstimate:
    """Pairings ``<<f, delta_{w_j}>>`` along a sequence plus tail extrapolation.

    ``tests`` holds integrands or ``(integrand, weight)`` pairs.  The limit is
    Richardson-extrapolated from the last two terms assuming an ``O(1/j)``
    error (``scales`` are the ``j``, doubling by default); the error bar is the
    spread of the last three values.  A test is flagged not converged when its
    tail is non-monotone and the spread exceeds ``rel_tol`` relative.
    """
    if not fields:
        raise ValueError("empty field sequence")
    tests = [t if isinstance(t, tuple) else (t, None) for t in tests]
    for f, _ in tests:
        if not f.has_recession:
            raise IntegrandError(f"{f.label} has no analytic recession")
    n = len(fields)
    scales = np.asarray(scales if scales is not None else 2.0 ** np.arange(n), dtype=float)
    vals = np.array([[field_pairing(f, u, phi) for u in fields] for f, phi in tests])
    limits, bars, conv = [], [], []
    for v in vals:
        if n >= 2:
            r = scales[-1] / scales[-2]
            lim = (r * v[-1] - v[-2]) / (r - 1.0)
        else:
            lim = v[-1]
        tail = v[-3:]
        spread = float(tail.max() - tail.min())
        d = np.diff(tail)
        monotone = bool(np.all(d >= 0) or np.all(d <= 0))
        limits.append(lim)
        bars.append(spread)
        conv.append(monotone or spread <= rel_tol * max(abs(lim), 1e-300))
    return GenerationEstimate(scales, vals, np.array(limits), np.array(bars), np.array(conv),
                              [f.label for f, _ in tests])


# --------------------------------------------------------------------------
# certificate
# --------------------------------------------------------------------------


@dataclass
class ConditionResult:
    passed: bool
    worst: float
    where: Optional[str] = None
    detail: str = ""


@dataclass
class CertificateReport:
    conditions: dict
    family: list
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def failed(self) -> list:
        return [k for k, c in self.conditions.items() if not c.passed]


def default_family(op: LinearOperator, span=None) -> list:
    """Convex integrands with analytic recessions and their tilde projections."""
    m = op.dim_in
    if span is None:
        span = constant_rank_audit(op, 256).span_basis
    fam = [(norm(), "analytic"), (area(), "analytic")]
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        fam += [(linear(e), "analytic"), (linear(-e), "analytic")]
    fam += [(tilde_transform(norm(), span, m), "analytic"), (tilde_transform(area(), span, m), "analytic")]
    return fam


def _recession_sharp(h: Integrand, pts: np.ndarray) -> np.ndarray:
    if h.has_recession:
        return h.recession_value(pts)
    flat = pts.reshape(-1, pts.shape[-1])
    return np.array([upper_recession(h, p) for p in flat]).reshape(pts.shape[:-1])


def barycenter_residual(op: LinearOperator, mu: DiscreteMeasure, window: Optional[TorusField] = None) -> float:
    """``||A mu||_{-k} / ||mu||_0`` with ``mu`` read as a periodic grid field.

    With a ``window`` (smooth cutoff) the numerator becomes ``||chi A mu||_{-k}``
    and the denominator ``||chi mu||_0``, for measures that are not periodic.
    """
    box = mu.box
    n = box.shape[0]
    if any(s != n for s in box.shape) or not np.allclose(box.h, box.h[0]) or n & (n - 1):
        raise ValueError("barycenter residual needs a cubic box with a power-of-two grid")
    u = TorusField(mu.to_grid().reshape(box.shape + (mu.dim,)), float(box.upper[0] - box.lower[0]))
    if window is not None:
        scale = sobolev_norm(TorusField(window.values * u.values, u.length), 0.0)
        res = windowed_residual(op, u, window)
    else:
        scale = sobolev_norm(u, 0.0)
        res = apply_operator(op, u)
    if scale == 0.0:
        return 0.0
    return sobolev_norm(res, -op.order) / scale


def jensen_certificate(
    ym: DiscreteYoungMeasure,
    op: LinearOperator,
    qc_family: Optional[Sequence] = None,
    tol: float = 1e-8,
    numeric_tol: float = 5e-2,
    residual_tol: float = 1e-8,
    span_tol: float = 1e-8,
    window: Optional[TorusField] = None,
) -> CertificateReport:
    """Sampled check of the three conditions characterising A-free Young measures.

    (i)   the barycenter is A-free (spectral residual on the torus embedding);
    (ii)  ``h(ac[nu](x)) <= <h, nu_x> + <h^#, nu_inf_x> ac lambda(x)`` per cell,
          for every family member ``h`` (slack ``numeric_tol`` for members
          flagged ``"numeric"``);
    (iii) every ``nu_inf`` support point at a lambda-site (density cells and
          atoms) lies in ``W_A``.

    Passing is sound for the family supplied, not a proof of membership.
    ``window`` switches (i) to the windowed residual for non-periodic data.
    """
    if op.dim_in != ym.dim:
        raise OperatorError(f"{op.name} acts on R^{op.dim_in}, Young measure lives in R^{ym.dim}")
    audit = constant_rank_audit(op, 256)
    span = audit.span_basis
    if qc_family is None:
        qc_family = default_family(op, span)
    qc_family = [h if isinstance(h, tuple) else (h, "analytic") for h in qc_family]
    if not qc_family:
        raise ValueError("empty integrand family")
    conds = {}

    bar = barycenter(ym)
    res = barycenter_residual(op, bar, window)
    conds["i"] = ConditionResult(res <= residual_tol, res, None, "relative A-residual of the barycenter")

    a, b, _ = ym.means()
    lamd = ym.lam.density[:, 0]
    ac = a + lamd[:, None] * b
    worst, where = -np.inf, None
    for h, flag in qc_family:
        slack = numeric_tol if flag == "numeric" else tol
        lhs = h(ac)
        rhs = np.sum(ym.nu_weights * h(ym.nu_points), axis=1)
        sites = lamd > 0
        if np.any(sites):
            rhs[sites] += lamd[sites] * np.sum(ym.inf_weights[sites] * _recession_sharp(h, ym.inf_points[sites]), axis=1)
        i = int(np.argmax(lhs - rhs))
        if lhs[i] - rhs[i] - slack > worst:
            worst, where = float(lhs[i] - rhs[i] - slack), f"{h.label} at cell {i}"
    conds["ii"] = ConditionResult(worst <= 0.0, worst, where, "max of h(ac) - rhs - slack")

    p = projector(span, ym.dim) if span.shape[0] else np.zeros((ym.dim, ym.dim))
    worst3, where3 = 0.0, None
    cells = np.flatnonzero(lamd > 0)
    if cells.size:
        pts = ym.inf_points[cells]
        dist = np.linalg.norm(pts - pts @ p, axis=-1) * (ym.inf_weights[cells] > 0)
        k = np.unravel_index(int(np.argmax(dist)), dist.shape)
        worst3, where3 = float(dist[k]), f"cell {cells[k[0]]}"
    if ym.lam.n_atoms:
        pts = ym.atom_inf_points
        dist = np.linalg.norm(pts - pts @ p, axis=-1) * (ym.atom_inf_weights > 0)
        k = np.unravel_index(int(np.argmax(dist)), dist.shape)
        if dist[k] > worst3:
            worst3, where3 = float(dist[k]), f"atom {k[0]}"
    conds["iii"] = ConditionResult(worst3 <= span_tol, worst3, where3, f"distance to W_A (dim {span.shape[0]})")
    notes = [] if ym.in_y0() else ["lambda charges boundary cells (triple not in the Y0 class)"]
    return CertificateReport(conds, [h.label for h, _ in qc_family], notes)


# --------------------------------------------------------------------------
# constructions
# --------------------------------------------------------------------------


def bump(s: np.ndarray) -> np.ndarray:
    """Smooth bump ``exp(-1/(1 - s^2))`` on ``|s| < 1``, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def spike(t: np.ndarray, width: float) -> np.ndarray:
    """1-periodic non-negative spike of the given width (fraction of a period), centred at integers."""
    u = (t + 0.5) % 1.0 - 0.5
    return bump(2.0 * u / width)


def integer_witness(op: LinearOperator, P, bound: int = 8, tol: float = 1e-10) -> np.ndarray:
    """Integer ``xi`` with ``A(xi) P = 0``: smallest sup-norm, first nonzero entry positive."""
    P = np.asarray(P, dtype=float)
    for r in range(1, bound + 1):
        for xi in itertools.product(range(-r, r + 1), repeat=op.d):
            xi = np.array(xi)
            nz = xi[xi != 0]
            if np.max(np.abs(xi)) != r or nz[0] < 0:
                continue
            m = op.real_symbol(xi.astype(float))
            if np.linalg.norm(m @ P) <= tol * np.linalg.norm(m) * np.linalg.norm(P):
                return xi
    raise OperatorError(f"no integer direction with |xi|_inf <= {bound} annihilates {P.tolist()}")


@dataclass
class ConcentrationRun:
    scales: list
    fields: list
    residual_before: list
    residual_after: list
    witnesses: list
    target: DiscreteYoungMeasure = None


def _lambda_density(lambda_spec, x: np.ndarray, j: float) -> np.ndarray:
    """Density of the stage-``j`` approximation of ``lambda`` at points ``x`` (shape ``(..., d)``)."""
    if lambda_spec is None or (np.isscalar(lambda_spec) and float(lambda_spec) == 1.0):
        return np.ones(x.shape[:-1])
    if callable(lambda_spec):
        return np.asarray(lambda_spec(x), dtype=float)
    if np.isscalar(lambda_spec):
        return np.full(x.shape[:-1], float(lambda_spec))
    # atom list [(position, mass), ...]: periodic Gaussians of width ~ j^(-1/2)
    sigma = 0.1 / np.sqrt(j)
    out = np.zeros(x.shape[:-1])
    d = x.shape[-1]
    for pos, mass in lambda_spec:
        diff = (x - np.asarray(pos, dtype=float) + 0.5) % 1.0 - 0.5
        out += mass * np.exp(-np.sum(diff**2, axis=-1) / (2 * sigma**2)) / (2 * np.pi * sigma**2) ** (d / 2)
    return out


def concentration_builder(
    op: LinearOperator,
    A,
    lambda_spec,
    p: tuple,
    n_stages: int = 3,
    j0: int = 2,
    grid: Optional[Callable[[int], int]] = None,
    mean_tol: float = 1e-10,
) -> ConcentrationRun:
    """Fields on the unit torus generating ``(delta_A, lambda, p)``.

    ``p = (weights, points)`` must be a zero-mean probability on unit vectors of
    the wave cone.  Stage ``j`` (``j = j0, 2 j0, ...``) places, for each atom
    ``(c_i, P_i)``, the plane-wave packet ``c_i lambda(x) P_i s_j(j xi_i.x + i/n)``
    where ``s_j`` is a spike of width ``1/j`` and unit mean and ``xi_i`` an
    integer wave-cone witness.  The commutator defect caused by a non-constant
    ``lambda`` is reported and then removed by subtracting ``T[w]``.
    """
    A = np.asarray(A, dtype=float).reshape(op.dim_in)
    weights, points = (np.asarray(v, dtype=float) for v in p)
    points = points.reshape(weights.size, op.dim_in)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("p must be a probability")
    if np.linalg.norm(weights @ points) > mean_tol:
        raise ValueError(f"p must have zero mean, got {weights @ points}")
    witnesses = []
    for P in points:
        mem = wave_cone_membership(op, P)
        if not mem.member:
            raise OperatorError(f"{P.tolist()} is outside the wave cone of {op.name} (residual {mem.residual:.2e})")
        witnesses.append(integer_witness(op, P))
    grid = grid or (lambda j: max(64, 4 * j * j * max(int(np.max(np.abs(witnesses))) if witnesses else 1, 1)))
    run = ConcentrationRun([], [], [], [], witnesses)
    nat = weights.size
    j = j0
    for _ in range(n_stages):
        n = grid(j)
        n = 1 << int(np.ceil(np.log2(n)))
        x = TorusField.zeros(n, op.d, 1).coords()
        lam = _lambda_density(lambda_spec, x, j)
        vals = np.broadcast_to(A, x.shape[:-1] + (op.dim_in,)).copy()
        for i, (c, P, xi) in enumerate(zip(weights, points, witnesses)):
            if c == 0:
                continue
            s = spike(j * (x @ xi) + i / nat, 1.0 / j)
            s /= s.mean()
            vals += c * (lam * s)[..., None] * P
        w = TorusField(vals)
        before = sobolev_norm(apply_operator(op, w), -op.order) / max(sobolev_norm(w, 0.0), 1e-300)
        w = w - a_representative(op, w)
        after = sobolev_norm(apply_operator(op, w), -op.order) / max(sobolev_norm(w, 0.0), 1e-300)
        run.scales.append(j)
        run.fields.append(w)
        run.residual_before.append(before)
        run.residual_after.append(after)
        j *= 2
    box = Box.unit(op.d, 16)
    cells = box.centers()
    lam_meas = _target_lambda(lambda_spec, box, cells)
    run.target = DiscreteYoungMeasure.homogeneous(box, (np.ones(1), A[None]), lam_meas, (weights, points))
    return run


def _target_lambda(lambda_spec, box: Box, cells) -> DiscreteMeasure:
    if lambda_spec is None or np.isscalar(lambda_spec):
        c = 1.0 if lambda_spec is None else float(lambda_spec)
        return DiscreteMeasure.scalar(box, np.full(box.ncells, c))
    if callable(lambda_spec):
        return DiscreteMeasure.scalar(box, lambda_spec(cells))
    pos = [a for a, _ in lambda_spec]
    mass = [m for _, m in lambda_spec]
    return DiscreteMeasure.scalar(box, np.zeros(box.ncells), pos, mass)


# --------------------------------------------------------------------------
# divergence flexibility
# --------------------------------------------------------------------------


def divergence_kernel(n: int, d: int, h: float, core: float = 2.0, near: int = 4, sub: int = 16) -> np.ndarray:
    """Discrete ``Phi(x) = x / (|S^{d-1}| |x|^d)`` on offsets ``-(n-1)h .. (n-1)h``.

    ``div Phi = delta``.  Plain point samples are used for ``|x| >= core h``.
    Inside that radius the point values are replaced by cell averages of
    ``Phi`` (midpoint rule with ``sub^d`` points per cell) on the
    ``(2 near + 1)^d`` block around the origin; the origin cell averages to
    zero by oddness.  ``near = 0`` gives the bare exclusion stencil.
    """
    sphere = {2: 2 * np.pi, 3: 4 * np.pi}[d]
    k = np.arange(-(n - 1), n) * h
    x = np.stack(np.meshgrid(*([k] * d), indexing="ij"), axis=-1)
    r = np.linalg.norm(x, axis=-1)
    out = np.zeros(x.shape)
    ok = r >= core * h
    out[ok] = x[ok] / (sphere * r[ok, None] ** d)
    if near > 0:
        t = ((np.arange(sub) + 0.5) / sub - 0.5) * h
        s = np.stack(np.meshgrid(*([t] * d), indexing="ij"), axis=-1).reshape(-1, d)
        c = n - 1
        for off in itertools.product(range(-near, near + 1), repeat=d):
            y = np.asarray(off) * h + s
            ry = np.linalg.norm(y, axis=1)
            out[tuple(c + o for o in off)] = (y / (sphere * ry[:, None] ** d)).mean(axis=0)
    return out


def _linear_convolve(f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Linear (non-periodic) convolution of an ``n^d`` array with a ``(2n-1)^d`` kernel, cropped to ``n^d``."""
    n = f.shape[0]
    full = fftconvolve(f, kernel, mode="full")
    return full[tuple(slice(n - 1, 2 * n - 1) for _ in range(f.ndim))]


def _transition(t: np.ndarray) -> np.ndarray:
    """Smooth step: 0 for ``t <= 0``, 1 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    a = np.where(t > 0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    return a / (a + b)


def plateau_window(n: int, d: int, inner: tuple, outer: tuple, length: float = 1.0) -> TorusField:
    """Smooth cutoff equal to 1 on the cube ``[inner]^d`` and 0 outside ``[outer]^d`` (grid coordinates)."""
    x = np.arange(n, dtype=float)
    (a, b), (lo, hi) = inner, outer
    prof = _transition((x - lo) / max(a - lo, 1e-12)) * _transition((hi - x) / max(hi - b, 1e-12))
    vals = np.ones((n,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        vals = vals * prof.reshape(shape)
    return TorusField(vals[..., None], length)


def support_window(u: TorusField, pad: int = 2, edge: int = 1, tol: float = 1e-12) -> TorusField:
    """Plateau window containing the support of ``u`` and vanishing at the box edge."""
    mag = np.linalg.norm(u.values, axis=-1)
    idx = np.argwhere(mag > tol * max(mag.max(), 1e-300))
    if idx.size == 0:
        return TorusField.constant(1.0, u.n, u.d, u.length)
    a = max(int(idx.min()) - pad, edge + 1)
    b = min(int(idx.max()) + pad, u.n - edge - 2)
    return plateau_window(u.n, u.d, (a, b), (edge, u.n - 1 - edge), u.length)


def windowed_residual(op: LinearOperator, u: TorusField, window: TorusField) -> TorusField:
    """``chi A u`` for a first-order ``A``, computed as ``A(chi u) - sum_j A_j (d_j chi) u``.

    Only ``chi u`` is differentiated spectrally, so a non-periodic ``u`` is fine
    as long as it is smooth where ``chi > 0``.
    """
    if op.order != 1:
        raise OperatorError("windowed residual is implemented for first-order operators")
    chi = window.values
    au = apply_operator(op, TorusField(chi * u.values, u.length)).values
    dchi = apply_operator(gallery.scalar_gradient(op.d), window).values
    for alpha, mat in op.terms:
        j = int(np.argmax(alpha.entries))
        au = au - dchi[..., j : j + 1] * (u.values @ np.asarray(mat).T)
    return TorusField(au, u.length)


@dataclass
class FlexibilityResult:
    w: TorusField
    triple: DiscreteYoungMeasure
    certificate: CertificateReport
    residual: float
    spectral_gap: float
    window: TorusField = field(repr=False, default=None)


def divergence_flexibility(lam: TorusField, p: tuple, near: int = 4, residual_tol: float = 1e-2,
                           margin: int = 2) -> FlexibilityResult:
    """Field ``w`` making ``(delta_w, lambda, p)`` a divergence-free triple.

    ``w = -(<id,p> . D lambda) * Phi`` with the fundamental solution ``Phi`` of
    the divergence, evaluated as a linear (free-space) convolution.  Because
    ``w`` is not periodic, residuals are measured through a smooth window
    ``chi`` equal to 1 on the support of ``lambda``:

    * ``residual``: ``max |chi div(w + <id,p> lambda)| / max |<id,p>.D lambda|``;
    * ``spectral_gap``: relative L2 distance between ``chi div w`` and
      ``chi div w_ref``, where ``w_ref = grad Delta^{-1}(-<id,p>.D lambda)`` is
      the periodic spectral solution.
    """
    d = lam.d
    if d not in (2, 3) or lam.fiber != 1:
        raise ValueError("lambda must be a scalar field in d = 2 or 3")
    vals = lam.values[..., 0]
    if np.any(vals < 0):
        raise ValueError("lambda must be non-negative")
    edge = np.zeros(vals.shape, dtype=bool)
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = np.r_[0:margin, vals.shape[ax] - margin : vals.shape[ax]]
        edge[tuple(sl)] = True
    if np.any(vals[edge] > 1e-12 * max(vals.max(), 1e-300)):
        raise ValueError("lambda must vanish near the box boundary")
    weights, points = (np.asarray(v, dtype=float) for v in p)
    points = points.reshape(weights.size, d)
    v = weights @ points
    div = gallery.divergence(d)
    grad = gallery.scalar_gradient(d)
    src = -(apply_operator(grad, lam).values @ v)  # -<id,p>.D lambda
    ker = divergence_kernel(lam.n, d, lam.h, near=near)
    w = np.stack([_linear_convolve(src, ker[..., i]) * lam.h**d for i in range(d)], axis=-1)
    wf = TorusField(w, lam.length)
    chi = support_window(lam, pad=max(2, lam.n // 32), edge=margin - 1)
    scale = float(np.max(np.abs(src)))
    if scale == 0.0:
        residual = gap = 0.0
    else:
        b = wf + TorusField(vals[..., None] * v, lam.length)
        residual = float(np.max(np.abs(windowed_residual(div, b, chi).values))) / scale
        wref = apply_operator(grad, _inverse_laplacian(TorusField(src[..., None], lam.length)))
        r1 = windowed_residual(div, wf, chi).values
        r2 = chi.values * apply_operator(div, wref).values
        gap = float(np.linalg.norm(r1 - r2) / max(np.linalg.norm(r2), 1e-300))
    box = Box.for_field(lam)
    lam_meas = DiscreteMeasure.scalar(box, vals.reshape(-1))
    n = box.ncells
    triple = DiscreteYoungMeasure(
        box, np.ones((n, 1)), w.reshape(n, 1, d), lam_meas,
        np.tile(weights, (n, 1)), np.tile(points, (n, 1, 1)),
    )
    cert = jensen_certificate(triple, div, residual_tol=residual_tol, window=chi)
    return FlexibilityResult(wf, triple, cert, residual, gap, chi)


def _inverse_laplacian(f: TorusField) -> TorusField:
    s = symbol_grid(gallery.laplacian(f.d), f.n, f.length)[..., 0, 0]
    inv = np.zeros_like(s)
    nz = np.abs(s) > 0
    inv[nz] = 1.0 / s[nz]
    return TorusField.from_fourier(f.fourier() * inv[..., None], f.length)
