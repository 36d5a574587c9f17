"""Cell problem for the A-quasiconvex envelope and related checks.

Test fields are truncated trigonometric polynomials that are A-free by
construction.  For each frequency ``xi`` in a half-set of
``{0 < |xi|_inf <= K}`` a real orthonormal basis ``B_xi`` of ``ker A(xi)`` is
fixed once (symbols of homogeneous operators are a scalar times a real matrix,
so the kernel has a real basis), and

    w(x) = sum_xi sqrt(2) B_xi (a_xi cos(2 pi x.xi) + b_xi sin(2 pi x.xi)).

The map ``p = (a, b) -> w`` is an isometry from ``R^P`` into mean-square
fields, so the "reduced coordinates" are orthonormal Fourier coordinates.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .integrands import Integrand, IntegrandError
from .operators import LinearOperator, OperatorError, kernel_basis, sphere_samples
from .spectral import TorusField, require_constant_rank

log = logging.getLogger(__name__)


def half_frequencies(d: int, K: int) -> np.ndarray:
    """Integer ``xi`` with ``0 < |xi|_inf <= K`` whose first nonzero entry is positive."""
    out = []
    for xi in itertools.product(range(-K, K + 1), repeat=d):
        nz = [c for c in xi if c != 0]
        if nz and nz[0] > 0:
            out.append(xi)
    out.sort(key=lambda v: (max(abs(c) for c in v), v))
    return np.array(out, dtype=int).reshape(-1, d)


class CellBasis:
    """Dense synthesis matrix ``G`` of A-free trigonometric fields on an ``N^d`` grid."""

    def __init__(self, op: LinearOperator, K: int, n: int):
        if n <= 2 * K:
            raise ValueError(f"grid N={n} cannot resolve frequencies up to K={K} (need N > 2K)")
        self.op, self.K, self.n = op, K, n
        freqs = half_frequencies(op.d, K)
        blocks, labels = [], []
        for xi in freqs:
            kb = kernel_basis(op.real_symbol(xi.astype(float)))  # rows
            for v in kb:
                blocks.append((xi, v))
        self.freqs = freqs
        self.modes = blocks
        x = np.arange(n) / n
        grid = np.stack(np.meshgrid(*([x] * op.d), indexing="ij"), axis=-1).reshape(-1, op.d)
        m = op.dim_in
        cols = []
        for xi, v in blocks:
            ph = 2.0 * np.pi * grid @ xi
            cols.append((np.sqrt(2.0) * np.cos(ph)[:, None] * v).reshape(-1))
            labels.append((tuple(xi), "cos"))
        for xi, v in blocks:
            ph = 2.0 * np.pi * grid @ xi
            cols.append((np.sqrt(2.0) * np.sin(ph)[:, None] * v).reshape(-1))
            labels.append((tuple(xi), "sin"))
        self.labels = labels
        self.G = np.array(cols).T if cols else np.zeros((grid.shape[0] * m, 0))
        self.n_points = grid.shape[0]
        self.dim = m

    @property
    def size(self) -> int:
        return self.G.shape[1]

    def synthesize(self, p) -> np.ndarray:
        """Grid values ``(n_points, m)`` of the field with coordinates ``p``."""
        return (self.G @ p).reshape(self.n_points, self.dim)

    def analyze(self, w: np.ndarray) -> np.ndarray:
        """Orthogonal projection of grid values onto the span, as coordinates."""
        return self.G.T @ np.asarray(w).reshape(-1) / self.n_points

    def field(self, p) -> TorusField:
        return TorusField(self.synthesize(p).reshape((self.n,) * self.op.d + (self.dim,)))

    def embed(self, other: "CellBasis", p) -> np.ndarray:
        """Coordinates ``p`` of a coarser basis ``other`` expressed in this one."""
        idx = {}
        for i, (lab, kind) in enumerate(self.labels):
            idx.setdefault((lab, kind), []).append(i)
        q = np.zeros(self.size)
        used: dict = {}
        for j, (lab, kind) in enumerate(other.labels):
            k = used.get((lab, kind), 0)
            q[idx[(lab, kind)][k]] = p[j]
            used[(lab, kind)] = k + 1
        return q


class CellProblem:
    """``E(p) = mean_x f(z + w_p(x))`` and its gradient in reduced coordinates."""

    def __init__(self, op: LinearOperator, f: Integrand, z, basis: CellBasis):
        self.op, self.f, self.basis = op, f, basis
        self.z = np.asarray(z, dtype=float).reshape(op.dim_in)
        self.n_evals = 0

    def energy(self, p) -> float:
        self.n_evals += 1
        return float(np.mean(self.f(self.z + self.basis.synthesize(p))))

    def energy_and_gradient(self, p):
        self.n_evals += 1
        u = self.z + self.basis.synthesize(p)
        e = float(np.mean(self.f(u)))
        g = self.basis.G.T @ self.f.gradient(u).reshape(-1) / self.basis.n_points
        return e, g


def _grid_for(op: LinearOperator, grid: Optional[int], K: int) -> int:
    if grid is not None:
        return grid
    n = 32 if op.d <= 2 else 16
    while n <= 2 * K:
        n *= 2
    return n


def cell_energy(op: LinearOperator, f: Integrand, z, w: Optional[TorusField] = None, K: Optional[int] = None,
                return_gradient: bool = False):
    """Mean of ``f(z + w)`` over the grid.

    With ``return_gradient`` the gradient with respect to the reduced Fourier
    coordinates of ``w`` (truncation ``K``, default ``N/2 - 1``) is returned too.
    """
    z = np.asarray(z, dtype=float).reshape(op.dim_in)
    if w is None:
        val = float(f(z))
        return (val, None) if return_gradient else val
    vals = w.values.reshape(-1, w.fiber)
    e = float(np.mean(f(z + vals)))
    if not return_gradient:
        return e
    if not f.differentiable:
        raise IntegrandError(f"{f.label} is not differentiable; pass f.smoothed(eps)")
    basis = CellBasis(op, K if K is not None else w.n // 2 - 1, w.n)
    g = basis.G.T @ f.gradient(z + vals).reshape(-1) / basis.n_points
    return e, g


@dataclass
class EnvelopeResult:
    """Upper bound for the envelope over the truncated class of test fields."""

    z: np.ndarray
    value: float
    field: TorusField
    history: list
    K: int
    restarts: int
    params: np.ndarray
    basis: CellBasis = field(repr=False)
    f_at_z: float = 0.0
    upper_bound: bool = True
    diverged: bool = False
    restart_values: list = field(default_factory=list)


def quasiconvex_envelope(
    op: LinearOperator,
    f: Integrand,
    z,
    K: int = 8,
    grid: Optional[int] = None,
    restarts: int = 8,
    iters: int = 500,
    smoothing: Optional[float] = None,
    seed: int = 0,
    amplitude: float = 0.5,
    warm_start: Optional[EnvelopeResult] = None,
    gtol: float = 1e-10,
    workers: int = 1,
) -> EnvelopeResult:
    """Minimise the cell energy over truncated A-free fields.

    Restart 0 is the zero field (or ``warm_start`` embedded into the finer
    basis); the others are random fields of rms ``amplitude``.  The returned
    value is the best energy found and never exceeds ``f(z)``.  ``workers > 1``
    runs the restarts on a thread pool.
    """
    require_constant_rank(op)
    if smoothing is not None:
        f = f.smoothed(smoothing)
    if not f.differentiable:
        raise IntegrandError(f"{f.label} is not differentiable; set smoothing")
    n = _grid_for(op, grid, K)
    basis = CellBasis(op, K, n)
    prob = CellProblem(op, f, z, basis)
    f0 = prob.energy(np.zeros(basis.size))
    history: list = []
    if basis.size == 0:
        # elliptic case: the zero field is the only candidate
        return EnvelopeResult(prob.z, f0, basis.field(np.zeros(0)), [f0], K, 0, np.zeros(0), basis, f0)

    rng = np.random.default_rng(seed)
    starts = []
    if warm_start is not None:
        starts.append(basis.embed(warm_start.basis, warm_start.params))
    else:
        starts.append(np.zeros(basis.size))
    while len(starts) < max(restarts, 1):
        starts.append(amplitude * rng.standard_normal(basis.size) / np.sqrt(basis.size / max(op.dim_in, 1)))

    def solve(i, p0):
        # each restart owns its problem instance (evaluation counter, buffers)
        local = CellProblem(op, f, z, basis)
        trace: list = []
        e0 = local.energy(p0)
        res = minimize(
            local.energy_and_gradient,
            p0,
            jac=True,
            method="L-BFGS-B",
            callback=lambda p: trace.append(local.energy(p)),
            options={"maxiter": iters, "gtol": gtol, "ftol": 1e-15},
        )
        return i, e0, res, trace

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: solve(*a), enumerate(starts)))
    else:
        results = [solve(i, p0) for i, p0 in enumerate(starts)]

    best_val, best_p, vals, diverged = np.inf, None, [], False
    for i, e0, res, trace in results:
        val = float(res.fun)
        if val > e0 + 1e-12:
            diverged = True
            log.warning("restart %d ended above its starting energy (%.3e > %.3e)", i, val, e0)
        history.append({"restart": i, "start": e0, "final": val, "iters": int(res.nit), "trace": trace,
                        "message": str(res.message)})
        vals.append(val)
        if val < best_val:
            best_val, best_p = val, res.x
    if best_val > f0:
        best_val, best_p = f0, np.zeros(basis.size)
    return EnvelopeResult(prob.z, best_val, basis.field(best_p), history, K, len(starts), best_p, basis, f0,
                          True, diverged, vals)


def envelope_with_refinement(op, f, z, Ks: Sequence[int] = (4, 8), **kw) -> list[EnvelopeResult]:
    """Envelope at increasing truncations, each warm-started from the previous optimum."""
    out: list[EnvelopeResult] = []
    grid = kw.pop("grid", None) or _grid_for(op, None, max(Ks))
    for K in Ks:
        out.append(quasiconvex_envelope(op, f, z, K=K, grid=grid, warm_start=out[-1] if out else None, **kw))
    return out


def smoothed_envelope(op, f: Integrand, z, schedule=(1e-1, 1e-2, 1e-3), **kw):
    """Envelope of ``f.smoothed(eps)`` along ``schedule`` and a linear extrapolation to ``eps = 0``."""
    res = [quasiconvex_envelope(op, f.smoothed(e), z, **kw) for e in schedule]
    v = np.array([r.value for r in res])
    e = np.asarray(schedule, dtype=float)
    if len(e) >= 2:
        slope = (v[-1] - v[-2]) / (e[-1] - e[-2])
        extrap = float(v[-1] - slope * e[-1])
    else:
        extrap = float(v[-1])
    return res, extrap


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------


@dataclass
class LambdaConvexityReport:
    n_lines: int
    violations: int
    worst_excess: float
    worst_line: Optional[tuple]

    @property
    def passed(self) -> bool:
        return self.violations == 0


def wave_cone_directions(op: LinearOperator, n: int, seed: int = 0) -> np.ndarray:
    """Unit amplitudes drawn from ``ker A(xi)`` for quasi-uniform ``xi``."""
    rng = np.random.default_rng(seed)
    out = []
    for xi in sphere_samples(op.d, max(n, 64)):
        kb = kernel_basis(op.real_symbol(xi))
        if kb.shape[0]:
            v = rng.standard_normal(kb.shape[0]) @ kb
            out.append(v / np.linalg.norm(v))
    if not out:
        return np.zeros((0, op.dim_in))
    out = np.array(out)
    return out[rng.permutation(len(out))[:n]]


def lambda_convexity_check(
    op: LinearOperator,
    f: Callable,
    n_lines: int = 64,
    tol: float = 1e-10,
    seed: int = 0,
    scale: float = 1.0,
    lines: Optional[Sequence[tuple]] = None,
) -> LambdaConvexityReport:
    """Midpoint convexity of ``f`` along segments ``z + t P`` with ``P`` in the wave cone.

    ``f`` may be an ``Integrand`` or any callable on single W-vectors (e.g. a
    wrapped envelope).  Explicit ``lines`` as ``(z, P, t)`` replace the random ones.
    """
    rng = np.random.default_rng(seed)
    if lines is None:
        dirs = wave_cone_directions(op, n_lines, seed)
        lines = [
            (scale * rng.standard_normal(op.dim_in), P, scale * 2.0 * rng.random() + 1e-3) for P in dirs
        ]

    def ev(v):
        return float(np.asarray(f(np.asarray(v, dtype=float))))

    worst, worst_line, nviol = -np.inf, None, 0
    for z, P, t in lines:
        z, P = np.asarray(z, dtype=float), np.asarray(P, dtype=float)
        excess = ev(z + 0.5 * t * P) - 0.5 * ev(z) - 0.5 * ev(z + t * P)
        if excess > tol:
            nviol += 1
        if excess > worst:
            worst, worst_line = excess, (z, P, t)
    return LambdaConvexityReport(len(lines), nviol, float(worst) if lines else 0.0, worst_line)


@dataclass
class CoercivityReport:
    holds: bool
    l1_norm: float
    bound: float
    constant: float
    measured_constant: float

    def __bool__(self):
        return self.holds


def coercivity_bound_check(
    op: LinearOperator,
    f: Integrand,
    eps: float,
    z,
    w: Optional[TorusField],
    delta: float,
    C: Optional[float] = None,
) -> CoercivityReport:
    """Check ``||z + w||_{L1} <= (C/eps)(1 + |z| + delta)`` for a near-optimal cell field.

    For ``f >= b`` the energy comparison with the zero field gives
    ``eps ||z + w||_1 <= f(z) - b + eps |z| + delta``; the default ``C`` is the
    smallest constant making that inequality imply the bound.
    """
    z = np.asarray(z, dtype=float).reshape(op.dim_in)
    nz = float(np.linalg.norm(z))
    if C is None:
        lb = f.lower_bound if f.lower_bound is not None else 0.0
        C = max(1.0, (float(f(z)) - lb + eps * nz) / (1.0 + nz))
    if w is None:
        l1 = nz
    else:
        l1 = float(np.mean(np.linalg.norm(z + w.values.reshape(-1, w.fiber), axis=-1)))
    bound = C / eps * (1.0 + nz + delta)
    measured = eps * l1 / (1.0 + nz + delta)
    return CoercivityReport(l1 <= bound, l1, bound, C, measured)


def require_operator(op) -> LinearOperator:
    if not isinstance(op, LinearOperator):
        raise OperatorError("expected a LinearOperator")
    return op
