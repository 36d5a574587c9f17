"""Homogeneous constant-coefficient operators and their principal symbols.

An operator of order ``k`` from ``W = R^dim_in`` to ``X = R^dim_out`` is stored
as a list of ``(alpha, A_alpha)`` pairs with ``|alpha| = k``.  Its principal
symbol is

    A(xi) = (2 pi i)^k  sum_alpha  A_alpha xi^alpha,

which matches the Fourier convention ``u(x) = sum_xi u_hat(xi) e^{2 pi i x.xi}``.

Everything here is pure numpy: symbols are evaluated in batches over stacks of
frequencies, and kernels/images are extracted by SVD.  The constant-rank audit
is a certificate of *sampled* behaviour, not a proof.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import norm as _normal, qmc

RANK_TOL = 1e-10


class OperatorError(ValueError):
    """Malformed operator definition or incompatible operator/field shapes."""


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiIndex:
    entries: tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(a) for a in self.entries)
        if any(a < 0 for a in entries):
            raise OperatorError(f"negative multi-index entry in {entries}")
        object.__setattr__(self, "entries", entries)

    @property
    def modulus(self) -> int:
        return sum(self.entries)

    @property
    def d(self) -> int:
        return len(self.entries)

    def monomial(self, xi: np.ndarray) -> np.ndarray:
        """``xi^alpha`` evaluated over the last axis of ``xi``."""
        xi = np.asarray(xi)
        out = np.ones(xi.shape[:-1], dtype=xi.dtype)
        for j, a in enumerate(self.entries):
            if a:
                out = out * xi[..., j] ** a
        return out

    def derivative(self, j: int) -> tuple[int, "MultiIndex | None"]:
        """Coefficient and index of ``d/dxi_j xi^alpha``."""
        a = self.entries[j]
        if a == 0:
            return 0, None
        e = list(self.entries)
        e[j] -= 1
        return a, MultiIndex(tuple(e))


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """Homogeneous linear differential operator with constant coefficients."""

    d: int
    dim_in: int
    dim_out: int
    order: int
    terms: tuple[tuple[MultiIndex, np.ndarray], ...]
    name: str = "operator"

    def __post_init__(self):
        if self.d < 1:
            raise OperatorError("spatial dimension must be >= 1")
        if self.order < 1:
            raise OperatorError("order must be >= 1")
        if not self.terms:
            raise OperatorError(f"{self.name}: operator has no terms")
        clean = []
        for alpha, mat in self.terms:
            if not isinstance(alpha, MultiIndex):
                alpha = MultiIndex(tuple(alpha))
            mat = np.array(mat, dtype=float)
            if mat.ndim == 1 and self.dim_out == 1:
                mat = mat.reshape(1, -1)
            if alpha.d != self.d:
                raise OperatorError(
                    f"{self.name}: multi-index {alpha.entries} has length {alpha.d}, expected {self.d}"
                )
            if alpha.modulus != self.order:
                raise OperatorError(
                    f"{self.name}: multi-index {alpha.entries} has modulus {alpha.modulus}, expected order {self.order}"
                )
            if mat.shape != (self.dim_out, self.dim_in):
                raise OperatorError(
                    f"{self.name}: coefficient for {alpha.entries} has shape {mat.shape}, "
                    f"expected {(self.dim_out, self.dim_in)}"
                )
            mat.setflags(write=False)
            clean.append((alpha, mat))
        if all(not np.any(m) for _, m in clean):
            raise OperatorError(f"{self.name}: all coefficient matrices vanish")
        object.__setattr__(self, "terms", tuple(clean))

    @property
    def key(self) -> tuple:
        """Hashable fingerprint used by the spectral caches."""
        return (
            self.d,
            self.dim_in,
            self.dim_out,
            self.order,
            tuple((a.entries, m.tobytes()) for a, m in self.terms),
        )

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return isinstance(other, LinearOperator) and self.key == other.key

    # -- symbol evaluation ------------------------------------------------

    def real_symbol(self, xi) -> np.ndarray:
        """``sum_alpha A_alpha xi^alpha`` for ``xi`` of shape ``(..., d)``."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.d:
            raise OperatorError(f"{self.name}: frequency has dimension {xi.shape[-1]}, expected {self.d}")
        out = np.zeros(xi.shape[:-1] + (self.dim_out, self.dim_in))
        for alpha, mat in self.terms:
            out += alpha.monomial(xi)[..., None, None] * mat
        return out

    @property
    def symbol_factor(self) -> complex:
        return (2j * np.pi) ** self.order

    def symbol_matrix(self, xi) -> np.ndarray:
        """Complex principal symbol, batched over leading axes of ``xi``."""
        return self.symbol_factor * self.real_symbol(xi)

    def symbol_derivative(self, xi, j: int) -> np.ndarray:
        """``d/dxi_j`` of the complex symbol."""
        xi = np.asarray(xi, dtype=float)
        out = np.zeros(xi.shape[:-1] + (self.dim_out, self.dim_in))
        for alpha, mat in self.terms:
            c, beta = alpha.derivative(j)
            if c:
                out += c * beta.monomial(xi)[..., None, None] * mat
        return self.symbol_factor * out

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dimension": self.d,
            "order": self.order,
            "fiber_in": self.dim_in,
            "fiber_out": self.dim_out,
            "terms": [{"alpha": list(a.entries), "matrix": m.tolist()} for a, m in self.terms],
        }

    @classmethod
    def from_dict(cls, data: dict, name: str | None = None) -> "LinearOperator":
        required = ("dimension", "order", "fiber_in", "fiber_out", "terms")
        missing = [k for k in required if k not in data]
        if missing:
            raise OperatorError(f"operator definition missing field(s): {', '.join(missing)}")
        terms = []
        for i, t in enumerate(data["terms"]):
            if "alpha" not in t or "matrix" not in t:
                raise OperatorError(f"terms[{i}]: expected keys 'alpha' and 'matrix'")
            try:
                terms.append((MultiIndex(tuple(t["alpha"])), np.array(t["matrix"], dtype=float)))
            except (TypeError, ValueError) as exc:
                raise OperatorError(f"terms[{i}]: {exc}") from exc
        try:
            d, dim_in, dim_out, order = (int(data[k]) for k in ("dimension", "fiber_in", "fiber_out", "order"))
        except (TypeError, ValueError) as exc:
            raise OperatorError(f"dimension/fiber/order fields must be integers: {exc}") from None
        return cls(d=d, dim_in=dim_in, dim_out=dim_out, order=order, terms=tuple(terms),
                   name=name or data.get("name", "operator"))

    @classmethod
    def first_order(cls, mats: Sequence, name: str = "operator") -> "LinearOperator":
        """Operator ``sum_j M_j d_j`` from one matrix per coordinate direction."""
        mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in mats]
        d = len(mats)
        terms = []
        for j, m in enumerate(mats):
            e = [0] * d
            e[j] = 1
            terms.append((MultiIndex(tuple(e)), m))
        return cls(d=d, dim_in=mats[0].shape[1], dim_out=mats[0].shape[0], order=1, terms=tuple(terms), name=name)


@dataclass(frozen=True)
class SymbolMatrix:
    xi: np.ndarray
    value: np.ndarray
    order: int

    def rank(self, tol: float = RANK_TOL) -> int:
        return numerical_rank(self.value, tol)

    def kernel(self, tol: float = RANK_TOL) -> np.ndarray:
        return kernel_basis(self.value, tol)


def symbol(op: LinearOperator, xi) -> SymbolMatrix:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (op.d,):
        raise OperatorError(f"{op.name}: expected a frequency of shape ({op.d},), got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise OperatorError("frequency must be finite")
    return SymbolMatrix(xi=xi, value=op.symbol_matrix(xi), order=op.order)


# --------------------------------------------------------------------------
# linear algebra helpers
# --------------------------------------------------------------------------


def numerical_rank(m, tol: float = RANK_TOL) -> int:
    """Number of singular values above ``tol * sigma_max``."""
    m = np.asarray(m)
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _batched_rank(s: np.ndarray, tol: float) -> np.ndarray:
    smax = s[..., :1]
    return np.sum((s > tol * smax) & (smax > 0), axis=-1)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Deterministic sign: the largest-magnitude entry of each row is positive."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=-1)
    pick = np.take_along_axis(vecs, idx[..., None], axis=-1)
    return vecs * np.where(pick < 0, -1.0, 1.0)


def _stack_real(m: np.ndarray) -> np.ndarray:
    # real vectors w with M w = 0  <=>  Re(M) w = 0 and Im(M) w = 0
    m = np.asarray(m)
    if np.iscomplexobj(m):
        return np.concatenate([m.real, m.imag], axis=-2)
    return m


def kernel_basis(m, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the real kernel of ``m`` (shape ``(n_ker, cols)``)."""
    st = _stack_real(m)
    _, s, vt = np.linalg.svd(st)
    r = 0 if s.size == 0 or s[0] == 0 else int(np.sum(s > tol * s[0]))
    return _fix_signs(vt[r:])


def image_basis(m, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the real column space of ``m``."""
    m = np.asarray(m)
    st = np.concatenate([m.real, m.imag], axis=-1) if np.iscomplexobj(m) else m
    u, s, _ = np.linalg.svd(st)
    r = 0 if s.size == 0 or s[0] == 0 else int(np.sum(s > tol * s[0]))
    return _fix_signs(u[:, :r].T)


def span_basis(vectors, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the given row vectors."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.size == 0:
        return np.zeros((0, vectors.shape[-1] if vectors.ndim == 2 else 0))
    _, s, vt = np.linalg.svd(vectors, full_matrices=False)
    if s[0] == 0:
        return np.zeros((0, vectors.shape[1]))
    r = int(np.sum(s > tol * s[0]))
    return _fix_signs(vt[:r])


def projector(basis: np.ndarray, dim: int) -> np.ndarray:
    basis = np.asarray(basis, dtype=float).reshape(-1, dim)
    return basis.T @ basis


# --------------------------------------------------------------------------
# sphere sampling
# --------------------------------------------------------------------------


def special_directions(d: int) -> np.ndarray:
    """Axis and diagonal unit directions (both signs)."""
    if d <= 3:
        pts = [np.array(v, dtype=float) for v in itertools.product((-1, 0, 1), repeat=d) if any(v)]
    else:
        pts = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            pts += [e, -e]
        pts += [np.array(v, dtype=float) for v in itertools.product((-1, 1), repeat=d)]
    pts = np.array(pts)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def spiral_points(d: int, n: int) -> np.ndarray:
    """Deterministic quasi-uniform points on the unit sphere ``S^{d-1}``."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        t = 2 * np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if d == 3:
        i = np.arange(n) + 0.5
        z = 1 - 2 * i / n
        r = np.sqrt(1 - z**2)
        phi = np.pi * (1 + np.sqrt(5)) * i
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    u = qmc.Halton(d=d, scramble=False).random(n + 1)[1:]
    g = _normal.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sphere_samples(d: int, n: int) -> np.ndarray:
    return np.concatenate([special_directions(d), spiral_points(d, n)], axis=0)


# --------------------------------------------------------------------------
# constant rank audit and wave cones
# --------------------------------------------------------------------------


@dataclass
class ConeReport:
    samples: np.ndarray
    ranks: np.ndarray
    rank_min: int
    rank_max: int
    constant_rank: bool
    r: int | None
    kernel_bases: list[np.ndarray] = field(repr=False)
    span_basis: np.ndarray = field(repr=False)

    @property
    def span_dim(self) -> int:
        return int(self.span_basis.shape[0])

    def span_projector(self) -> np.ndarray:
        return projector(self.span_basis, self.kernel_bases[0].shape[-1] if self.kernel_bases else 0)


def constant_rank_audit(op: LinearOperator, n_samples: int = 256, tol: float = RANK_TOL) -> ConeReport:
    """Sample ``rank A(xi)`` on the sphere and collect the kernels.

    The span of all sampled kernels estimates ``W_A = span(wave cone)``.
    """
    if n_samples < 64:
        raise ValueError("n_samples must be >= 64")
    xis = sphere_samples(op.d, n_samples)
    mats = op.symbol_matrix(xis)
    s = np.linalg.svd(mats, compute_uv=False)
    ranks = _batched_rank(s, tol)
    kernels = [kernel_basis(m, tol) for m in mats]
    stacked = np.concatenate(kernels, axis=0) if kernels else np.zeros((0, op.dim_in))
    basis = span_basis(stacked, tol) if stacked.shape[0] else np.zeros((0, op.dim_in))
    rmin, rmax = int(ranks.min()), int(ranks.max())
    return ConeReport(
        samples=xis,
        ranks=ranks,
        rank_min=rmin,
        rank_max=rmax,
        constant_rank=rmin == rmax,
        r=rmin if rmin == rmax else None,
        kernel_bases=kernels,
        span_basis=basis,
    )


class Membership(NamedTuple):
    member: bool
    witness: np.ndarray | None
    residual: float
    best_xi: np.ndarray


def _unit(v):
    return v / np.linalg.norm(v)


def _restart_points(d: int, n_grid: int, n_random: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rnd = rng.standard_normal((n_random, d))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.concatenate([sphere_samples(d, n_grid), rnd], axis=0)


def _wave_objective(op: LinearOperator, w: np.ndarray):
    wn = np.linalg.norm(w)

    def value(xi):
        v = op.symbol_matrix(xi) @ w
        return float(np.vdot(v, v).real) / wn**2

    def grad(xi):
        v = op.symbol_matrix(xi) @ w
        g = np.array([2 * np.vdot(v, op.symbol_derivative(xi, j) @ w).real for j in range(op.d)])
        return g / wn**2

    def residual(y):
        v = op.symbol_matrix(_unit(y)) @ w / wn
        return np.concatenate([v.real, v.imag])

    return value, grad, residual


def _sphere_descent(value, grad, xi, iters=200):
    """Projected gradient descent on the unit sphere with Armijo backtracking."""
    f = value(xi)
    step = 1.0
    for _ in range(iters):
        g = grad(xi)
        g = g - np.dot(g, xi) * xi
        gn2 = float(np.dot(g, g))
        if gn2 < 1e-30 or f < 1e-30:
            break
        step = min(step * 2.0, 1e3)
        while step > 1e-16:
            cand = _unit(xi - step * g)
            fc = value(cand)
            if fc <= f - 1e-4 * step * gn2:
                xi, f = cand, fc
                break
            step *= 0.5
        else:
            break
    return xi, f


def wave_cone_membership(
    op: LinearOperator, w, tol: float = 1e-8, n_restarts: int = 32, seed: int = 0, n_grid: int = 256
) -> Membership:
    """Decide whether ``w`` lies in ``ker A(xi)`` for some unit ``xi``.

    Grid seeding plus multi-start projected gradient descent, finished by a
    Gauss-Newton polish; the best value is reported even when the answer is
    negative.
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != op.dim_in:
        raise OperatorError(f"{op.name}: vector has dimension {w.shape[0]}, expected {op.dim_in}")
    if np.linalg.norm(w) == 0:
        raise ValueError("w must be nonzero")
    value, grad, residual = _wave_objective(op, w)
    starts = _restart_points(op.d, n_grid, n_restarts, seed)
    mats = op.symbol_matrix(starts)
    vals = np.linalg.norm(mats @ w, axis=-1) ** 2 / np.dot(w, w)
    order = np.argsort(vals)
    n_grid_pts = starts.shape[0] - n_restarts
    chosen = list(order[: min(8, len(order))]) + list(range(n_grid_pts, starts.shape[0]))
    best_xi, best_f = starts[order[0]], vals[order[0]]
    for i in dict.fromkeys(chosen):
        xi, f = _sphere_descent(value, grad, starts[i])
        if f < best_f:
            best_xi, best_f = xi, f
    if best_f > 0:
        sol = optimize.least_squares(residual, best_xi, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        cand = _unit(sol.x)
        fc = value(cand)
        if fc < best_f:
            best_xi, best_f = cand, fc
    res = float(np.sqrt(max(best_f, 0.0)))
    member = bool(res < tol)
    return Membership(member, best_xi if member else None, res, best_xi)


def _image_residual(op: LinearOperator, w: np.ndarray, xi, tol: float) -> np.ndarray:
    basis = image_basis(op.symbol_matrix(xi), tol)
    r = w - basis.T @ (basis @ w)
    return r / np.linalg.norm(w)


def image_cone_membership(
    opB: LinearOperator, w, tol: float = 1e-8, n_restarts: int = 32, seed: int = 0, n_grid: int = 256
) -> Membership:
    """Decide whether ``w`` lies in ``im B(xi)`` for some unit ``xi``."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != opB.dim_out:
        raise OperatorError(f"{opB.name}: vector has dimension {w.shape[0]}, expected {opB.dim_out}")
    if np.linalg.norm(w) == 0:
        xi0 = special_directions(opB.d)[0]
        return Membership(True, xi0, 0.0, xi0)
    starts = _restart_points(opB.d, n_grid, n_restarts, seed)
    vals = np.array([np.linalg.norm(_image_residual(opB, w, xi, RANK_TOL)) for xi in starts])
    order = np.argsort(vals)
    best_xi, best = starts[order[0]], vals[order[0]]
    for i in order[:8]:
        if best < 1e-15:
            break
        sol = optimize.least_squares(lambda y: _image_residual(opB, w, _unit(y), RANK_TOL), starts[i])
        cand = _unit(sol.x)
        v = float(np.linalg.norm(_image_residual(opB, w, cand, RANK_TOL)))
        if v < best:
            best_xi, best = cand, v
    member = bool(best < tol)
    return Membership(member, best_xi if member else None, float(best), best_xi)


def image_cone_span(opB: LinearOperator, n_samples: int = 256, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of ``span(image cone)``."""
    xis = sphere_samples(opB.d, n_samples)
    vecs = [image_basis(m, tol) for m in opB.symbol_matrix(xis)]
    return span_basis(np.concatenate(vecs, axis=0), tol)


@dataclass
class ExactnessReport:
    passed: bool
    max_gap: float
    dim_mismatches: int
    worst_xi: np.ndarray
    n_samples: int


def exactness_check(
    opA: LinearOperator, opB: LinearOperator, n_samples: int = 1000, tol: float = 1e-10
) -> ExactnessReport:
    """Compare ``im B(xi)`` with ``ker A(xi)`` on sampled unit frequencies.

    The gap is ``||P_im - P_ker||_2``, the sine of the largest principal angle
    when the dimensions agree.
    """
    if opB.dim_out != opA.dim_in:
        raise OperatorError(
            f"fiber mismatch: {opB.name} maps into R^{opB.dim_out}, {opA.name} acts on R^{opA.dim_in}"
        )
    if opA.d != opB.d:
        raise OperatorError("operators live in different spatial dimensions")
    xis = sphere_samples(opA.d, n_samples)
    n = opA.dim_in
    max_gap, worst, mism = 0.0, xis[0], 0
    for xi, ma, mb in zip(xis, opA.symbol_matrix(xis), opB.symbol_matrix(xis)):
        kb = kernel_basis(ma)
        ib = image_basis(mb)
        if kb.shape[0] != ib.shape[0]:
            mism += 1
            gap = 1.0
        else:
            gap = float(np.linalg.norm(projector(kb, n) - projector(ib, n), 2))
        if gap > max_gap:
            max_gap, worst = gap, xi
    return ExactnessReport(
        passed=mism == 0 and max_gap < tol,
        max_gap=max_gap,
        dim_mismatches=mism,
        worst_xi=worst,
        n_samples=len(xis),
    )
