"""Fourier-multiplier calculus on the periodic grid.

Fields live on ``N^d`` points of the torus ``[0, L)^d``.  Fourier coefficients
are normalised so that the zero mode is the mean,

    u(x) = sum_xi  u_hat(xi) exp(2 pi i x.xi / L),   xi in {-N/2, ..., N/2-1}^d,

and an operator acts by ``u_hat(xi) -> A(xi/L) u_hat(xi)``.

Nyquist modes (any component equal to ``-N/2``) are aliased with their own
conjugate partner, so a symbol evaluated there generally breaks the Hermitian
symmetry of real fields.  The discrete symbol is therefore set to zero on
those modes, for every operator.  Random fields are band-limited by default so
that nothing of interest lives there.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .operators import RANK_TOL, LinearOperator, OperatorError, constant_rank_audit


class RangeError(ValueError):
    """Right-hand side is not in the range of the potential operator."""


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class TorusField:
    """Real ``fiber``-valued samples on a uniform periodic grid."""

    values: np.ndarray
    length: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim < 2:
            raise ValueError("values must have shape (N,)*d + (fiber,)")
        n = v.shape[0]
        if any(s != n for s in v.shape[:-1]):
            raise ValueError(f"grid must be square, got {v.shape[:-1]}")
        if not _is_pow2(n):
            raise ValueError(f"grid size must be a power of two, got {n}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # -- shape ----------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.ndim - 1

    @property
    def fiber(self) -> int:
        return self.values.shape[-1]

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def coords(self, centered: bool = False) -> np.ndarray:
        """Grid nodes ``(N,)*d + (d,)``; ``centered`` shifts by half a cell."""
        x = (np.arange(self.n) + (0.5 if centered else 0.0)) * self.h
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"), axis=-1)

    # -- transforms -------------------------------------------------------------

    def fourier(self) -> np.ndarray:
        axes = tuple(range(self.d))
        return np.fft.fftn(self.values, axes=axes) / self.n**self.d

    @classmethod
    def from_fourier(cls, coefs: np.ndarray, length: float = 1.0, imag_tol: float = 1e-8) -> "TorusField":
        d = coefs.ndim - 1
        n = coefs.shape[0]
        vals = np.fft.ifftn(coefs * n**d, axes=tuple(range(d)))
        scale = max(1.0, float(np.max(np.abs(vals.real))) if vals.size else 1.0)
        if np.max(np.abs(vals.imag), initial=0.0) > imag_tol * scale:
            raise ValueError("Fourier coefficients are not Hermitian-symmetric")
        return cls(vals.real, length)

    @classmethod
    def from_function(
        cls, func: Callable[[np.ndarray], np.ndarray], n: int, d: int, length: float = 1.0
    ) -> "TorusField":
        """Sample ``func(x)`` at the grid nodes; ``func`` returns ``(..., fiber)`` or ``(...)``."""
        x = (np.arange(n)) * (length / n)
        pts = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1)
        vals = np.asarray(func(pts), dtype=float)
        if vals.ndim == d:
            vals = vals[..., None]
        return cls(vals, length)

    @classmethod
    def zeros(cls, n: int, d: int, fiber: int, length: float = 1.0) -> "TorusField":
        return cls(np.zeros((n,) * d + (fiber,)), length)

    @classmethod
    def constant(cls, c, n: int, d: int, length: float = 1.0) -> "TorusField":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(np.broadcast_to(c, (n,) * d + c.shape).copy(), length)

    @classmethod
    def random(
        cls,
        n: int,
        d: int,
        fiber: int,
        seed=None,
        length: float = 1.0,
        band_limited: bool = True,
    ) -> "TorusField":
        """Gaussian white noise; ``band_limited`` removes the Nyquist modes."""
        rng = np.random.default_rng(seed)
        f = cls(rng.standard_normal((n,) * d + (fiber,)), length)
        if band_limited:
            c = f.fourier()
            c[nyquist_mask(n, d)] = 0.0
            f = cls.from_fourier(c, length)
        return f

    # -- small algebra ------------------------------------------------------------

    def mean(self) -> np.ndarray:
        return self.values.reshape(-1, self.fiber).mean(axis=0)

    def norm(self) -> float:
        """Quadratic mean ``(mean |u|^2)^(1/2)``."""
        return float(np.sqrt(np.mean(np.sum(self.values**2, axis=-1))))

    def l1(self) -> float:
        """``int |u|`` over the torus (not normalised by volume)."""
        return float(np.sum(np.linalg.norm(self.values, axis=-1)) * self.cell_volume)

    def _check(self, other: "TorusField"):
        if self.values.shape != other.values.shape or self.length != other.length:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, TorusField):
            self._check(other)
            return TorusField(self.values + other.values, self.length)
        return TorusField(self.values + np.asarray(other), self.length)

    def __sub__(self, other):
        if isinstance(other, TorusField):
            self._check(other)
            return TorusField(self.values - other.values, self.length)
        return TorusField(self.values - np.asarray(other), self.length)

    def __mul__(self, c):
        return TorusField(self.values * c, self.length)

    __rmul__ = __mul__

    def __neg__(self):
        return TorusField(-self.values, self.length)


# --------------------------------------------------------------------------
# frequency grids and cached multipliers
# --------------------------------------------------------------------------


def integer_frequencies(n: int, d: int) -> np.ndarray:
    k = np.fft.fftfreq(n, 1.0 / n)
    return np.stack(np.meshgrid(*([k] * d), indexing="ij"), axis=-1)


def nyquist_mask(n: int, d: int) -> np.ndarray:
    return np.any(integer_frequencies(n, d) == -(n // 2), axis=-1)


class _Registry:
    """Small thread-safe cache of per-grid multipliers."""

    def __init__(self, maxsize: int = 32):
        self._lock = threading.Lock()
        self._data: dict = {}
        self._maxsize = maxsize

    def get(self, key, build):
        with self._lock:
            if key in self._data:
                return self._data[key]
        value = build()
        with self._lock:
            if len(self._data) >= self._maxsize:
                self._data.pop(next(iter(self._data)))
            self._data[key] = value
        return value


_cache = _Registry()


def symbol_grid(op: LinearOperator, n: int, length: float = 1.0) -> np.ndarray:
    """Discrete symbol on the FFT grid, zero on Nyquist modes."""

    def build():
        xi = integer_frequencies(n, op.d) / length
        s = op.symbol_matrix(xi)
        s[nyquist_mask(n, op.d)] = 0.0
        s.setflags(write=False)
        return s

    return _cache.get(("symbol", op.key, n, length), build)


def projector_grid(op: LinearOperator, n: int, length: float = 1.0, tol: float = RANK_TOL) -> np.ndarray:
    """``pi(xi)``: orthogonal projection onto ``(ker A(xi))^perp``; zero at xi=0 and Nyquist."""

    def build():
        s = symbol_grid(op, n, length)
        st = np.concatenate([s.real, s.imag], axis=-2)
        _, sv, vt = np.linalg.svd(st)
        smax = sv[..., :1]
        keep = (sv > tol * smax) & (smax > 0)
        k = min(sv.shape[-1], vt.shape[-2])
        mask = np.zeros(vt.shape[:-1], dtype=bool)
        mask[..., :k] = keep[..., :k]
        vr = vt * mask[..., None]
        p = np.einsum("...ki,...kj->...ij", vr, vr)
        p.setflags(write=False)
        return p

    return _cache.get(("proj", op.key, n, length, tol), build)


def pinv_grid(op: LinearOperator, n: int, length: float = 1.0, tol: float = RANK_TOL) -> np.ndarray:
    def build():
        s = symbol_grid(op, n, length)
        p = np.linalg.pinv(s, rcond=tol)
        p.setflags(write=False)
        return p

    return _cache.get(("pinv", op.key, n, length, tol), build)


def _apply_multiplier(m: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", m, coefs)


_audited: dict = {}


def require_constant_rank(op: LinearOperator) -> int:
    if op.key not in _audited:
        _audited[op.key] = constant_rank_audit(op, 256)
    rep = _audited[op.key]
    if not rep.constant_rank:
        raise OperatorError(
            f"{op.name} fails the constant-rank audit (ranks {rep.rank_min}..{rep.rank_max}); "
            "projection is not defined"
        )
    return rep.r


def _check_fiber(op: LinearOperator, u: TorusField, which: str = "dim_in"):
    want = getattr(op, which)
    if u.fiber != want:
        raise OperatorError(f"{op.name} expects fiber {want}, field has fiber {u.fiber}")
    if u.d != op.d:
        raise OperatorError(f"{op.name} acts in dimension {op.d}, field has dimension {u.d}")


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def apply_operator(op: LinearOperator, u: TorusField) -> TorusField:
    _check_fiber(op, u)
    c = _apply_multiplier(symbol_grid(op, u.n, u.length), u.fourier())
    return TorusField.from_fourier(c, u.length)


def _representative_coefs(op: LinearOperator, u: TorusField) -> tuple[np.ndarray, np.ndarray]:
    uh = u.fourier()
    via_projector = _apply_multiplier(projector_grid(op, u.n, u.length), uh)
    au = _apply_multiplier(symbol_grid(op, u.n, u.length), uh)
    via_pinv = _apply_multiplier(pinv_grid(op, u.n, u.length), au)
    return via_projector, via_pinv


def representative_formulas(op: LinearOperator, u: TorusField) -> tuple[TorusField, TorusField]:
    """``T[u]`` computed twice: ``pi u_hat`` and ``A^dagger (A u)^hat``."""
    require_constant_rank(op)
    _check_fiber(op, u)
    a, b = _representative_coefs(op, u)
    return TorusField.from_fourier(a, u.length), TorusField.from_fourier(b, u.length)


def a_representative(op: LinearOperator, u: TorusField, check_tol: float = 1e-10) -> TorusField:
    """Mean-zero field ``T[u]`` carrying all of ``A u``.

    Both the projector and the pseudoinverse formula are evaluated and must
    agree to ``check_tol`` (relative to the size of ``u``).
    """
    require_constant_rank(op)
    _check_fiber(op, u)
    a, b = _representative_coefs(op, u)
    scale = max(float(np.max(np.abs(u.fourier()))), 1e-300)
    gap = float(np.max(np.abs(a - b), initial=0.0)) / scale
    if gap > check_tol:
        raise ArithmeticError(f"projector and pseudoinverse forms of T disagree by {gap:.3e}")
    return TorusField.from_fourier(a, u.length)


def afree_part(op: LinearOperator, u: TorusField) -> TorusField:
    """``u - mean(u) - T[u]``: mean-zero and annihilated by ``op``."""
    t = a_representative(op, u)
    return u - u.mean() - t


def helmholtz(op: LinearOperator, u: TorusField) -> tuple[np.ndarray, TorusField, TorusField]:
    """``(mean, T[u], z)`` with ``u = mean + T[u] + z``."""
    t = a_representative(op, u)
    m = u.mean()
    return m, t, u - m - t


def range_residual(opB: LinearOperator, z: TorusField) -> float:
    """Largest per-frequency distance of ``z_hat`` to ``im B(xi)`` (relative to max |z_hat|)."""
    zh = z.fourier()
    p = projector_grid_image(opB, z.n, z.length)
    r = zh - _apply_multiplier(p, zh)
    scale = max(float(np.max(np.abs(zh))), 1e-300)
    return float(np.max(np.linalg.norm(r, axis=-1))) / scale


def projector_grid_image(op: LinearOperator, n: int, length: float = 1.0, tol: float = RANK_TOL) -> np.ndarray:
    """Orthogonal projection onto the (real) image of ``B(xi)``; zero where the symbol vanishes."""

    def build():
        s = symbol_grid(op, n, length)
        st = np.concatenate([s.real, s.imag], axis=-1)
        u, sv, _ = np.linalg.svd(st)
        smax = sv[..., :1]
        keep = (sv > tol * smax) & (smax > 0)
        k = sv.shape[-1]
        ur = u[..., :, :k] * keep[..., None, :]
        p = np.einsum("...ik,...jk->...ij", ur, ur)
        p.setflags(write=False)
        return p

    return _cache.get(("improj", op.key, n, length, tol), build)


def potential_solve(opB: LinearOperator, z: TorusField, tol: float = 1e-8) -> TorusField:
    """Minimal-norm mean-zero ``u`` with ``B u = z``, frequency by frequency."""
    _check_fiber(opB, z, "dim_out")
    res = range_residual(opB, z)
    if res > tol:
        raise RangeError(f"field is not in the range of {opB.name}: max per-frequency residual {res:.3e}")
    c = _apply_multiplier(pinv_grid(opB, z.n, z.length), z.fourier())
    return TorusField.from_fourier(c, z.length)


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SobolevNormSpec:
    s: float = 0.0


def bessel_weights(n: int, d: int, s: float, length: float = 1.0) -> np.ndarray:
    xi = integer_frequencies(n, d) / length
    return (1.0 + np.sum(xi**2, axis=-1)) ** s


def sobolev_norm(u: TorusField, spec: SobolevNormSpec | float = 0.0) -> float:
    """``(sum_xi (1+|xi|^2)^s |u_hat(xi)|^2)^(1/2)``."""
    s = spec.s if isinstance(spec, SobolevNormSpec) else float(spec)
    uh = u.fourier()
    w = bessel_weights(u.n, u.d, s, u.length)
    return float(np.sqrt(np.sum(w * np.sum(np.abs(uh) ** 2, axis=-1))))


def residual_norm(op: LinearOperator, u: TorusField) -> float:
    """``||A u||`` in the ``s = -k`` surrogate norm."""
    return sobolev_norm(apply_operator(op, u), -op.order)


@dataclass
class PoincareReport:
    ratios: np.ndarray
    max_ratio: float
    skipped: int


def poincare_check(op: LinearOperator, fields, zero_tol: float = 1e-13) -> PoincareReport:
    """Empirical constant of ``||T u||_0 <= C ||A u||_{-k}`` over a batch of fields."""
    ratios, skipped = [], 0
    for u in fields:
        num = sobolev_norm(a_representative(op, u), 0.0)
        den = residual_norm(op, u)
        if den <= zero_tol * max(u.norm(), 1e-300):
            skipped += 1
            continue
        ratios.append(num / den)
    ratios = np.array(ratios)
    return PoincareReport(ratios, float(ratios.max()) if ratios.size else 0.0, skipped)
