"""Integrands on the fiber ``W = R^m``: values, gradients, recessions.

All evaluators are batched over leading axes: ``z`` has shape ``(..., m)``
and values come back with shape ``(...)``.  An ``Integrand`` is immutable;
transforms (sums, scaling, projection, smoothing) return new objects.

A small text DSL builds integrands, e.g.::

    norm()
    2 * area() + 0.5
    distance(points=[[1, 0], [-1, 0]], eps=1e-2)
    radial_double_well()
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

KINDS = (
    "polynomial",
    "norm-composite",
    "distance-to-point-set",
    "positively-1-homogeneous",
    "smoothed-min",
    "constant",
    "composite",
)


class IntegrandError(ValueError):
    pass


Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Integrand:
    """Scalar integrand ``f: W -> R``.

    Attributes
    ----------
    kind : str
        One of ``KINDS``.
    fn, grad : callables
        Value and gradient, batched over leading axes.
    recession : callable or None
        Strong recession ``f^inf`` when it exists; ``None`` means only the
        upper recession is available (numerically).
    growth : float or None
        ``M`` with ``|f(z)| <= M (1 + |z|)``; ``None`` for superlinear growth.
    lipschitz : float or None
    differentiable : bool
        False for kinks (``|z|`` at 0, ties between wells); see ``smoothed``.
    smoother : callable or None
        ``eps -> Integrand``, a differentiable approximation.
    """

    kind: str
    fn: Fn
    grad: Fn
    recession: Optional[Fn] = None
    growth: Optional[float] = None
    lipschitz: Optional[float] = None
    differentiable: bool = True
    lower_bound: Optional[float] = None
    smoother: Optional[Callable[[float], "Integrand"]] = None
    label: str = ""
    dim: Optional[int] = None
    params: dict = field(default_factory=dict)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        self._check_dim(z)
        return self.fn(z)

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        self._check_dim(z)
        return self.grad(z)

    def recession_value(self, z) -> np.ndarray:
        if self.recession is None:
            raise IntegrandError(f"{self.label or self.kind} has no strong recession function")
        z = np.asarray(z, dtype=float)
        self._check_dim(z)
        return self.recession(z)

    @property
    def has_recession(self) -> bool:
        return self.recession is not None

    def _check_dim(self, z):
        if self.dim is not None and z.shape[-1] != self.dim:
            raise IntegrandError(f"{self.label} acts on R^{self.dim}, got vectors of length {z.shape[-1]}")

    def smoothed(self, eps: float) -> "Integrand":
        if self.smoother is None:
            return self
        return self.smoother(eps)

    # -- algebra -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Integrand):
            return _sum(self, other)
        return _shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Integrand):
            return _sum(self, _scale(other, -1.0))
        return _shift(self, -float(other))

    def __mul__(self, c):
        return _scale(self, float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return _scale(self, -1.0)

    def __repr__(self):
        return f"Integrand({self.label or self.kind})"


def _norm(z):
    return np.sqrt(np.sum(z * z, axis=-1))


def _merge_dim(a, b):
    if a is not None and b is not None and a != b:
        raise IntegrandError(f"cannot combine integrands on R^{a} and R^{b}")
    return a if a is not None else b


def _opt_add(a, b):
    return None if a is None or b is None else a + b


def _sum(f: Integrand, g: Integrand) -> Integrand:
    rec = None
    if f.recession is not None and g.recession is not None:
        fr, gr = f.recession, g.recession
        rec = lambda z: fr(z) + gr(z)  # noqa: E731
    smoother = None
    if f.smoother is not None or g.smoother is not None:
        smoother = lambda eps: _sum(f.smoothed(eps), g.smoothed(eps))  # noqa: E731
    return Integrand(
        "composite",
        lambda z: f.fn(z) + g.fn(z),
        lambda z: f.grad(z) + g.grad(z),
        rec,
        _opt_add(f.growth, g.growth),
        _opt_add(f.lipschitz, g.lipschitz),
        f.differentiable and g.differentiable,
        _opt_add(f.lower_bound, g.lower_bound),
        smoother,
        f"({f.label} + {g.label})",
        _merge_dim(f.dim, g.dim),
    )


def _shift(f: Integrand, c: float) -> Integrand:
    smoother = None if f.smoother is None else (lambda eps: _shift(f.smoother(eps), c))
    return replace(
        f,
        kind="composite" if c else f.kind,
        fn=lambda z: f.fn(z) + c,
        growth=None if f.growth is None else f.growth + abs(c),
        lower_bound=None if f.lower_bound is None else f.lower_bound + c,
        smoother=smoother,
        label=f"({f.label} + {c:g})",
    )


def _scale(f: Integrand, c: float) -> Integrand:
    rec = None if f.recession is None else (lambda z: c * f.recession(z))
    smoother = None if f.smoother is None else (lambda eps: _scale(f.smoother(eps), c))
    lb = None
    if c >= 0 and f.lower_bound is not None:
        lb = c * f.lower_bound
    return replace(
        f,
        kind="composite",
        fn=lambda z: c * f.fn(z),
        grad=lambda z: c * f.grad(z),
        recession=rec,
        growth=None if f.growth is None else abs(c) * f.growth,
        lipschitz=None if f.lipschitz is None else abs(c) * f.lipschitz,
        lower_bound=lb,
        smoother=smoother,
        label=f"{c:g}*{f.label}",
    )


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def norm(eps: float = 0.0) -> Integrand:
    """``|z|``; with ``eps > 0`` the smooth surrogate ``sqrt(|z|^2 + eps^2)``."""
    if eps < 0:
        raise IntegrandError("eps must be non-negative")
    if eps == 0.0:

        def grad(z):
            n = _norm(z)[..., None]
            return np.divide(z, n, out=np.zeros_like(z), where=n > 0)

        return Integrand(
            "norm-composite", _norm, grad, _norm, 1.0, 1.0, False, 0.0, norm, "norm()", params={"eps": 0.0}
        )

    def fn(z):
        return np.sqrt(np.sum(z * z, axis=-1) + eps * eps)

    return Integrand(
        "norm-composite",
        fn,
        lambda z: z / fn(z)[..., None],
        _norm,
        1.0 + eps,
        1.0,
        True,
        eps,
        norm,
        f"norm(eps={eps:g})",
        params={"eps": eps},
    )


def area() -> Integrand:
    """``sqrt(1 + |z|^2)``, recession ``|z|``."""

    def fn(z):
        return np.sqrt(1.0 + np.sum(z * z, axis=-1))

    return Integrand(
        "norm-composite", fn, lambda z: z / fn(z)[..., None], _norm, 1.0, 1.0, True, 1.0, None, "area()"
    )


def quadratic() -> Integrand:
    return Integrand(
        "polynomial", lambda z: np.sum(z * z, axis=-1), lambda z: 2.0 * z, None, None, None, True, 0.0, None,
        "quadratic()",
    )


def radial_double_well(radius: float = 1.0) -> Integrand:
    """``(|z|^2 - r^2)^2``: wells on the sphere of radius ``r``; quartic growth."""
    r2 = radius * radius

    def fn(z):
        return (np.sum(z * z, axis=-1) - r2) ** 2

    def grad(z):
        return 4.0 * (np.sum(z * z, axis=-1) - r2)[..., None] * z

    return Integrand("polynomial", fn, grad, None, None, None, True, 0.0, None, f"radial_double_well({radius:g})",
                     params={"radius": radius})


def constant(c: float = 0.0) -> Integrand:
    c = float(c)
    return Integrand(
        "constant",
        lambda z: np.full(z.shape[:-1], c),
        np.zeros_like,
        lambda z: np.zeros(z.shape[:-1]),
        abs(c),
        0.0,
        True,
        c,
        None,
        f"{c:g}",
    )


def linear(c) -> Integrand:
    c = np.asarray(c, dtype=float)
    fn = lambda z: z @ c  # noqa: E731
    return Integrand(
        "positively-1-homogeneous", fn, lambda z: np.broadcast_to(c, z.shape).copy(), fn,
        float(np.linalg.norm(c)), float(np.linalg.norm(c)), True, None, None, f"linear({c.tolist()})", c.size,
    )


def weighted_norm(weights, eps: float = 0.0) -> Integrand:
    """``sqrt(sum_i w_i z_i^2)`` with ``w_i > 0``; positively 1-homogeneous."""
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise IntegrandError("weights must be positive")
    lip = float(np.sqrt(w.max()))

    def rec(z):
        return np.sqrt(np.sum(w * z * z, axis=-1))

    def fn(z):
        return np.sqrt(np.sum(w * z * z, axis=-1) + eps * eps)

    def grad(z):
        n = fn(z)[..., None]
        return np.divide(w * z, n, out=np.zeros_like(z), where=n > 0)

    return Integrand(
        "positively-1-homogeneous" if eps == 0 else "norm-composite",
        fn, grad, rec, lip + eps, lip, eps > 0, eps,
        (lambda e: weighted_norm(w, e)) if eps == 0 else None,
        f"weighted_norm({w.tolist()})", w.size, {"weights": w.tolist(), "eps": eps},
    )


def distance(points, eps: float = 0.0) -> Integrand:
    """``dist(z, {A_1, ..., A_n})``.

    With ``eps > 0`` each distance is regularised to ``sqrt(|z - A_i|^2 + eps^2)``
    and the minimum is replaced by the soft-min ``-eps log sum exp(-d_i/eps)``;
    the result stays within ``eps (1 + log n)`` of the exact distance.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    npts = pts.shape[0]

    def dists(z, e):
        diff = z[..., None, :] - pts
        return np.sqrt(np.sum(diff * diff, axis=-1) + e * e), diff

    if eps == 0.0:

        def fn(z):
            return dists(z, 0.0)[0].min(axis=-1)

        def grad(z):
            d, diff = dists(z, 0.0)
            i = np.argmin(d, axis=-1)
            dd = np.take_along_axis(d, i[..., None], -1)
            g = np.take_along_axis(diff, i[..., None, None], -2)[..., 0, :]
            return np.divide(g, dd, out=np.zeros_like(g), where=dd > 0)

        return Integrand(
            "distance-to-point-set", fn, grad, _norm, 1.0 + float(_norm(pts).max()), 1.0, False, 0.0,
            lambda e: distance(pts, e), f"distance(points={pts.tolist()})", pts.shape[1],
            {"points": pts.tolist(), "eps": 0.0},
        )

    def fn(z):
        d, _ = dists(z, eps)
        return -eps * logsumexp(-d / eps, axis=-1)

    def grad(z):
        d, diff = dists(z, eps)
        p = softmax(-d / eps, axis=-1)
        return np.sum((p / d)[..., None] * diff, axis=-2)

    return Integrand(
        "smoothed-min", fn, grad, _norm, 1.0 + float(_norm(pts).max()) + eps, 1.0, True,
        -eps * np.log(npts), lambda e: distance(pts, e), f"distance(points={pts.tolist()}, eps={eps:g})",
        pts.shape[1], {"points": pts.tolist(), "eps": eps},
    )


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


def s_transform(f: Integrand) -> Callable[[np.ndarray], np.ndarray]:
    """Bounded transform ``Sf(zh) = (1 - |zh|) f(zh / (1 - |zh|))`` on the closed unit ball.

    On ``|zh| = 1`` the value is ``f^inf(zh)``; that requires a strong recession.
    """
    if f.growth is None:
        raise IntegrandError("S-transform needs an integrand of linear growth")

    def sf(zh):
        zh = np.asarray(zh, dtype=float)
        r = _norm(zh)
        if np.any(r > 1.0 + 1e-12):
            raise IntegrandError("S-transform is defined on the closed unit ball")
        on_sphere = r >= 1.0 - 1e-14
        out = np.empty(r.shape)
        if np.any(on_sphere):
            out[on_sphere] = f.recession_value(zh[on_sphere])
        inside = ~on_sphere
        s = (1.0 - r[inside])[..., None]
        out[inside] = s[..., 0] * f(zh[inside] / s)
        return out

    return sf


def t_transform(g: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    """Inverse of ``s_transform`` on the open ball: ``Tg(z) = (1 + |z|) g(z / (1 + |z|))``."""

    def tg(z):
        z = np.asarray(z, dtype=float)
        s = (1.0 + _norm(z))[..., None]
        return s[..., 0] * g(z / s)

    return tg


def upper_recession(f: Integrand, z, with_flag: bool = False, n_perturb: int = 64, seed: int = 0):
    """Upper recession ``f^#(z)``.

    Uses the analytic strong recession when the integrand has one.  Otherwise
    estimates ``limsup f(t z') / t`` over ``t = 2^4, ..., 2^12`` and ``n_perturb``
    points ``z'`` in balls of radius ``|z| 2^-i / 4`` around ``z``; the running
    maximum from the top scale down is reported (an upper-estimate, flagged).
    """
    z = np.asarray(z, dtype=float)
    if f.recession is not None:
        v = float(f.recession_value(z))
        return (v, "analytic") if with_flag else v
    rng = np.random.default_rng(seed)
    r0 = max(float(_norm(z)), 1e-12) / 4.0
    vals = []
    for i, e in enumerate(range(4, 13)):
        t = 2.0**e
        pert = rng.standard_normal((n_perturb, z.size))
        pert *= (r0 * 2.0**-i * rng.random(n_perturb) ** (1.0 / z.size) / _norm(pert))[:, None]
        zz = np.vstack([z[None], z + pert])
        vals.append(float(np.max(f(t * zz) / t)))
    # limsup over a finite ladder: the tail maximum, stabilised on the last three scales
    v = float(np.max(vals[-3:]))
    return (v, "estimate") if with_flag else v


def projector_matrix(span_basis, dim: int) -> np.ndarray:
    b = np.asarray(span_basis, dtype=float).reshape(-1, dim)
    if b.shape[0]:
        g = b @ b.T
        if not np.allclose(g, np.eye(b.shape[0]), atol=1e-10):
            raise IntegrandError("span basis must be orthonormal")
    return b.T @ b


def tilde_transform(f: Integrand, span_basis, dim: Optional[int] = None) -> Integrand:
    """``f~(z) = f(p z)`` with ``p`` the orthogonal projector onto ``span(span_basis)``."""
    dim = dim if dim is not None else (f.dim if f.dim is not None else np.asarray(span_basis).shape[-1])
    p = projector_matrix(span_basis, dim)
    rec = None if f.recession is None else (lambda z: f.recession(z @ p))
    smoother = None if f.smoother is None else (lambda eps: tilde_transform(f.smoother(eps), span_basis, dim))
    return replace(
        f,
        fn=lambda z: f.fn(z @ p),
        grad=lambda z: f.grad(z @ p) @ p,
        recession=rec,
        smoother=smoother,
        label=f"tilde({f.label})",
        dim=dim,
    )


# --------------------------------------------------------------------------
# DSL
# --------------------------------------------------------------------------

BUILDERS = {
    "norm": norm,
    "area": area,
    "quadratic": quadratic,
    "radial_double_well": radial_double_well,
    "distance": distance,
    "weighted_norm": weighted_norm,
    "linear": linear,
    "constant": constant,
}


def parse(expr: str) -> Integrand:
    """Build an integrand from DSL text.  Only builder calls with literal
    arguments, numbers, ``+``, ``-`` and ``*`` are accepted."""
    text = expr.replace("−", "-").strip()
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise IntegrandError(f"cannot parse integrand {expr!r}: {exc.msg} (column {exc.offset})") from None
    out = _eval(tree.body, expr)
    if not isinstance(out, Integrand):
        return constant(out)
    return out


def _eval(node, src):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval(node.operand, src)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
        a, b = _eval(node.left, src), _eval(node.right, src)
        if isinstance(node.op, ast.Mult):
            if isinstance(a, Integrand) and isinstance(b, Integrand):
                raise IntegrandError("products of integrands are not supported")
            return a * b
        if isinstance(node.op, ast.Add):
            return a + b
        return a - b if isinstance(a, Integrand) or not isinstance(b, Integrand) else -b + a
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        name = node.func.id
        if name not in BUILDERS:
            raise IntegrandError(f"unknown integrand {name!r}; known: {', '.join(sorted(BUILDERS))}")
        try:
            args = [ast.literal_eval(a) for a in node.args]
            kwargs = {k.arg: ast.literal_eval(k.value) for k in node.keywords}
        except ValueError:
            raise IntegrandError(f"arguments of {name}() must be literals") from None
        try:
            return BUILDERS[name](*args, **kwargs)
        except TypeError as exc:
            raise IntegrandError(f"{name}(): {exc}") from None
    raise IntegrandError(f"unsupported expression {ast.get_source_segment(src, node)!r}")
