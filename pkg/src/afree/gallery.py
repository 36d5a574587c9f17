"""Bundled operators.

The JSON files under ``gallery/`` are the versioned definitions; the builder
functions below generate them (``python -m afree.gallery`` rewrites the
directory) and double as convenient constructors in tests.

Fiber conventions: matrices ``M in R^{m x d}`` are flattened row-major,
symmetric tensors use the orthonormal basis ``e11, (e12+e21)/sqrt2, e22``
(and its 3d analogue), so Euclidean norms on ``W`` match Frobenius norms.
"""

from __future__ import annotations

import itertools
import json
from functools import lru_cache
from importlib import resources
from math import factorial, prod
from pathlib import Path

import numpy as np

from .operators import LinearOperator, MultiIndex, OperatorError

SQ2 = np.sqrt(2.0)


def _e(d, j):
    v = [0] * d
    v[j] = 1
    return tuple(v)


def _sym_basis(d):
    """Orthonormal basis of symmetric d x d matrices."""
    out = []
    for i in range(d):
        for j in range(i, d):
            m = np.zeros((d, d))
            if i == j:
                m[i, i] = 1.0
            else:
                m[i, j] = m[j, i] = 1 / SQ2
            out.append(m)
    return out


def gradient(d: int = 2, m: int = 2) -> LinearOperator:
    """``Du`` for ``u: R^d -> R^m``; the output index is ``i * d + j`` for ``d_j u_i``."""
    mats = []
    for j in range(d):
        a = np.zeros((m * d, m))
        for i in range(m):
            a[i * d + j, i] = 1.0
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"gradient_d{d}_m{m}")


def scalar_gradient(d: int = 2) -> LinearOperator:
    op = gradient(d, 1)
    return LinearOperator(op.d, op.dim_in, op.dim_out, 1, op.terms, name=f"scalar_gradient_d{d}")


def k_gradient(d: int = 2, k: int = 2) -> LinearOperator:
    """``D^k`` on scalars, valued in symmetric k-tensors (orthonormal coordinates)."""
    # coordinates indexed by sorted k-tuples of directions; weight sqrt(multinomial)
    combos = list(itertools.combinations_with_replacement(range(d), k))
    terms = []
    for alpha in itertools.product(range(k + 1), repeat=d):
        if sum(alpha) != k:
            continue
        mat = np.zeros((len(combos), 1))
        for r, c in enumerate(combos):
            counts = tuple(c.count(j) for j in range(d))
            if counts == alpha:
                mult = factorial(k) // prod(factorial(a) for a in alpha)
                mat[r, 0] = np.sqrt(mult)
        terms.append((MultiIndex(alpha), mat))
    return LinearOperator(d, 1, len(combos), k, tuple(terms), name=f"k_gradient_d{d}_k{k}")


def symmetric_gradient(d: int = 2) -> LinearOperator:
    basis = _sym_basis(d)
    mats = []
    for j in range(d):
        a = np.zeros((len(basis), d))
        for r, b in enumerate(basis):
            # <sym(u (x) e_j), b> = sum_i u_i b_ij
            a[r, :] = b[:, j]
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"symmetric_gradient_d{d}")


def saint_venant_2d() -> LinearOperator:
    """Compatibility operator ``d22 e11 - 2 d12 e12 + d11 e22`` annihilating symmetric gradients."""
    terms = (
        (MultiIndex((0, 2)), [[1.0, 0.0, 0.0]]),
        (MultiIndex((1, 1)), [[0.0, -SQ2, 0.0]]),
        (MultiIndex((2, 0)), [[0.0, 0.0, 1.0]]),
    )
    return LinearOperator(2, 3, 1, 2, terms, name="saint_venant_d2")


def deviatoric(d: int = 2) -> LinearOperator:
    """Trace-free part of the symmetric gradient, in an orthonormal trace-free basis."""
    sym = _sym_basis(d)
    eye = np.eye(d) / np.sqrt(d)
    dev = []
    for b in sym:
        b = b - np.tensordot(b, eye) * eye
        dev.append(b.reshape(-1))
    dev = np.array(dev)
    _, s, vt = np.linalg.svd(dev)
    basis = [v.reshape(d, d) for v in vt[: int(np.sum(s > 1e-12))]]
    mats = []
    for j in range(d):
        a = np.zeros((len(basis), d))
        for r, b in enumerate(basis):
            a[r, :] = b[:, j]
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"deviatoric_d{d}")


def laplacian(d: int = 2) -> LinearOperator:
    terms = tuple((MultiIndex(tuple(2 * x for x in _e(d, j))), [[1.0]]) for j in range(d))
    return LinearOperator(d, 1, 1, 2, terms, name=f"laplacian_d{d}")


def divergence(d: int = 2) -> LinearOperator:
    mats = []
    for j in range(d):
        a = np.zeros((1, d))
        a[0, j] = 1.0
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"divergence_d{d}")


def curl_2d() -> LinearOperator:
    """``d1 w2 - d2 w1``."""
    return LinearOperator.first_order([[[0.0, 1.0]], [[-1.0, 0.0]]], name="curl_d2")


def rotated_gradient() -> LinearOperator:
    """``u -> (d2 u, -d1 u)``, a potential for the 2d divergence."""
    return LinearOperator.first_order([[[0.0], [-1.0]], [[1.0], [0.0]]], name="rotated_gradient_d2")


def mueller_diagonal() -> LinearOperator:
    """``(w1, w2) -> (d2 w1, d1 w2)``; rank 1 on the axes, 2 elsewhere."""
    return LinearOperator.first_order([[[0, 0], [0, 1.0]], [[1.0, 0], [0, 0]]], name="mueller_diagonal")


def second_component_gradient(d: int = 2) -> LinearOperator:
    """``w -> D w_2`` on ``W = R^2``; its wave cone spans only ``e_1``."""
    mats = []
    for j in range(d):
        a = np.zeros((d, 2))
        a[j, 1] = 1.0
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"second_component_gradient_d{d}")


def current_boundary(d: int, m: int) -> LinearOperator:
    """Boundary ``partial_m`` on m-vectors of R^d, via ``<dT, w> = <T, d w>``.

    Basis of m-vectors: ``e_I`` for increasing multi-indices ``I`` in
    lexicographic order.
    """
    if not (1 <= m <= d <= 3):
        raise OperatorError("current boundary gallery covers 1 <= m <= d <= 3")
    src = list(itertools.combinations(range(d), m))
    tgt = list(itertools.combinations(range(d), m - 1))
    mats = []
    for j in range(d):
        a = np.zeros((max(len(tgt), 1), len(src)))
        for c, idx in enumerate(src):
            if j not in idx:
                continue
            pos = idx.index(j)
            rest = idx[:pos] + idx[pos + 1 :]
            # d(w_J dx_J) pairs with e_I through the sign of moving dx_j to slot pos
            a[tgt.index(rest), c] = -((-1) ** pos)
        mats.append(a)
    return LinearOperator.first_order(mats, name=f"current_boundary_d{d}_m{m}")


def builders() -> dict:
    ops = [
        gradient(2, 2),
        gradient(3, 3),
        scalar_gradient(2),
        scalar_gradient(3),
        k_gradient(2, 2),
        symmetric_gradient(2),
        symmetric_gradient(3),
        saint_venant_2d(),
        deviatoric(2),
        deviatoric(3),
        laplacian(2),
        laplacian(3),
        divergence(2),
        divergence(3),
        curl_2d(),
        rotated_gradient(),
        mueller_diagonal(),
        second_component_gradient(2),
    ]
    for d in (2, 3):
        for m in range(1, d + 1):
            ops.append(current_boundary(d, m))
    return {op.name: op for op in ops}


# short aliases used on the command line
ALIASES = {
    "divergence2d": "divergence_d2",
    "divergence3d": "divergence_d3",
    "laplacian2d": "laplacian_d2",
    "curl2d": "curl_d2",
    "gradient2d": "gradient_d2_m2",
    "rotated_gradient": "rotated_gradient_d2",
}


def _gallery_dir():
    return resources.files("afree") / "gallery"


def names() -> list[str]:
    return sorted(p.name[:-5] for p in _gallery_dir().iterdir() if p.name.endswith(".json"))


@lru_cache(maxsize=None)
def load(name: str) -> LinearOperator:
    key = ALIASES.get(name, name)
    path = _gallery_dir() / f"{key}.json"
    if not path.is_file():
        raise OperatorError(f"unknown gallery operator {name!r}; available: {', '.join(names())}")
    return LinearOperator.from_dict(json.loads(path.read_text()), name=key)


def write_gallery(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, op in builders().items():
        (directory / f"{name}.json").write_text(json.dumps(op.to_dict(), indent=1) + "\n")


if __name__ == "__main__":
    write_gallery(Path(__file__).with_name("gallery"))
