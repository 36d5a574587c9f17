"""File formats: operators (JSON), fields (flat binary, CSV) and Young measures (JSON).

Field binary layout: three little-endian int64 ``(d, grid_n, fiber)`` followed
by ``grid_n**d * fiber`` little-endian float64 values in row-major order with
the fiber index last.  The period is not stored; readers take ``length``.

Young-measure files are JSON objects::

    {"box": {"lower": [...], "upper": [...], "shape": [...]},
     "nu": {"weights": [...], "points": [[...], ...]},
     "lambda": {"density": 0.0, "atoms": [{"position": [...], "mass": 1.0}]},
     "nu_inf": {"weights": [...], "points": [[...], ...]},
     "atom_nu_inf": {...}}

``nu``/``nu_inf``/``atom_nu_inf`` entries are either one ``(weights, points)``
pair shared by every cell (atom) or per-cell lists; ``lambda.density`` is a
scalar or one value per cell.  ``lambda`` and ``nu_inf`` may be omitted.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Union

import numpy as np

from . import gallery
from .operators import LinearOperator, OperatorError
from .spectral import TorusField
from .young import Box, DiscreteMeasure, DiscreteYoungMeasure

PathLike = Union[str, Path]

_HEADER = np.dtype("<i8")
_VALUES = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed input file; the message carries the file and line/field context."""


def _load_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------


def read_operator(spec: PathLike) -> LinearOperator:
    """Operator from a JSON file, ``gallery/<name>`` or a bare gallery name."""
    s = str(spec)
    path = Path(s)
    if path.is_file():
        data = _load_json(path)
        if not isinstance(data, dict):
            raise FormatError(f"{path}: top level must be an object")
        try:
            return LinearOperator.from_dict(data, name=data.get("name", path.stem))
        except OperatorError as exc:
            raise FormatError(f"{path}: {exc}") from None
    name = s[len("gallery/"):] if s.startswith("gallery/") else s
    name = name[:-5] if name.endswith(".json") else name
    return gallery.load(name)


def write_operator(op: LinearOperator, path: PathLike) -> None:
    Path(path).write_text(json.dumps(op.to_dict(), indent=1) + "\n")


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------


def write_field_binary(u: TorusField, path: PathLike) -> None:
    header = np.array([u.d, u.n, u.fiber], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(u.values, dtype=_VALUES).tobytes())


def read_field_binary(path: PathLike, length: float = 1.0) -> TorusField:
    raw = Path(path).read_bytes()
    if len(raw) < 3 * _HEADER.itemsize:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    d, n, m = (int(v) for v in np.frombuffer(raw[:24], dtype=_HEADER))
    if d < 1 or n < 1 or m < 1:
        raise FormatError(f"{path}: invalid header d={d} grid_n={n} fiber={m}")
    count = n**d * m
    body = raw[24:]
    if len(body) != count * _VALUES.itemsize:
        raise FormatError(f"{path}: expected {count} values for d={d} grid_n={n} fiber={m}, "
                          f"found {len(body) / _VALUES.itemsize:g}")
    vals = np.frombuffer(body, dtype=_VALUES).reshape((n,) * d + (m,)).copy()
    return TorusField(vals, length)


def write_field_csv(u: TorusField, path: PathLike) -> None:
    """One row per grid node: coordinates ``x1..xd`` then components ``u1..um``."""
    if u.d > 2:
        raise ValueError("CSV output is limited to d <= 2")
    x = u.coords().reshape(-1, u.d)
    v = u.values.reshape(-1, u.fiber)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(u.d)] + [f"u{i + 1}" for i in range(u.fiber)])
        for xi, vi in zip(x, v):
            w.writerow([repr(float(a)) for a in xi] + [repr(float(a)) for a in vi])


def read_field_csv(path: PathLike, length: float = 1.0) -> TorusField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    head = rows[0]
    d = sum(1 for c in head if c.startswith("x"))
    m = len(head) - d
    if d not in (1, 2) or m < 1:
        raise FormatError(f"{path}:1: header must be x1..xd,u1..um with d <= 2")
    data = np.empty((len(rows) - 1, m))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != d + m:
            raise FormatError(f"{path}:{i}: expected {d + m} columns, found {len(row)}")
        try:
            data[i - 2] = [float(c) for c in row[d:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from None
    n = round(data.shape[0] ** (1.0 / d))
    if n**d != data.shape[0]:
        raise FormatError(f"{path}: {data.shape[0]} rows is not a square grid in d={d}")
    return TorusField(data.reshape((n,) * d + (m,)), length)


def read_field(path: PathLike, length: float = 1.0) -> TorusField:
    return read_field_csv(path, length) if str(path).endswith(".csv") else read_field_binary(path, length)


def write_field(u: TorusField, path: PathLike) -> None:
    if str(path).endswith(".csv"):
        write_field_csv(u, path)
    else:
        write_field_binary(u, path)


# --------------------------------------------------------------------------
# Young measures
# --------------------------------------------------------------------------


def _pair(obj, where: str, n: int, m: int):
    if not isinstance(obj, dict) or "weights" not in obj or "points" not in obj:
        raise FormatError(f"{where}: expected an object with 'weights' and 'points'")
    try:
        w = np.asarray(obj["weights"], dtype=float)
        p = np.asarray(obj["points"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None
    if w.ndim == 1:
        p = p.reshape(w.size, -1) if p.size else np.zeros((w.size, m))
        w, p = np.tile(w, (n, 1)), np.tile(p, (n, 1, 1))
    if w.ndim != 2 or p.ndim != 3 or w.shape[0] != n or p.shape[:2] != w.shape:
        raise FormatError(f"{where}: expected one shared (weights, points) pair or {n} per-site lists")
    if p.shape[2] != m:
        raise FormatError(f"{where}: points have dimension {p.shape[2]}, expected {m}")
    return w, p


def read_young_measure(path: PathLike) -> DiscreteYoungMeasure:
    data = _load_json(path)
    return young_measure_from_dict(data, source=str(path))


def young_measure_from_dict(data: dict, source: str = "<young measure>") -> DiscreteYoungMeasure:
    if not isinstance(data, dict):
        raise FormatError(f"{source}: top level must be an object")
    for key in ("box", "nu"):
        if key not in data:
            raise FormatError(f"{source}: missing field '{key}'")
    b = data["box"]
    try:
        box = Box(np.asarray(b["lower"], float), np.asarray(b["upper"], float), tuple(b["shape"]))
    except KeyError as exc:
        raise FormatError(f"{source}: box: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{source}: box: {exc}") from None
    n = box.ncells
    pts = np.asarray(data["nu"].get("points", []), dtype=float) if isinstance(data["nu"], dict) else np.zeros(0)
    m = pts.shape[-1] if pts.ndim >= 2 else 1
    nu_w, nu_p = _pair(data["nu"], f"{source}: nu", n, m)

    lam_d = data.get("lambda", {})
    dens = np.asarray(lam_d.get("density", 0.0), dtype=float)
    dens = np.full(n, float(dens)) if dens.ndim == 0 else dens.reshape(-1)
    atoms = lam_d.get("atoms", [])
    try:
        positions = np.array([a["position"] for a in atoms], dtype=float).reshape(len(atoms), box.d)
        masses = np.array([a["mass"] for a in atoms], dtype=float)
    except KeyError as exc:
        raise FormatError(f"{source}: lambda.atoms: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{source}: lambda.atoms: {exc}") from None
    try:
        lam = DiscreteMeasure.scalar(box, dens, positions if atoms else None, masses if atoms else None)
    except ValueError as exc:
        raise FormatError(f"{source}: lambda: {exc}") from None

    e1 = np.zeros(m)
    e1[0] = 1.0
    inf = data.get("nu_inf", {"weights": [1.0], "points": [e1.tolist()]})
    inf_w, inf_p = _pair(inf, f"{source}: nu_inf", n, m)
    aw = ap = None
    if lam.n_atoms:
        ainf = data.get("atom_nu_inf")
        if ainf is None:
            if np.asarray(inf["weights"]).ndim != 1:
                raise FormatError(f"{source}: lambda has atoms; give atom_nu_inf")
            ainf = inf
        aw, ap = _pair(ainf, f"{source}: atom_nu_inf", lam.n_atoms, m)
    try:
        return DiscreteYoungMeasure(box, nu_w, nu_p, lam, inf_w, inf_p, aw, ap)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def young_measure_to_dict(ym: DiscreteYoungMeasure) -> dict:
    lam = ym.lam
    out = {
        "box": {"lower": ym.box.lower.tolist(), "upper": ym.box.upper.tolist(), "shape": list(ym.box.shape)},
        "nu": {"weights": ym.nu_weights.tolist(), "points": ym.nu_points.tolist()},
        "lambda": {
            "density": lam.density[:, 0].tolist(),
            "atoms": [{"position": x.tolist(), "mass": float(c)} for x, c in zip(lam.positions, lam.masses)],
        },
        "nu_inf": {"weights": ym.inf_weights.tolist(), "points": ym.inf_points.tolist()},
    }
    if lam.n_atoms:
        out["atom_nu_inf"] = {"weights": ym.atom_inf_weights.tolist(), "points": ym.atom_inf_points.tolist()}
    return out


def write_young_measure(ym: DiscreteYoungMeasure, path: PathLike) -> None:
    Path(path).write_text(json.dumps(young_measure_to_dict(ym)) + "\n")


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def rounded(obj, digits: int = 10):
    """Recursively round floats to ``digits`` significant digits for reports."""
    if isinstance(obj, dict):
        return {k: rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return rounded(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x) or x == 0.0:
            return x if np.isfinite(x) else str(x)
        return float(f"{x:.{digits}g}")
    return obj
