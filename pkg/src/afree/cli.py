"""Command-line front end.

Every subcommand prints a JSON report (floats rounded to 10 significant
digits) and writes it to ``--out`` when given.  Exit codes: 0 success, 2 a
check came out negative (audit, exactness, certificate, selftest), 1 bad
input or crash.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import io
from .approximation import area_strict_run, circle_measure
from .integrands import IntegrandError, norm, parse, radial_double_well
from .operators import (
    OperatorError,
    constant_rank_audit,
    exactness_check,
    image_cone_span,
    wave_cone_membership,
)
from .quasiconvexity import quasiconvex_envelope
from .spectral import (
    RangeError,
    TorusField,
    a_representative,
    afree_part,
    apply_operator,
    sobolev_norm,
)
from .young import (
    Box,
    DiscreteMeasure,
    DiscreteYoungMeasure,
    concentration_builder,
    generation_estimate,
    jensen_certificate,
    pairing,
)

log = logging.getLogger("afree")

EXIT_OK, EXIT_CRASH, EXIT_NEGATIVE = 0, 1, 2
DEFAULT_SMOOTHING = 1e-3


def _vector(text: Optional[str], what: str) -> np.ndarray:
    if text is None:
        raise ValueError(f"--{what} is required")
    try:
        v = json.loads(text.replace("−", "-"))
    except json.JSONDecodeError:
        v = [float(t) for t in text.replace(",", " ").split()]
    return np.atleast_1d(np.asarray(v, dtype=float))


def _op(args, attr: str = "op"):
    spec = getattr(args, attr)
    if spec is None:
        raise ValueError(f"--{attr.replace('_', '-')} is required")
    return io.read_operator(spec)


# --------------------------------------------------------------------------
# subcommands; each returns (report dict, passed flag)
# --------------------------------------------------------------------------


def cmd_audit(args):
    op = _op(args)
    rep = constant_rank_audit(op, n_samples=args.samples, tol=args.tol if args.tol is not None else 1e-10)
    out = {
        "operator": op.name,
        "constant_rank": rep.constant_rank,
        "r": rep.r,
        "ranks_observed": sorted(set(int(r) for r in rep.ranks)),
        "span_dim": rep.span_dim,
        "samples": len(rep.ranks),
    }
    return out, rep.constant_rank


def cmd_cone(args):
    op = _op(args)
    rep = constant_rank_audit(op, n_samples=args.samples)
    out = {"operator": op.name, "wave_cone_span_dim": rep.span_dim,
           "image_cone_span_dim": int(image_cone_span(op, args.samples).shape[0])}
    if args.vector is not None:
        mem = wave_cone_membership(op, _vector(args.vector, "vector"), tol=args.tol or 1e-8, seed=args.seed)
        out.update(member=mem.member, residual=mem.residual, best_xi=mem.best_xi)
    return out, True


def cmd_exactness(args):
    a, b = _op(args), _op(args, "potential")
    rep = exactness_check(a, b, n_samples=args.samples, tol=args.tol if args.tol is not None else 1e-10)
    out = {"annihilator": a.name, "potential": b.name, "exact": rep.passed, "max_gap": rep.max_gap,
           "dim_mismatches": rep.dim_mismatches, "worst_xi": rep.worst_xi, "samples": rep.n_samples}
    return out, rep.passed


def cmd_project(args):
    op = _op(args)
    if args.field:
        u = io.read_field(args.field)
    else:
        u = TorusField.random(args.grid or (32 if op.d <= 2 else 16), op.d, op.dim_in, seed=args.seed)
    t = a_representative(op, u)
    w = afree_part(op, u)
    nu = max(sobolev_norm(u, 0.0), 1e-300)
    out = {
        "operator": op.name,
        "grid": u.n,
        "mean": u.mean(),
        "representative_norm": sobolev_norm(t, 0.0) / nu,
        "afree_residual": sobolev_norm(apply_operator(op, w), -op.order) / nu,
        "representative_mean": float(np.max(np.abs(t.mean()))),
    }
    if args.field_out:
        io.write_field(w, args.field_out)
        out["field"] = str(args.field_out)
    return out, True


def cmd_envelope(args):
    op = _op(args)
    f = parse(args.integrand or "radial_double_well()")
    z = _vector(args.point, "point") if args.point else np.zeros(op.dim_in)
    smoothing = args.smoothing
    if smoothing is None and not f.differentiable:
        smoothing = DEFAULT_SMOOTHING
    res = quasiconvex_envelope(op, f, z, K=args.K, grid=args.grid, restarts=args.restarts, iters=args.iters,
                               smoothing=smoothing, seed=args.seed, workers=args.threads)
    if args.field_out:
        io.write_field(res.field, args.field_out)
    out = {"operator": op.name, "integrand": f.label, "point": z, "K": res.K, "grid": res.field.n,
           "value": res.value, "f_at_point": res.f_at_z, "restart_values": res.restart_values,
           "smoothing": smoothing, "upper_bound": True, "diverged": res.diverged}
    return out, True


def cmd_certify(args):
    op = _op(args)
    ym = io.read_young_measure(_required(args.ym, "ym"))
    rep = jensen_certificate(ym, op, tol=args.tol if args.tol is not None else 1e-8)
    out = {
        "operator": op.name,
        "passed": rep.passed,
        "conditions": {k: {"passed": c.passed, "worst": c.worst, "where": c.where, "detail": c.detail}
                       for k, c in rep.conditions.items()},
        "family": rep.family,
        "notes": rep.notes,
    }
    return out, rep.passed


def _homogeneous_data(ym: DiscreteYoungMeasure):
    """``(A, lambda_spec, p)`` when ``ym`` is homogeneous with ``nu = delta_A``."""
    if ym.nu_weights.shape[1] != 1 or not np.allclose(ym.nu_points, ym.nu_points[:1]):
        raise ValueError("generate needs nu = delta_A, the same in every cell")
    if not (np.allclose(ym.inf_weights, ym.inf_weights[:1]) and np.allclose(ym.inf_points, ym.inf_points[:1])):
        raise ValueError("generate needs the same nu_inf at every site")
    dens = ym.lam.density[:, 0]
    if not np.allclose(dens, dens[0]):
        raise ValueError("generate needs a constant lambda density (or atoms only)")
    if not np.allclose(ym.box.lower, 0.0) or not np.allclose(ym.box.upper, 1.0):
        raise ValueError("generate works on the unit box")
    if ym.lam.n_atoms:
        if dens[0] != 0:
            raise ValueError("generate cannot mix a lambda density with atoms")
        lam = list(zip(ym.lam.positions, ym.lam.masses))
    else:
        lam = float(dens[0])
    return ym.nu_points[0, 0], lam, (ym.inf_weights[0], ym.inf_points[0])


def cmd_generate(args):
    op = _op(args)
    ym = io.read_young_measure(_required(args.ym, "ym"))
    A, lam, p = _homogeneous_data(ym)
    run = concentration_builder(op, A, lam, p, n_stages=args.stages)
    f = parse(args.integrand or "norm()")
    est = generation_estimate(run.fields, [f], scales=run.scales)
    target = pairing(f, ym).value
    if args.field_out:
        io.write_field(run.fields[-1], args.field_out)
    out = {"operator": op.name, "integrand": f.label, "scales": run.scales, "pairings": est.values[0],
           "extrapolated": est.limits[0], "error_bar": est.error_bars[0], "target": target,
           "residual_before": run.residual_before, "residual_after": run.residual_after,
           "witnesses": [w.tolist() for w in run.witnesses]}
    return out, True


def cmd_pair(args):
    ym = io.read_young_measure(_required(args.ym, "ym"))
    f = parse(args.integrand or "norm()")
    rep = pairing(f, ym)
    return {"integrand": f.label, "value": rep.value, "oscillation": rep.oscillation_part,
            "concentration": rep.concentration_part}, True


def cmd_approx(args):
    op = _op(args) if args.op else io.read_operator("divergence_d2")
    n = args.grid or 256
    half = args.half_width
    box = Box(np.full(2, -half), np.full(2, half), (n, n))
    if args.ym:
        raise ValueError("approx takes its target from --radius (circle measure); --ym is not used")
    mu = circle_measure(box, n_atoms=args.atoms, radius=args.radius)
    h = float(box.h[0])
    run = area_strict_run(op, mu, [16 * h, 8 * h, 4 * h])
    rows = run.table()
    if args.out:
        out_csv = Path(args.out).with_suffix(".csv")
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow(io.rounded(r))
        field_path = Path(args.field_out) if args.field_out else Path(args.out).with_suffix(".field")
        io.write_field(run.stages[-1].field, field_path)
    out = {"operator": op.name, "grid": n, "target_area": run.target_area, "total_variation": run.total_variation,
           "stages": rows}
    return out, True


def _required(v, name):
    if v is None:
        raise ValueError(f"--{name} is required")
    return v


# --------------------------------------------------------------------------
# self tests: the trivial examples of each module
# --------------------------------------------------------------------------


def _unit_ym(nu, m=2, lam=0.0, nu_inf=None, n=4):
    box = Box.unit(2, n)
    nu_inf = nu_inf or (np.ones(1), np.eye(m)[:1])
    return DiscreteYoungMeasure.homogeneous(box, nu, DiscreteMeasure.scalar(box, np.full(box.ncells, lam)), nu_inf)


def _st_audit():
    from . import gallery
    yield "divergence r=1", constant_rank_audit(gallery.load("divergence2d")).r == 1
    yield "mueller flagged", not constant_rank_audit(gallery.load("mueller_diagonal")).constant_rank


def _st_cone():
    from . import gallery
    yield "divergence span = R^2", constant_rank_audit(gallery.load("divergence2d")).span_dim == 2
    yield "laplacian span = {0}", constant_rank_audit(gallery.load("laplacian2d")).span_dim == 0


def _st_exactness():
    from . import gallery
    grad = gallery.load("scalar_gradient_d2")
    yield "(curl, grad) exact", exactness_check(gallery.load("curl2d"), grad, 200).passed
    yield "(div, grad) not exact", not exactness_check(gallery.load("divergence2d"), grad, 200).passed


def _st_project():
    from . import gallery
    op = gallery.load("divergence2d")
    c = TorusField.constant([1.0, -2.0], 8, 2)
    yield "constant field is A-free", float(np.max(np.abs(a_representative(op, c).values))) < 1e-14
    u = TorusField.random(16, 2, 2, seed=0)
    yield "T[u] has mean zero", float(np.max(np.abs(a_representative(op, u).mean()))) < 1e-12


def _st_envelope():
    from . import gallery
    op = gallery.load("laplacian2d")
    f = radial_double_well()
    z = np.array([0.3])
    yield "elliptic envelope = f", abs(quasiconvex_envelope(op, f, z, K=2).value - float(f(z))) < 1e-12


def _st_certify():
    from . import gallery
    ym = _unit_ym((np.ones(1), np.zeros((1, 2))), lam=1.0, nu_inf=(np.full(2, 0.5), np.array([[1.0, 0], [-1.0, 0]])),
                  n=16)
    yield "concentration triple certified (div)", jensen_certificate(ym, gallery.load("divergence2d")).passed
    lap_ym = _unit_ym((np.ones(1), np.zeros((1, 1))), m=1, lam=1.0, nu_inf=(np.full(2, 0.5), np.array([[1.0], [-1.0]])),
                      n=16)
    rep = jensen_certificate(lap_ym, gallery.load("laplacian2d"))
    yield "laplacian rejects via (iii)", rep.failed() == ["iii"]


def _st_generate():
    f = norm()
    fields = [TorusField.constant([3.0, 4.0], 8, 2) for _ in range(3)]
    yield "constant sequence pairs to f(A)", abs(generation_estimate(fields, [f]).limits[0] - 5.0) < 1e-12


def _st_pair():
    yield "delta_0 with norm is 0", pairing(norm(), _unit_ym((np.ones(1), np.zeros((1, 2))))).value == 0.0


def _st_approx():
    from . import gallery
    box = Box(np.full(2, -1.0), np.full(2, 1.0), (32, 32))
    run = area_strict_run(gallery.load("divergence2d"), DiscreteMeasure.zero(box, 2), [0.25])
    st = run.stages[0]
    yield "zero measure gives zero fields", float(np.max(np.abs(st.field.values))) == 0.0
    yield "zero measure area = |box|", abs(st.area - 4.0) < 1e-12


SELFTESTS: dict[str, Callable] = {
    "audit": _st_audit, "cone": _st_cone, "exactness": _st_exactness, "project": _st_project,
    "envelope": _st_envelope, "certify": _st_certify, "generate": _st_generate, "pair": _st_pair,
    "approx": _st_approx,
}

COMMANDS: dict[str, Callable] = {
    "audit": cmd_audit, "cone": cmd_cone, "exactness": cmd_exactness, "project": cmd_project,
    "envelope": cmd_envelope, "certify": cmd_certify, "generate": cmd_generate, "pair": cmd_pair,
    "approx": cmd_approx,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--op", help="operator JSON file, gallery/<name> or a gallery name")
    common.add_argument("--grid", type=int, default=None, help="grid points per direction (power of two)")
    common.add_argument("--tol", type=float, default=None, help="tolerance of the check being run")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="report path")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--selftest", action="store_true", help="run the module's trivial examples and exit")
    common.add_argument("--samples", type=int, default=1000, help="sphere samples for symbol checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="afree", description="A-free measures, envelopes and Young measures")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("audit", parents=[common], help="constant-rank audit of an operator")
    c = sub.add_parser("cone", parents=[common], help="wave-cone span and membership")
    c.add_argument("--vector", help="amplitude to test, e.g. '[1, 0]'")
    e = sub.add_parser("exactness", parents=[common], help="check im B(xi) = ker A(xi)")
    e.add_argument("--potential", help="potential operator B")
    pr = sub.add_parser("project", parents=[common], help="split a field into mean, A-free part and T[u]")
    pr.add_argument("--field", help="input field (binary or .csv); random when omitted")
    pr.add_argument("--field-out", help="write the A-free part here")
    en = sub.add_parser("envelope", parents=[common], help="upper bound for the A-quasiconvex envelope")
    en.add_argument("--integrand", help="integrand expression, e.g. 'radial_double_well()'")
    en.add_argument("--point", help="evaluation point, e.g. '[0, 0]'")
    en.add_argument("--K", type=int, default=8)
    en.add_argument("--restarts", type=int, default=8)
    en.add_argument("--iters", type=int, default=500)
    en.add_argument("--smoothing", type=float, default=None)
    en.add_argument("--field-out", help="write the optimal test field here")
    ce = sub.add_parser("certify", parents=[common], help="Jensen certificate of a Young measure")
    ce.add_argument("--ym", help="Young-measure JSON file")
    g = sub.add_parser("generate", parents=[common], help="build a generating sequence and estimate pairings")
    g.add_argument("--ym", help="Young-measure JSON file (homogeneous, nu = delta_A)")
    g.add_argument("--integrand")
    g.add_argument("--stages", type=int, default=3)
    g.add_argument("--field-out", help="write the last field here")
    pa = sub.add_parser("pair", parents=[common], help="pair an integrand with a Young measure")
    pa.add_argument("--ym")
    pa.add_argument("--integrand")
    ap = sub.add_parser("approx", parents=[common], help="area-strict approximation of a circle measure")
    ap.add_argument("--ym", help=argparse.SUPPRESS)
    ap.add_argument("--radius", type=float, default=1.0)
    ap.add_argument("--half-width", type=float, default=2.0, help="domain is (-w, w)^2")
    ap.add_argument("--atoms", type=int, default=256)
    ap.add_argument("--field-out", help="final field path (default: <out>.field)")
    return p


def _selftest(name: str) -> tuple[dict, bool]:
    results = {label: bool(ok) for label, ok in SELFTESTS[name]()}
    return {"selftest": name, "results": results}, all(results.values())


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.threads = max(1, args.threads)
    t0 = time.perf_counter()
    try:
        report, ok = _selftest(args.command) if args.selftest else COMMANDS[args.command](args)
    except (io.FormatError, OperatorError, IntegrandError, RangeError, ValueError, OSError) as exc:
        print(f"afree {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CRASH
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    report["status"] = "ok" if ok else "negative"
    text = json.dumps(io.rounded(report), indent=1)
    print(text)
    if args.out and args.command != "approx":
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if ok else EXIT_NEGATIVE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
