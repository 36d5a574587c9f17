import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree import gallery, io
from afree.cli import SELFTESTS, run
from afree.spectral import TorusField
from afree.young import Box, DiscreteMeasure, DiscreteYoungMeasure, pairing
from afree.integrands import norm

ZERO_YM = {"box": {"lower": [0, 0], "upper": [1, 1], "shape": [4, 4]},
           "nu": {"weights": [1.0], "points": [[0, 0]]}}
CONC_YM = {"box": {"lower": [0, 0], "upper": [1, 1], "shape": [16, 16]},
           "nu": {"weights": [1.0], "points": [[0, 0]]},
           "lambda": {"density": 1.0},
           "nu_inf": {"weights": [0.5, 0.5], "points": [[1, 0], [-1, 0]]}}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return p


def _report(capsys):
    return json.loads(capsys.readouterr().out)


# -- io -----------------------------------------------------------------------


def test_operator_file_round_trip(tmp_path):
    op = gallery.load("saint_venant_d2")
    io.write_operator(op, tmp_path / "sv.json")
    assert io.read_operator(tmp_path / "sv.json") == op
    assert io.read_operator("gallery/divergence2d") == gallery.load("divergence_d2")
    assert io.read_operator("curl_d2.json") == gallery.load("curl_d2")


def test_operator_file_errors_have_context(tmp_path):
    p = _write(tmp_path, "bad.json", '{"dimension": 2,\n "order": 1\n "terms": []}')
    with pytest.raises(io.FormatError, match=r"bad.json:3:"):
        io.read_operator(p)
    p = _write(tmp_path, "missing.json", {"dimension": 2, "order": 1})
    with pytest.raises(io.FormatError, match="fiber_in"):
        io.read_operator(p)


@given(st.sampled_from([4, 8]), st.sampled_from([1, 2, 3]), st.integers(1, 3), st.integers(0, 100))
def test_field_binary_round_trip(tmp_path_factory, n, d, m, seed):
    u = TorusField.random(n, d, m, seed=seed, band_limited=False)
    p = tmp_path_factory.mktemp("f") / "u.bin"
    io.write_field_binary(u, p)
    raw = p.read_bytes()
    assert np.frombuffer(raw[:24], "<i8").tolist() == [d, n, m]
    assert len(raw) == 24 + 8 * n**d * m
    assert np.array_equal(io.read_field_binary(p).values, u.values)


def test_field_binary_is_row_major(tmp_path):
    vals = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
    io.write_field_binary(TorusField(vals), tmp_path / "u.bin")
    body = np.frombuffer((tmp_path / "u.bin").read_bytes()[24:], "<f8")
    assert body[:4].tolist() == [0.0, 1.0, 2.0, 3.0]


def test_field_binary_errors(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(np.array([2, 4, 1], "<i8").tobytes() + b"\0" * 8)
    with pytest.raises(io.FormatError, match="expected 16 values"):
        io.read_field_binary(p)
    p.write_bytes(b"\0" * 5)
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_field_binary(p)


def test_field_csv_round_trip(tmp_path):
    u = TorusField.random(8, 2, 3, seed=1)
    io.write_field(u, tmp_path / "u.csv")
    assert np.array_equal(io.read_field(tmp_path / "u.csv").values, u.values)
    with pytest.raises(ValueError):
        io.write_field_csv(TorusField.zeros(4, 3, 1), tmp_path / "v.csv")


def test_field_csv_errors(tmp_path):
    p = _write(tmp_path, "b.csv", "x1,x2,u1\n0,0,1\n0,0.5,abc\n")
    with pytest.raises(io.FormatError, match=r"b.csv:3:"):
        io.read_field_csv(p)


def test_young_measure_round_trip(tmp_path):
    box = Box.unit(2, 4)
    lam = DiscreteMeasure.scalar(box, np.zeros(16), [[0.4, 0.6]], [2.0])
    ym = DiscreteYoungMeasure.homogeneous(box, (np.ones(1), np.array([[0.5, 1.0]])), lam,
                                          (np.full(2, 0.5), np.array([[1.0, 0], [-1.0, 0]])))
    io.write_young_measure(ym, tmp_path / "a.ym")
    back = io.read_young_measure(tmp_path / "a.ym")
    assert pairing(norm(), back).value == pytest.approx(pairing(norm(), ym).value)
    np.testing.assert_array_equal(back.atom_inf_points, ym.atom_inf_points)


def test_young_measure_errors(tmp_path):
    with pytest.raises(io.FormatError, match="missing field 'nu'"):
        io.read_young_measure(_write(tmp_path, "a.ym", {"box": ZERO_YM["box"]}))
    bad = dict(ZERO_YM, nu={"weights": [0.5], "points": [[0, 0]]})
    with pytest.raises(io.FormatError, match="sum to 1"):
        io.read_young_measure(_write(tmp_path, "b.ym", bad))
    bad = dict(ZERO_YM, box={"lower": [0, 0], "shape": [4, 4]})
    with pytest.raises(io.FormatError, match="upper"):
        io.read_young_measure(_write(tmp_path, "c.ym", bad))


def test_rounding():
    r = io.rounded({"a": [np.float64(1.23456789012345), 0.0], "b": np.bool_(True), "c": float("inf")})
    assert r == {"a": [1.23456789, 0.0], "b": True, "c": "inf"}


# -- cli ----------------------------------------------------------------------


def test_audit_divergence(capsys):
    assert run(["audit", "--op", "gallery/divergence2d"]) == 0
    rep = _report(capsys)
    assert rep["constant_rank"] is True and rep["r"] == 1


def test_audit_mueller_exit_2(capsys):
    assert run(["audit", "--op", "gallery/mueller_diagonal"]) == 2
    rep = _report(capsys)
    assert rep["constant_rank"] is False and rep["ranks_observed"] == [1, 2]


def test_pair_zero(tmp_path, capsys):
    p = _write(tmp_path, "zero.ym", ZERO_YM)
    assert run(["pair", "--ym", str(p), "--integrand", "norm()"]) == 0
    assert _report(capsys)["value"] == 0.0


def test_certify_exit_codes(tmp_path, capsys):
    p = _write(tmp_path, "c.ym", CONC_YM)
    assert run(["certify", "--op", "divergence2d", "--ym", str(p)]) == 0
    assert _report(capsys)["passed"] is True
    laminate = dict(CONC_YM, nu_inf={"weights": [0.5, 0.5], "points": [[0, 1], [0, -1]]})
    p2 = _write(tmp_path, "d.ym", laminate)
    assert run(["certify", "--op", "second_component_gradient_d2", "--ym", str(p2)]) == 2
    assert _report(capsys)["conditions"]["iii"]["passed"] is False


def test_exactness_exit_codes(capsys):
    assert run(["exactness", "--op", "curl2d", "--potential", "scalar_gradient_d2", "--samples", "200"]) == 0
    assert run(["exactness", "--op", "divergence2d", "--potential", "scalar_gradient_d2", "--samples", "200"]) == 2


def test_cone_membership(capsys):
    assert run(["cone", "--op", "divergence2d", "--vector", "[1, 2]", "--samples", "100"]) == 0
    rep = _report(capsys)
    assert rep["member"] is True and rep["wave_cone_span_dim"] == 2


def test_project_writes_field(tmp_path, capsys):
    out = tmp_path / "z.bin"
    assert run(["project", "--op", "divergence2d", "--grid", "16", "--field-out", str(out)]) == 0
    rep = _report(capsys)
    assert rep["afree_residual"] < 1e-12
    assert io.read_field(out).n == 16


def test_envelope_report(tmp_path, capsys):
    out = tmp_path / "env.json"
    assert run(["envelope", "--op", "laplacian2d", "--integrand", "radial_double_well()", "--point", "[0.5]",
                "--K", "2", "--out", str(out)]) == 0
    rep = _report(capsys)
    assert rep["value"] == pytest.approx(0.5625)
    assert json.loads(out.read_text()) == rep


def test_generate(tmp_path, capsys):
    p = _write(tmp_path, "c.ym", CONC_YM)
    assert run(["generate", "--op", "divergence2d", "--ym", str(p), "--stages", "2"]) == 0
    rep = _report(capsys)
    assert rep["extrapolated"] == pytest.approx(rep["target"], rel=2e-2)


def test_approx_writes_csv_and_field(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["approx", "--grid", "128", "--half-width", "2", "--out", str(out)]) == 0
    rows = (tmp_path / "run.csv").read_text().splitlines()
    assert rows[0].startswith("epsilon,area,area_error,residual") and len(rows) == 4
    assert io.read_field(tmp_path / "run.field").n == 128


def test_malformed_input_exit_1(tmp_path, capsys):
    p = _write(tmp_path, "bad.ym", '{"box": \n [}')
    assert run(["pair", "--ym", str(p)]) == 1
    assert "bad.ym:2:" in capsys.readouterr().err
    assert run(["audit", "--op", "no_such_operator"]) == 1
    assert run(["envelope", "--op", "divergence2d", "--integrand", "norm("]) == 1


def test_reports_are_deterministic(capsys):
    args = ["envelope", "--op", "divergence2d", "--K", "2", "--grid", "16", "--restarts", "2", "--seed", "3"]
    run(args)
    a = capsys.readouterr().out
    run(args)
    assert capsys.readouterr().out == a


@pytest.mark.parametrize("name", sorted(SELFTESTS))
def test_selftests(name, capsys):
    assert run([name, "--selftest"]) == 0
    assert all(_report(capsys)["results"].values())
