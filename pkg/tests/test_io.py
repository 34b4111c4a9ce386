from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simdata import simulate
from spherereg import io
from spherereg.estimation import Dataset, fit_svmf, fit_vmf
from spherereg.exceptions import ValidationError
from spherereg.simulation import Model


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _unit_rows(rng, n, p):
    x = rng.normal(size=(n, p))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# CSV


def test_load_response_file(tmp_path):
    rng = np.random.default_rng(0)
    y = _unit_rows(rng, 10, 3)
    xe = rng.normal(size=(10, 2))
    io.write_table(tmp_path / "d.csv", ["y1", "y2", "y3", "xe1", "xe2"], list(y.T) + list(xe.T))
    d = io.load_csv(tmp_path / "d.csv")
    assert d.n == 10 and d.p == 3 and d.dims == (3, 0, 2)
    assert np.array_equal(d.y, y) or np.allclose(d.y, y, atol=1e-15)


def test_named_columns_and_intercept(tmp_path):
    rng = np.random.default_rng(1)
    y = _unit_rows(rng, 6, 3)
    x = rng.normal(size=6)
    io.write_table(tmp_path / "d.csv", ["lat", "a", "b", "c", "depth"], [x, *y.T, x])
    spec = io.ColumnSpec(("a", "b", "c"), (), ("depth",), add_intercept=True)
    d = io.load_csv(tmp_path / "d.csv", spec)
    assert d.dims == (3, 0, 2)
    assert np.all(d.xe[:, 0] == 1.0)
    assert np.allclose(d.xe[:, 1], x, rtol=0, atol=0)


def test_non_unit_row_rejected_with_index(tmp_path):
    text = "y1,y2,y3,xe1,xe2\n1,0,0,1,2\n0.9,0,0,1,2\n0,1,0,3,4\n"
    with pytest.raises(ValidationError, match="rows 2"):
        io.load_csv(_write(tmp_path / "d.csv", text))


def test_near_unit_rows_renormalised(tmp_path):
    text = "y1,y2,y3,xe1,xe2\n1.0000004,0,0,1,2\n0,1,0,3,4\n0,0,1,5,6\n"
    d = io.load_csv(_write(tmp_path / "d.csv", text))
    assert d.y[0, 0] == 1.0


def test_non_finite_rows_rejected(tmp_path):
    text = "y1,y2,y3,xe1,xe2\n1,0,0,1,2\n0,1,0,nan,4\n0,0,1,inf,6\n"
    with pytest.raises(ValidationError, match="rows 2, 3"):
        io.load_csv(_write(tmp_path / "d.csv", text))


def test_malformed_and_missing(tmp_path):
    with pytest.raises(ValidationError, match="row 1"):
        io.load_csv(_write(tmp_path / "a.csv", "y1,y2,y3,xe1,xe2\n1,0,x,1,2\n"))
    with pytest.raises(ValidationError, match="missing columns: q"):
        io.load_csv(_write(tmp_path / "b.csv", "y1,y2,y3\n1,0,0\n"), io.ColumnSpec(("y1", "y2"), (), ("q",)))
    with pytest.raises(ValidationError, match="header"):
        io.load_csv(_write(tmp_path / "c.csv", ""))
    with pytest.raises(ValidationError, match="disjoint"):
        io.ColumnSpec(("a", "b"), ("a",))


def test_csv_round_trip_value_identical(tmp_path):
    sim = simulate((3, 3, 2), 25, 20.0, seed=40)
    d = Dataset(sim.data.y, sim.data.xs, sim.data.xe, np.linspace(0.5, 1.5, 25))
    io.save_csv(tmp_path / "a.csv", d)
    d1 = io.load_csv(tmp_path / "a.csv", io.ColumnSpec(weights="w"))
    io.save_csv(tmp_path / "b.csv", d1)
    d2 = io.load_csv(tmp_path / "b.csv", io.ColumnSpec(weights="w"))
    for a, b, c in ((d.y, d1.y, d2.y), (d.xs, d1.xs, d2.xs), (d.xe, d1.xe, d2.xe), (d.weights, d1.weights, d2.weights)):
        assert np.array_equal(b, c)
        assert np.allclose(a, b, rtol=1e-15, atol=1e-16)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_float_cell_round_trip(x):
    assert float(io._cell(x)) == x
    assert float(io.dumps(x)) == x


# ---------------------------------------------------------------------------
# JSON


def test_dumps_canonical():
    s = io.dumps({"b": [1.0, 0.1, np.float64(-0.25)], "a": None, "c": True, "d": np.arange(2)})
    assert s == '{"a":null,"b":[1,0.10000000000000001,-0.25],"c":true,"d":[0,1]}\n'


@pytest.fixture(scope="module")
def fits():
    sim = simulate((3, 3, 2), 150, 50.0, scales=[2.0, 0.5], seed=41)
    v = fit_vmf(sim.data)
    s = fit_svmf(sim.data, init_vmf=v)
    return sim, v, s


def test_fit_json_byte_identical(tmp_path, fits):
    sim, v, s = fits
    pre = io.Preprocessing(("y1", "y2", "y3"), ("xs1", "xs2", "xs3"), ("xe1", "xe2"), False, {"xe2": (0.1, 2.0)})
    for f in (v, s):
        io.save_fit(tmp_path / "f.json", f, pre)
        first = (tmp_path / "f.json").read_bytes()
        g, pre2 = io.load_fit(tmp_path / "f.json")
        io.save_fit(tmp_path / "g.json", g, pre2)
        assert (tmp_path / "g.json").read_bytes() == first
        assert pre2 == pre
        assert g.loglik == f.loglik and g.dof == f.dof
        assert np.array_equal(g.predict(sim.data.xs, sim.data.xe), f.predict(sim.data.xs, sim.data.xe))
        doc = json.loads(first)
        assert doc["schema_version"] == io.SCHEMA_VERSION
        assert doc["aic"] == f.aic


def test_fit_json_rejects_other_versions(fits):
    _, v, _ = fits
    doc = io.fit_to_dict(v)
    doc["schema_version"] = 99
    with pytest.raises(ValidationError, match="schema_version"):
        io.fit_from_dict(doc)


def test_model_json_round_trip(fits):
    sim, _, s = fits
    m = sim.model
    m2 = io.model_from_dict(json.loads(io.dumps(io.model_to_dict(m))))
    xs, xe = sim.data.xs, sim.data.xe
    assert np.allclose(m2.mean(xs, xe), m.mean(xs, xe), atol=1e-14)
    assert m2.error.kappa == m.error.kappa
    assert np.array_equal(m2.error.scales, m.error.scales)
    # a fit document doubles as a model description
    mf = io.model_from_dict(io.fit_to_dict(s))
    assert isinstance(mf, Model)
    assert np.allclose(mf.mean(xs, xe), s.predict(xs, xe), atol=1e-14)


# ---------------------------------------------------------------------------
# Moment tensors


def test_mt_examples():
    r = 1 / math.sqrt(2)
    assert np.allclose(io.mt_to_s4([r, -r, 0, 0, 0, 0]), [1, 0, 0, 0, 0], atol=1e-15)
    assert np.allclose(io.mt_to_s4([0, 0, 0, r, 0, 0]), [0, 0, 1, 0, 0], atol=1e-15)
    assert np.allclose(io.s4_to_mt([1, 0, 0, 0, 0]), [r, -r, 0, 0, 0, 0], atol=1e-15)


def _random_mt(rng, n):
    m = rng.normal(size=(n, 6)) * rng.uniform(0.1, 1e3, size=(n, 1))
    return io.normalize_mt(m)


def test_mt_isometry_and_inverse():
    rng = np.random.default_rng(42)
    m = _random_mt(rng, 1000)
    v = io.mt_to_s4(m)
    assert np.max(np.abs(np.linalg.norm(v, axis=1) - 1)) < 1e-10
    assert np.max(np.abs(io.s4_to_mt(v) - m)) < 1e-12
    u = _unit_rows(rng, 1000, 5)
    back = io.mt_to_s4(io.s4_to_mt(u))
    assert np.max(np.abs(back - u)) < 1e-12
    t = io.s4_to_mt(u)
    assert np.all(t[:, 0] + t[:, 1] + t[:, 2] == 0.0)


def test_mt_inner_products_preserved():
    rng = np.random.default_rng(43)
    a, b = _random_mt(rng, 50), _random_mt(rng, 50)

    def frob(x, y):
        return np.sum(x[:, :3] * y[:, :3], axis=1) + 2 * np.sum(x[:, 3:] * y[:, 3:], axis=1)

    assert np.allclose(np.sum(io.mt_to_s4(a) * io.mt_to_s4(b), axis=1), frob(a, b), atol=1e-14)


def test_mt_validation():
    with pytest.raises(ValidationError, match="trace"):
        io.mt_to_s4([1, 0, 0, 0, 0, 0])
    with pytest.raises(ValidationError, match="Frobenius"):
        io.mt_to_s4([1, -1, 0, 0, 0, 0])
    with pytest.raises(ValidationError, match="isotropic"):
        io.normalize_mt([1, 1, 1, 0, 0, 0])
