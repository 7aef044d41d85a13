import json

import numpy as np
import pytest

from regimelq import Generator, TimeGrid
from regimelq.errors import SpecLoadError
from regimelq.problem import (
    homogenize,
    load_spec,
    make_spec,
    render_spec,
    validate_spec,
)
from regimelq.providers import TableProvider

GEN = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])


def test_driven_fixture_fields(driven_suite):
    spec = driven_suite.spec
    assert spec.n == spec.m == 1 and spec.D == 2 and spec.T == 1.0
    assert spec.A.eval(0.3, 0)[0, 0] == -1.0
    assert spec.A.eval(0.3, 1)[0, 0] == -2.0
    assert spec.B.eval(0.7, 1)[0, 0] == 1.0
    assert np.isclose(spec.C.eval(0.1, 0)[0, 0], np.sqrt(2.0))
    assert np.isclose(spec.C.eval(0.1, 1)[0, 0], 2.0)
    assert spec.Dm.is_zero()
    assert np.allclose(spec.G, 1.0)
    assert spec.b.is_modulated


def test_asymmetric_weight_rejected():
    with pytest.raises(SpecLoadError) as err:
        make_spec(1.0, 2, 1, GEN, Q=np.array([[1.0, 0.2], [0.1, 1.0]]))
    assert "Q" in str(err.value)


def test_roundoff_asymmetry_symmetrized():
    q = np.array([[1.0, 0.5 + 1e-13], [0.5, 1.0]])
    spec = make_spec(1.0, 2, 1, GEN, Q=q)
    vals = spec.Q.eval(0.0, 0)
    assert np.array_equal(vals, vals.T)


def test_zero_problem_loads():
    spec = make_spec(1.0, 2, 2, GEN, G=np.eye(2))
    assert spec.is_homogeneous()
    report = validate_spec(spec, TimeGrid(0.0, 1.0, 100))
    assert report.passed and not report.flags


def test_missing_field_names_the_offender():
    doc = render_spec(make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1))))
    del doc["dims"]
    with pytest.raises(SpecLoadError):
        load_spec(doc)


def test_render_load_roundtrip(driven_suite):
    doc = json.loads(json.dumps(render_spec(driven_suite.spec)))
    again = load_spec(doc)
    samples = np.linspace(0.0, 1.0, 101)
    for field in ("A", "B", "C", "Dm", "Q", "S", "R"):
        a = getattr(driven_suite.spec, field).node_table(samples)
        b = getattr(again, field).node_table(samples)
        assert np.allclose(a, b, atol=1e-12), field
    assert np.allclose(driven_suite.spec.G, again.G)
    assert again.b.is_modulated
    assert np.allclose(again.b.wiener_loading,
                       driven_suite.spec.b.wiener_loading)
    # modulated base round-trips through its payload
    for s in (0.0, 0.5, 0.999):
        assert np.isclose(again.b.base.value(s),
                          driven_suite.spec.b.base.value(s))


def test_homogenize_zeroes_drives(driven_suite):
    spec0 = homogenize(driven_suite.spec)
    assert spec0.is_homogeneous()
    assert not spec0.b.is_modulated
    # structure preserved
    samples = np.linspace(0.0, 1.0, 31)
    for field in ("A", "B", "C", "Dm", "Q", "S", "R"):
        assert np.allclose(
            getattr(spec0, field).node_table(samples),
            getattr(driven_suite.spec, field).node_table(samples),
        )
    assert np.allclose(spec0.G, driven_suite.spec.G)


def test_homogenize_idempotent(driven_suite):
    once = homogenize(driven_suite.spec)
    twice = homogenize(once)
    assert twice.b.is_zero() and twice.sigma.is_zero()
    assert not np.any(twice.g)
    assert twice.q.is_zero() and twice.rho.is_zero()


def test_validate_flags_modulated(driven_suite):
    report = validate_spec(driven_suite.spec, TimeGrid(0.0, 1.0, 500))
    assert report.passed
    assert report.flags.get("b") == "path-modulated"


def test_validate_warns_on_steep_growth():
    # 1/(1-s) sampled as a table: integrable, not square-integrable
    times = np.linspace(0.0, 0.9999, 400)
    vals = (1.0 / (1.0 - times))[:, None]
    b = TableProvider(times, vals, (1,), 2, "b")
    spec = make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1)), b=b)
    report = validate_spec(spec, TimeGrid(0.0, 1.0, 200))
    assert report.passed
    assert any("b" in w for w in report.warnings)


def test_validate_hard_fails_on_nan():
    times = np.array([0.0, 1.0])
    vals = np.array([[1.0], [1.0]])
    b = TableProvider(times, vals, (1,), 2, "b")
    b.values[0] = np.nan  # corrupt after construction
    spec = make_spec(1.0, 1, 1, GEN, G=np.ones((2, 1, 1)))
    spec.b = b
    report = validate_spec(spec, TimeGrid(0.0, 1.0, 100))
    assert not report.passed
