import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from constrained_control import config as cfgmod
from constrained_control import geometry as geo


def test_defaults_round_trip():
    cfg = cfgmod.from_dict({})
    assert cfg.grid.dt == 0.005 and cfg.mc.master_seed == 42 and cfg.policy.clamp_max == 1e4
    assert cfgmod.build_problem(cfg).name == "example1"
    t, x = cfgmod.default_start(cfg)
    assert t == 0.0 and x.tolist() == [-1.5]


def test_hash_ignores_execution_settings():
    a = cfgmod.from_dict({"mc": {"workers": 1}})
    b = cfgmod.from_dict({"mc": {"workers": 8}, "outputs": {"csv_path": "x.csv", "timestamp": False}})
    c = cfgmod.from_dict({"mc": {"master_seed": 7}})
    assert a.content_hash() == b.content_hash() != c.content_hash()


@given(st.integers(1, 16))
def test_hash_invariant_under_workers(w):
    assert cfgmod.from_dict({"mc": {"workers": w}}).content_hash() == cfgmod.ExperimentConfig().content_hash()


@pytest.mark.parametrize("doc,fragment", [
    ({"bogus": {}}, "top-level"),
    ({"grid": {"dT": 1}}, "unknown field"),
    ({"grid": {"dt": -1}}, "grid.dt"),
    ({"grid": {"dt": 2.0, "T": 1.0}}, "grid.dt"),
    ({"mc": {"n_paths": 1.5}}, "mc.n_paths"),
    ({"mc": {"master_seed": -1}}, "master_seed"),
    ({"mc": {"workers": True}}, "mc.workers"),
    ({"problem": {"name": "example9"}}, "unknown problem"),
    ({"problem": {"name": "example3", "x0": 2, "x1": -2}}, "problem"),
    ({"problem": {"constraint": {"kind": "ball"}}}, "kind"),
    ({"problem": {"constraint": {"kind": "running_halfspace", "axis": 3}}}, "axis"),
    ({"problem": {"constraint": {"kind": "time_slab", "t0": 1.5, "lower": [0], "upper": [1]}}}, "t0"),
    ({"problem": {"drift": ["x_2"]}}, "drift"),
    ({"problem": {"dispersion": [[]]}}, "dispersion"),
    ({"problem": {"running_cost": "-1"}}, "non-negative"),
    ({"problem": []}, "problem"),
])
def test_validation_errors(doc, fragment):
    with pytest.raises(cfgmod.ConfigError, match=fragment):
        cfgmod.from_dict(doc)


def test_load_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"grid": {\n  "dt": }\n}')
    with pytest.raises(cfgmod.ConfigError, match="line 2"):
        cfgmod.load(str(p))
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(str(tmp_path / "missing.json"))


def test_inline_problem(tmp_path):
    doc = {
        "problem": {"dim": 2, "drift": ["-x_1", "0"], "dispersion": [["1", "0"], ["0", "0.5"]],
                    "constraint": {"kind": "running_halfspace", "axis": 1, "threshold": -1.0, "side": "below"},
                    "running_cost": "x_1^2", "terminal_cost": "2"},
        "start": {"x": [0.0, 0.0]},
    }
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    prob = cfgmod.build_problem(cfgmod.load(str(p)))
    assert prob.dim == 2 and prob.field.dim_noise == 2
    assert isinstance(prob.constraint, geo.RunningHalfSpace)
    x = np.array([[2.0, 0.0]])
    np.testing.assert_allclose(prob.field.drift_at(0.0, x), [[-2.0, 0.0]])
    np.testing.assert_allclose(prob.field.dispersion_at(0.0, x), [[[1.0, 0.0], [0.0, 0.5]]])
    np.testing.assert_allclose(prob.costs.running_cost(0.0, x), [4.0])
    assert prob.costs.terminal_constant == 2.0
    assert bool(prob.constraint.contains(0.0, np.array([0.0, -1.5])))


def test_builtin_problems():
    for name in ("example1", "example2", "example3"):
        prob = cfgmod.build_problem(cfgmod.from_dict({"problem": {"name": name}}))
        assert prob.solution is not None and prob.name == name
    un = cfgmod.build_problem(cfgmod.from_dict({"problem": {"name": "unconstrained", "running_cost": "0.5"}}))
    assert un.solution is not None
    varying = cfgmod.build_problem(cfgmod.from_dict({"problem": {"name": "unconstrained", "running_cost": "x^2"}}))
    assert varying.solution is None


def test_start_dimension_checked():
    cfg = cfgmod.from_dict({"start": {"x": [1.0, 2.0]}})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.default_start(cfg)
