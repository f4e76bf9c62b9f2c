import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from constrained_control import estimator as est
from constrained_control import geometry as geo
from constrained_control import oracles
from constrained_control import policy as pol
from constrained_control.dynamics import CoefficientField

vectors = arrays(np.float64, st.integers(1, 4), elements=st.floats(-1e6, 1e6))


def fixed(a):
    a = np.asarray(a, dtype=float)
    return pol.FeedbackPolicy(lambda t, x: np.tile(a, (len(x), 1)), len(a))


def test_value_from_u_examples():
    assert pol.value_from_u(1.0) == 0.0
    assert math.isinf(pol.value_from_u(0.0))
    assert pol.value_from_u(0.5) == pytest.approx(1.386294, abs=1e-6)
    for bad in (-0.1, 1.0001, float("nan")):
        with pytest.raises(pol.OutOfRange):
            pol.value_from_u(bad)


@given(st.floats(1e-300, 1.0), st.floats(1e-300, 1.0))
def test_value_from_u_strictly_decreasing(a, b):
    if a < b:
        assert pol.value_from_u(a) > pol.value_from_u(b)


def test_clamp_examples():
    x = np.zeros((1, 2))
    np.testing.assert_array_equal(pol.clamp(fixed([3.0, 0.0]), 5.0)(0.0, x), [[3.0, 0.0]])
    np.testing.assert_allclose(pol.clamp(fixed([3.0, 4.0]), 2.5)(0.0, x), [[1.5, 2.0]])
    np.testing.assert_array_equal(pol.clamp(fixed([3e9, 4.0]), math.inf)(0.0, x), [[3e9, 4.0]])
    with pytest.raises(ValueError):
        pol.clamp(fixed([1.0]), 0.0)


@given(vectors, st.floats(1e-3, 1e5))
def test_clamp_properties(a, cap):
    raw = fixed(a)(0.0, np.zeros((1, 1)))[0]
    out, hit = pol.clamp(fixed(a), cap).evaluate(0.0, np.zeros((1, 1)))
    out = out[0]
    assert np.linalg.norm(out) <= cap * (1 + 1e-12)
    if np.linalg.norm(raw) <= cap:
        np.testing.assert_array_equal(out, raw)
        assert not hit[0]
    else:
        scale = np.linalg.norm(out) / np.linalg.norm(raw)
        np.testing.assert_allclose(out, scale * raw, rtol=1e-12, atol=1e-300)
        assert hit[0]


def test_single_state_evaluation():
    p = pol.clamp(fixed([3.0, 4.0]), 1.0)
    a, hit = p.evaluate(0.0, np.zeros(2))
    assert a.shape == (2,) and bool(hit)


def test_closed_form_examples():
    s1 = oracles.example1(1.0)
    a1 = pol.alpha_star_closed_form(s1)
    assert a1(0.0, np.array([0.0]))[0] == pytest.approx(2 * oracles.std_normal_pdf(0.0), rel=1e-14)
    assert a1(0.0, np.array([0.0]))[0] == pytest.approx(0.797885, abs=1e-6)
    s2 = oracles.example2(1.0)
    z = 1.0 / math.sqrt(0.25)
    expected = 2 / math.sqrt(0.25) * oracles.std_normal_pdf(z) / (2 * oracles.std_normal_cdf(z) - 1)
    assert pol.alpha_star_closed_form(s2)(0.75, np.array([1.0]))[0] == pytest.approx(expected, rel=1e-13)
    for t in (1.0, 1.5):
        assert a1(t, np.array([0.3]))[0] == 0.0


def test_control_pushes_towards_c():
    a = pol.alpha_star_closed_form(oracles.example1(1.0))
    assert np.all(a(0.5, np.linspace(-3, -0.01, 20)[:, None]) > 0)
    a3 = pol.alpha_star_closed_form(oracles.example3(1.0, 0.2, -2.0, 2.0))
    assert a3(0.1, np.array([0.5]))[0] > 0 and a3(0.1, np.array([-0.5]))[0] < 0


@pytest.mark.parametrize("name", ["example1", "example2", "example3"])
def test_closed_form_policy_equals_oracle_alpha(name):
    sol = oracles.REGISTRY[name](1.0)
    policy = pol.alpha_star_closed_form(sol)
    T = sol.terminal_time
    t = np.repeat(np.linspace(0.0, 0.9 * T, 12), 12)
    x = np.tile(np.linspace(-2.5, 2.5, 12), 12)[:, None]
    for ti, xi in zip(t, x):
        got = policy(ti, xi[None])[0, 0]
        want = sol.alpha_star(ti, xi[None])[0, 0]
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_closed_form_zero_outside_c():
    policy = pol.alpha_star_closed_form(oracles.example2(1.0))
    assert np.all(policy(0.3, np.linspace(-2, 0, 9)[:, None]) == 0.0)


def test_closed_form_uses_given_dispersion():
    sol = oracles.example1(1.0)
    doubled = pol.alpha_star_closed_form(sol, CoefficientField.constant([0.0], [[2.0]]))
    base = pol.alpha_star_closed_form(sol)
    x = np.array([[0.4]])
    assert doubled(0.2, x)[0, 0] == pytest.approx(2 * base(0.2, x)[0, 0])


def test_value_function_closed_form_is_infinite_exactly_on_d():
    vf = pol.value_function_closed_form(oracles.example2(1.0))
    assert math.isinf(float(vf(0.3, -0.1))) and math.isinf(float(vf(0.3, 0.0)))
    assert np.isfinite(float(vf(0.3, 0.01)))
    assert np.all(vf(0.3, np.linspace(0.01, 3, 20)[:, None]) >= 0)


def test_mc_policy_unconstrained_is_zero():
    p = est.ProblemSpec(CoefficientField.brownian(1), geo.Empty(), est.CostSpec(), 1.0)
    node = pol.mc_control_at(p, 0.2, [0.3], pol.MCPolicyConfig(n_paths=200, dt=0.05))
    assert node.flag is pol.NodeFlag.OK and node.control[0] == 0.0 and node.u == 1.0


def test_mc_policy_matches_closed_form_example1():
    sol = oracles.example1(1.0)
    p = est.ProblemSpec.from_solution(sol)
    node = pol.mc_control_at(p, 0.5, [0.5], pol.MCPolicyConfig(n_paths=20000, dt=0.005, master_seed=42))
    exact = float(sol.alpha_star(0.5, 0.5)[0])
    assert abs(node.control[0] - exact) <= max(4 * node.std_error[0], 0.05 * exact)


def test_mc_policy_degenerate_value():
    p = est.ProblemSpec.from_solution(oracles.example1(1.0))
    node = pol.mc_control_at(p, 0.9, [-3.0], pol.MCPolicyConfig(n_paths=500, dt=0.01))
    assert node.flag is pol.NodeFlag.DEGENERATE_VALUE and node.control[0] == 0.0


def test_mc_policy_lattice_interpolates_and_is_thread_safe():
    p = est.ProblemSpec.from_solution(oracles.example2(1.0))
    cfg = pol.MCPolicyConfig(n_paths=300, dt=0.05, space_spacing=0.25)
    policy = pol.alpha_star_mc(p, cfg)
    memo = policy.control.memo
    node = memo.node((4, 4))
    at_node = policy(0.2, np.array([[1.0]]))[0, 0]
    assert at_node == pytest.approx(node.control[0])
    mid = policy(0.2, np.array([[1.125]]))[0, 0]
    assert mid == pytest.approx(0.5 * (node.control[0] + memo.node((4, 5)).control[0]))
    assert policy(0.2, np.array([[-0.5]]))[0, 0] == 0.0

    results = []
    fresh = pol.alpha_star_mc(p, cfg)
    xs = np.linspace(0.3, 1.7, 7)[:, None]
    threads = [threading.Thread(target=lambda: results.append(fresh(0.1, xs))) for _ in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for r in results:
        np.testing.assert_array_equal(r, results[0])
    np.testing.assert_array_equal(results[0], policy(0.1, xs))


def test_mc_policy_probe_in_d_is_flagged():
    p = est.ProblemSpec.from_solution(oracles.example2(1.0))
    memo = pol.alpha_star_mc(p, pol.MCPolicyConfig(n_paths=100, dt=0.05, space_spacing=0.005)).control.memo
    assert memo.node((2, 1)).flag is pol.NodeFlag.PROBE_OUTSIDE_C
