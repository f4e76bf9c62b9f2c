import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from constrained_control import geometry as geo
from constrained_control.dynamics import (
    CHUNK_SIZE, CoefficientField, NonFiniteState, PathBatch, TimeGrid, chunk_ranges, simulate_batch,
    simulate_controlled, simulate_paths, simulate_uncontrolled,
)
from constrained_control.rng import NoiseStream


def test_grid_basic():
    g = TimeGrid(0.0, 1.0, 0.005)
    assert g.n_steps == 200
    assert g.times[-1] == 1.0
    np.testing.assert_allclose(g.steps, 0.005)


def test_grid_last_step_clamped():
    g = TimeGrid(0.0, 1.0, 0.3)
    assert g.n_steps == 4
    assert g.times[-1] == 1.0
    assert g.steps[-1] == pytest.approx(0.1)


def test_grid_breakpoints():
    snapped = TimeGrid(0.0, 1.0, 0.005, breakpoints=(0.2,))
    assert snapped.n_steps == 200 and 0.2 in snapped.times
    split = TimeGrid(0.0, 1.0, 0.01, breakpoints=(0.2037,))
    assert split.n_steps == 101 and split.index_of(0.2037) == 21
    with pytest.raises(ValueError):
        split.index_of(0.2038)


@given(st.floats(0.0, 0.9), st.floats(0.001, 0.2), st.lists(st.floats(0.0, 1.0), max_size=3))
def test_grid_invariants(t0, dt, bps):
    g = TimeGrid(t0, 1.0, dt, tuple(bps))
    assert g.times[0] == t0 and g.times[-1] == 1.0
    assert np.all(g.steps > 0)
    assert np.all(g.steps <= dt * (1 + 1e-9))
    for b in bps:
        if t0 < b < 1.0:
            g.index_of(b)


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 0.1)


def test_brownian_terminal_moments():
    field = CoefficientField.constant([0.3], [[2.0]])
    b = simulate_paths(field, 0.0, [1.0], TimeGrid(0.0, 1.0, 0.05), 3, 40000)
    x = b.terminal_states[:, 0]
    assert abs(x.mean() - 1.3) < 4 * 2 / np.sqrt(len(x))
    assert abs(x.var() - 4.0) < 0.1


def test_results_do_not_depend_on_workers_or_chunking():
    field = CoefficientField.brownian(1)
    grid = TimeGrid(0.0, 1.0, 0.05)
    n = CHUNK_SIZE + 500
    one = simulate_paths(field, 0.0, [0.2], grid, 5, n, workers=1, constraint=geo.RunningHalfSpace())
    many = simulate_paths(field, 0.0, [0.2], grid, 5, n, workers=4, constraint=geo.RunningHalfSpace())
    np.testing.assert_array_equal(one.terminal_states, many.terminal_states)
    np.testing.assert_array_equal(one.killed, many.killed)
    tail = simulate_batch(field, 0.0, [0.2], grid, 5, np.arange(n - 10, n), constraint=geo.RunningHalfSpace())
    np.testing.assert_array_equal(tail.terminal_states, one.terminal_states[-10:])
    np.testing.assert_array_equal(tail.killed, one.killed[-10:])


def test_chunk_ranges_cover_paths():
    r = chunk_ranges(20000, 7)
    assert r[0] == (7, 7 + CHUNK_SIZE) and r[-1][1] == 20007
    assert sum(b - a for a, b in r) == 20000


def test_controlled_and_uncontrolled_share_noise():
    field = CoefficientField.brownian(1)
    grid = TimeGrid(0.0, 1.0, 0.1)
    stream = NoiseStream(2, 17)
    free = simulate_uncontrolled(field, (0.0, [0.0]), grid, stream)
    pushed = simulate_controlled(field, lambda t, x: np.full((len(x), 1), 0.5), (0.0, [0.0]), grid, stream)
    np.testing.assert_allclose(pushed.states - free.states, 0.5 * grid.times[:, None], atol=1e-12)
    assert pushed.control_energy_integral == pytest.approx(0.25)
    np.testing.assert_allclose(np.diff(free.states[:, 0]), stream.increments(10, 1, 0.1)[:, 0])


def test_running_cost_left_rectangle():
    field = CoefficientField.brownian(1)
    b = simulate_batch(field, 0.0, [0.0], TimeGrid(0.0, 1.0, 0.25), 0, [0, 1],
                       running_cost=lambda t, x: np.full(len(x), t))
    np.testing.assert_allclose(b.running_cost_integral, 0.25 * (0 + 0.25 + 0.5 + 0.75))


def test_costs_freeze_at_kill():
    field = CoefficientField.brownian(1)
    d = geo.RunningHalfSpace(threshold=0.0)
    grid = TimeGrid(0.0, 1.0, 0.01)
    f = lambda t, x: np.ones(len(x))  # noqa: E731
    stop = simulate_batch(field, 0.0, [0.1], grid, 4, np.arange(500), constraint=d, running_cost=f)
    go = simulate_batch(field, 0.0, [0.1], grid, 4, np.arange(500), constraint=d, running_cost=f,
                        costs_stop_at_kill=False)
    k = stop.killed
    assert k.any() and (~k).any()
    np.testing.assert_allclose(stop.running_cost_integral[k], stop.kill_index[k] * 0.01)
    np.testing.assert_allclose(go.running_cost_integral, 1.0)
    on_grid = stop.kill_mechanism == geo.KillMechanism.GRID_POINT
    bridged = stop.kill_mechanism == geo.KillMechanism.BRIDGE_CROSSING
    assert np.all(stop.kill_states[on_grid, 0] <= 0.0)
    assert np.all(stop.kill_states[bridged, 0] > 0.0)


def test_start_inside_d_is_killed_at_zero():
    b = simulate_batch(CoefficientField.brownian(1), 0.0, [-1.0], TimeGrid(0.0, 1.0, 0.1), 0, [0, 1],
                       constraint=geo.RunningHalfSpace())
    assert b.killed.all() and np.all(b.kill_index == 0)


def test_nonfinite_paths_are_flagged_not_fatal():
    def drift(t, x):
        with np.errstate(over="ignore"):
            return np.exp(np.abs(x) * 50)

    blowup = CoefficientField(1, 1, drift, lambda t, x: np.ones(np.shape(x) + (1,)))
    b = simulate_batch(blowup, 0.0, [10.0], TimeGrid(0.0, 1.0, 0.1), 0, [0, 1, 2])
    assert b.nonfinite.all()
    assert np.all(np.isfinite(b.terminal_states))
    with pytest.raises(NonFiniteState):
        simulate_uncontrolled(blowup, (0.0, [10.0]), TimeGrid(0.0, 1.0, 0.1), NoiseStream(0, 0))


def test_snapshots_and_stopped_states():
    d = geo.RunningHalfSpace(threshold=0.0)
    grid = TimeGrid(0.0, 1.0, 0.01)
    b = simulate_batch(CoefficientField.brownian(1), 0.0, [0.2], grid, 8, np.arange(300), constraint=d,
                       snapshot_indices=(50,), record=True)
    np.testing.assert_array_equal(b.snapshots[50], b.states[:, 50])
    stopped = b.stopped_snapshot(50)
    early = b.killed & (b.kill_index <= 50)
    np.testing.assert_array_equal(stopped[early], b.kill_states[early])
    np.testing.assert_array_equal(stopped[~early], b.states[~early, 50])


def test_concatenate_round_trip():
    field = CoefficientField.brownian(2)
    grid = TimeGrid(0.0, 0.5, 0.1)
    whole = simulate_batch(field, 0.0, [0.0, 1.0], grid, 1, np.arange(10))
    parts = [simulate_batch(field, 0.0, [0.0, 1.0], grid, 1, np.arange(a, b)) for a, b in ((0, 4), (4, 10))]
    joined = PathBatch.concatenate(parts)
    np.testing.assert_array_equal(joined.terminal_states, whole.terminal_states)
    np.testing.assert_array_equal(joined.path_indices, whole.path_indices)


def test_dimension_checks():
    with pytest.raises(geo.DimensionMismatch):
        simulate_batch(CoefficientField.brownian(2), 0.0, [0.0], TimeGrid(0.0, 1.0, 0.1), 0, [0])
    with pytest.raises(ValueError):
        simulate_batch(CoefficientField.brownian(1), 0.5, [0.0], TimeGrid(0.0, 1.0, 0.1), 0, [0])
