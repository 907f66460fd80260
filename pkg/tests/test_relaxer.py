import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionrelax import relaxer as rx
from ionrelax.energy import total_energy
from ionrelax.relaxer import Bisect, Constant, Expo, GBisect, OptimizerKind, Status

from support import generic_table, mgo_table, perturbed_mgo, random_neutral_structure


# Directions -------------------------------------------------------------

def test_gd_direction_negates():
    g = np.array([0.0, 3.0, -4.0])
    d = rx.gd_direction(g)
    np.testing.assert_array_equal(d, -g)
    assert np.linalg.norm(d) == np.linalg.norm(g)
    np.testing.assert_array_equal(rx.gd_direction(np.zeros(3)), 0.0)


def test_cg_hand_example():
    d = rx.cg_direction(np.array([0.0, 1.0]), np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert rx.polak_ribiere_beta([0.0, 1.0], [1.0, 0.0]) == 1.0
    np.testing.assert_array_equal(d, [-1.0, -1.0])


def test_cg_first_iteration_and_equal_gradients():
    g = np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(rx.cg_direction(g), -g)
    np.testing.assert_array_equal(rx.cg_direction(g, g.copy(), np.ones(3)), -g)


def test_cg_zero_previous_gradient_restarts():
    g = np.array([1.0, 2.0])
    np.testing.assert_array_equal(rx.cg_direction(g, np.zeros(2), np.ones(2)), -g)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=8, max_size=8))
def test_cg_restart_never_negative(v):
    g, gp, dp = np.array(v[:3]), np.array(v[3:6]), np.array(v[5:8])
    d = rx.cg_direction(g, gp, dp)
    beta = rx.polak_ribiere_beta(g, gp)
    if beta <= 0 or not np.dot(gp, gp):
        np.testing.assert_array_equal(d, -g)
    else:
        np.testing.assert_allclose(d, -g + beta * dp)


# Schedules --------------------------------------------------------------

def _emit(schedule, gs):
    state = rx.schedule_start(schedule)
    out = [state.s]
    state = rx.ScheduleState(0, state.s, gs[0])
    for g in gs[1:]:
        state = rx.schedule_next(schedule, state, g)
        out.append(state.s)
    return out


def test_expo_closed_form():
    seq = _emit(Expo(1e-3, 1e-5, 0.999), [1.0] * 6001)
    for k in (0, 10, 1000, 4600, 6000):
        assert seq[k] == pytest.approx(max(1e-5, 1e-3 * 0.999 ** k), rel=1e-9)


def test_bisect_midpoint_at_period():
    seq = _emit(Bisect(1e-3, 1e-5, 100), [1.0] * 201)
    assert seq[99] == 1e-3
    assert seq[100] == pytest.approx(5.05e-4)
    assert seq[200] == pytest.approx(0.5 * (5.05e-4 + 1e-5))


def test_gbisect_threshold():
    sch = GBisect(1e-3, 1e-5, 10.0)
    state = rx.ScheduleState(0, 1e-3, 0.5)
    for g in (0.4, 0.2, 0.05):
        state = rx.schedule_next(sch, state, g)
        assert state.s == 1e-3
    state = rx.schedule_next(sch, state, 0.049)
    assert state.s == pytest.approx(5.05e-4)
    assert state.g_reference == 0.049


def test_constant_never_changes():
    assert set(_emit(Constant(2.5e-5), list(np.linspace(1, 0, 50)))) == {2.5e-5}


@pytest.mark.parametrize("bad", [lambda: Bisect(1e-5, 1e-3), lambda: Expo(1e-3, 1e-5, 1.0),
                                 lambda: GBisect(1e-3, 1e-5, 1.0), lambda: Bisect(1e-3, 1e-5, 0),
                                 lambda: Constant(0.0), lambda: Expo(1e-3, 0.0)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        bad()


schedules = st.one_of(
    st.builds(Constant, st.floats(1e-6, 1e-2)),
    st.builds(lambda a, b, p: Bisect(max(a, b), min(a, b), p),
              st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.integers(1, 20)),
    st.builds(lambda a, b, beta: GBisect(max(a, b), min(a, b), beta),
              st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.floats(1.01, 100)),
    st.builds(lambda a, b, gam: Expo(max(a, b), min(a, b), gam),
              st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.floats(0.01, 0.9999)),
)


@settings(max_examples=300, deadline=None)
@given(schedules, st.lists(st.floats(0, 1e3), min_size=2, max_size=200))
def test_schedules_monotone_and_bounded(schedule, gs):
    seq = _emit(schedule, gs)
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert min(seq) >= schedule.s_min


@pytest.mark.parametrize("text, expected", [
    ("const:1e-5", Constant(1e-5)),
    ("bisect:1e-3:1e-5:100", Bisect(1e-3, 1e-5, 100)),
    ("gbisect:1e-3:1e-5:10", GBisect(1e-3, 1e-5, 10.0)),
    ("gbisect:1e-3:1e-5:e", GBisect(1e-3, 1e-5, math.e)),
    ("expo:1e-3:1e-5:0.999", Expo(1e-3, 1e-5, 0.999)),
])
def test_parse_schedule(text, expected):
    assert rx.parse_schedule(text) == expected
    assert rx.parse_schedule(rx.format_schedule(expected)) == expected


@pytest.mark.parametrize("text", ["linear:1", "const:", "bisect:1e-3", "const:abc", "expo:1:2:0.5"])
def test_parse_schedule_rejects(text):
    with pytest.raises(ValueError):
        rx.parse_schedule(text)


# Updates ----------------------------------------------------------------

def test_apply_step_zero_is_identity():
    s = random_neutral_structure(0, 4)
    out, eps = rx.apply_step(s, np.zeros((3, 3)), np.zeros(18), 1e-3)
    np.testing.assert_array_equal(out.lattice, s.lattice)
    np.testing.assert_array_equal(out.positions, s.positions)
    np.testing.assert_array_equal(eps, 0.0)


def test_apply_step_positions_only():
    s = random_neutral_structure(0, 4)
    d = np.zeros(18)
    d[:12] = np.arange(12.0)
    out, _ = rx.apply_step(s, np.zeros((3, 3)), d, 0.01)
    np.testing.assert_array_equal(out.lattice, s.lattice)
    np.testing.assert_allclose(out.positions, s.positions + 0.01 * np.arange(12.0).reshape(4, 3))


def test_apply_step_xx_strain():
    s = random_neutral_structure(1, 4)
    d = np.zeros(18)
    d[12] = 1.0
    delta = 1e-3
    out, eps = rx.apply_step(s, np.zeros((3, 3)), d, delta)
    np.testing.assert_allclose(out.lattice[:, 0], s.lattice[:, 0] * (1 + delta))
    np.testing.assert_allclose(out.lattice[:, 1:], s.lattice[:, 1:])
    np.testing.assert_allclose(out.positions[:, 0], s.positions[:, 0] * (1 + delta))
    assert out.volume == pytest.approx(s.volume * (1 + delta), rel=1e-12)
    assert eps[0, 0] == delta


def test_strain_increment_halves_shear():
    eps = rx.strain_increment([0, 0, 0, 0.2, 0.4, 0.6])
    np.testing.assert_allclose(eps, [[0, 0.3, 0.2], [0.3, 0, 0.1], [0.2, 0.1, 0]])


def test_apply_step_rejects_collapse():
    s = random_neutral_structure(1, 4)
    d = np.zeros(18)
    d[12] = -1.0
    with pytest.raises(ValueError):
        rx.apply_step(s, np.zeros((3, 3)), d, 1.5)


def test_strain_reset():
    eps = np.full((3, 3), 0.1)
    np.testing.assert_array_equal(rx.strain_reset(eps, 21, 21), 0.0)
    assert rx.strain_reset(eps, 20, 21) is eps
    assert rx.RelaxationConfig().reset_period(4) == 21


# Catastrophe detector ---------------------------------------------------

def test_detector_rules():
    n = 101
    falling = np.linspace(0, -1, n)
    rising = np.linspace(1, 2, n)
    assert not rx.detect_catastrophe(np.zeros(n), np.ones(n))
    assert not rx.detect_catastrophe(falling, rising[::-1])
    assert rx.detect_catastrophe(falling, rising)
    assert not rx.detect_catastrophe(falling[1:], rising[1:])
    assert rx.detect_catastrophe(np.zeros(3), np.ones(3), min_distance=0.05)


# Relaxation loop --------------------------------------------------------

def test_descent_with_tiny_steps():
    s = random_neutral_structure(3, 6)
    energies = []
    rx.relax(s, generic_table(), OptimizerKind.GD, Constant(1e-6),
             rx.RelaxationConfig(max_iter=50, accuracy=1e-12),
             callback=lambda i, st_, e, g: energies.append(e))
    assert len(energies) == 51
    assert all(b <= a + 1e-9 for a, b in zip(energies, energies[1:]))


def test_numpy_and_compiled_backends_agree():
    s = random_neutral_structure(4, 4)
    kw = dict(max_iter=20, accuracy=1e-10)
    a = rx.relax(s, generic_table(), "cg", Constant(1e-4), rx.RelaxationConfig(**kw))
    b = rx.relax(s, generic_table(), "cg", Constant(1e-4),
                 rx.RelaxationConfig(backend="numpy", **kw))
    assert a.phi_final == pytest.approx(b.phi_final, rel=1e-10)
    np.testing.assert_allclose(a.structure.positions, b.structure.positions, atol=1e-10)


def test_mgo_converges_and_is_deterministic():
    s = perturbed_mgo(0)
    cfg = rx.RelaxationConfig(accuracy=1e-8, max_iter=5000)
    out = rx.relax(s, mgo_table(), "cg", Constant(3e-4), cfg)
    assert out.status is Status.SUCCESS
    assert out.g_final < cfg.tol and out.phi_final < out.phi0
    again = rx.relax(s, mgo_table(), "cg", Constant(3e-4), cfg)
    assert again.iterations == out.iterations
    assert again.phi_final == out.phi_final
    np.testing.assert_array_equal(again.structure.lattice, out.structure.lattice)


def test_energy_unchanged_by_reset():
    s = random_neutral_structure(2, 4)
    e = total_energy(s, generic_table(), 1e-10).total
    eps = rx.strain_reset(np.eye(3) * 0.01, 21, 21)
    out, _ = rx.apply_step(s, eps, np.zeros(18), 1.0)
    assert total_energy(out, generic_table(), 1e-10).total == e


def test_overtime_and_walltime():
    s = perturbed_mgo(1)
    over = rx.relax(s, mgo_table(), "gd", Constant(1e-5), rx.RelaxationConfig(max_iter=5))
    assert over.status is Status.OVERTIME and over.iterations == 5
    wall = rx.relax(s, mgo_table(), "gd", Constant(1e-5),
                    rx.RelaxationConfig(walltime=1e-9, max_iter=1000))
    assert wall.status is Status.WALLTIME


def test_trace_sampling_thins_long_runs():
    s = perturbed_mgo(2)
    cfg = rx.RelaxationConfig(max_iter=60, trace_full_limit=20, trace_stride=10, accuracy=1e-6)
    out = rx.relax(s, mgo_table(), "gd", Constant(1e-6), cfg)
    its = [t.iteration for t in out.trace]
    assert its == list(range(21)) + [30, 40, 50, 60]
