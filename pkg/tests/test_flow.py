import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctrlmix.flow import (ControlSignal, ControlSystem, const_flow, d_eta_S, drift_flow, flow_batch, integrate,
                          time_one_map, variational_d_eta_S)
from ctrlmix.geometry import Circle, Torus
from ctrlmix.noise import NoiseLaw
from helpers import rk4_reference


def test_circle_constant_drift_rotates_by_one():
    sys1 = ControlSystem.from_exprs(Circle(), ["1"], [["0"]])
    for u0 in (0.0, 2.0, 6.0):
        end = time_one_map(sys1, [u0], ControlSignal.zero(1))
        assert Circle().dist(end, [u0 + 1.0]) <= 1e-12


def test_translation_moves_by_control(translation):
    ctl = ControlSignal.constant([0.3, -0.7], 1.0)
    end = integrate(translation, ctl, [1.0, 1.0]).end
    assert Torus(2).dist(end, [1.3, 0.3]) <= 1e-12


def test_equilibrium_stays_put():
    sysc = ControlSystem.from_exprs(Circle(), ["sin(x1)"], [["0"]])
    end = integrate(sysc, ControlSignal.zero(1, 3.0), [math.pi]).end
    assert abs(end[0] - math.pi) <= 1e-12


def test_sphere_rotation_matches_closed_form(sphere):
    S = sphere
    sysr = ControlSystem.from_exprs(S, ["0", "0", "0"], [["-x2", "x1", "0"]])
    p0 = np.array([0.6, 0.0, 0.8])
    for t in (0.5, 1.0, 2.7):
        end = integrate(sysr, ControlSignal.constant([1.0], t), p0).end
        exact = [0.6 * math.cos(t), 0.6 * math.sin(t), 0.8]
        assert np.linalg.norm(end - exact) <= 1e-9
        assert abs(np.linalg.norm(end) - 1) <= 1e-15 * 10


def test_trajectories_stay_on_manifold(bench, sphere):
    law = NoiseLaw(1, 3, 2.0, 1.0, seed=1)
    sig = law.signal(law.sample_coefficients(np.random.default_rng(0)))
    tr = integrate(bench, sig, [1.0, 2.0])
    assert np.all((tr.points >= 0) & (tr.points < 2 * math.pi))
    syss = ControlSystem.from_exprs(sphere, ["x2", "-x1", "0"], [["0", "-x3", "x2"]])
    tr = integrate(syss, sig, [0.0, 0.6, 0.8])
    np.testing.assert_allclose(np.linalg.norm(tr.points, axis=1), 1.0, atol=1e-14)


def test_matches_plain_rk4_reference(bench):
    # unwrapped reference with a hand-written loop, same step
    f = lambda x: np.array([0.7, math.sin(x[0])])  # noqa: E731
    ref = rk4_reference(f, [0.2, 0.3], 1.0, 256)
    end = integrate(bench, ControlSignal.constant([0.7], 1.0), [0.2, 0.3]).end
    assert Torus(2).dist(end, np.mod(ref, 2 * math.pi)) <= 1e-13


def test_time_one_map_rejects_wrong_duration(bench):
    with pytest.raises(ValueError, match="duration 1"):
        time_one_map(bench, [0.0, 0.0], ControlSignal.zero(1, 0.5))


def test_integrate_validates(bench):
    with pytest.raises(ValueError, match="channels"):
        integrate(bench, ControlSignal.zero(2), [0.0, 0.0])
    with pytest.raises(ValueError, match="horizon"):
        integrate(bench, ControlSignal.zero(1), [0.0, 0.0], T=2.0)
    tr = integrate(bench, ControlSignal.zero(1, 2.0), [0.0, 1.0], T=1.0)
    assert tr.times[-1] == 1.0


def test_composition_of_time_one_maps(bench):
    law = NoiseLaw(1, 3, 1.0, 1.0)
    rng = np.random.default_rng(2)
    e1, e2 = (law.signal(law.sample_coefficients(rng)) for _ in range(2))
    u = np.array([0.4, 5.0])
    two = time_one_map(bench, time_one_map(bench, u, e1), e2)
    joint = integrate(bench, e1.then(e2), u).end
    assert Torus(2).dist(two, joint) <= 1e-10


@given(st.floats(0.05, 0.95))
def test_flow_property_at_split(t):
    law = NoiseLaw(1, 3, 1.5, 1.0)
    sysb = ControlSystem.from_exprs(Torus(2), ["0", "sin(x1)"], [["1", "0"]])
    eta = law.signal(law.sample_coefficients(np.random.default_rng(3)))
    left, right = eta.split(t)
    u = np.array([1.0, 2.0])
    # the split signal is integrated with the same per-piece step counts
    whole = integrate(sysb, left.then(right), u).end
    parts = integrate(sysb, right, integrate(sysb, left, u).end).end
    assert Torus(2).dist(whole, parts) <= 1e-10


def test_const_flow_examples_and_additivity(bench, translation):
    y = const_flow(translation, [0.5, 0.25], 1.0, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(y, [0.5, 0.25, 1.0], atol=1e-12)
    assert np.array_equal(const_flow(bench, [1.0], 0.0, [1.0, 2.0, 0.3]), [1.0, 2.0, 0.3])
    y0 = np.array([1.0, 2.0, 0.0])
    a = const_flow(bench, [0.7], 0.5, const_flow(bench, [0.7], 0.25, y0))
    b = const_flow(bench, [0.7], 0.75, y0)
    assert Torus(2).dist(a[:2], b[:2]) <= 1e-10 and abs(a[2] - b[2]) <= 1e-15
    with pytest.raises(ValueError):
        const_flow(bench, [1.0], -0.1, y0)


def test_drift_flow(bench):
    sysc = ControlSystem.from_exprs(Circle(), ["1"], [["0"]])
    assert Circle().dist(drift_flow(sysc, [0.5], 0.4), [0.9]) <= 1e-12
    assert Circle().dist(drift_flow(sysc, [0.5], 0.4, "backward"), [0.1]) <= 1e-12
    pts = Torus(2).sample_uniform(np.random.default_rng(4), 1000)
    fwd = drift_flow(bench, pts, 0.4)
    back = drift_flow(bench, fwd, 0.4, "backward")
    assert np.max(Torus(2).dist(back, pts)) <= 1e-8
    with pytest.raises(ValueError):
        drift_flow(bench, pts, 0.4, "sideways")


def test_d_eta_S_examples(translation):
    eta = ControlSignal.constant([0.2, 0.1], 1.0)
    np.testing.assert_allclose(d_eta_S(translation, [1.0, 1.0], eta), np.eye(2), atol=1e-9)
    zero = ControlSystem.from_exprs(Torus(2), ["0", "0"], [["0", "0"]])
    assert np.all(d_eta_S(zero, [1.0, 1.0], ControlSignal.zero(1)) == 0)


def test_d_eta_S_matches_variational_equation(bench):
    law = NoiseLaw(1, 3, 1.0, 1.0)
    eta = law.signal(law.sample_coefficients(np.random.default_rng(5)))
    for u in ([0.3, 1.0], [2.0, 4.0], [5.0, 0.1]):
        fd = d_eta_S(bench, u, eta)
        var = variational_d_eta_S(bench, u, eta)
        assert np.max(np.abs(fd - var)) <= 1e-5


def test_rk4_observed_order(bench):
    law = NoiseLaw(1, 3, 1.5, 1.0)
    eta = law.signal(law.sample_coefficients(np.random.default_rng(6)))
    u = np.array([0.5, 1.5])
    hs = [1 / 16, 1 / 32]
    ref = time_one_map(bench, u, eta, h=hs[-1] / 64)
    errs = [Torus(2).dist(time_one_map(bench, u, eta, h=h), ref) for h in hs]
    assert math.log2(errs[0] / errs[1]) >= 3.8


def test_flow_batch_shapes_and_zero_pieces(bench):
    x0 = np.zeros((5, 2))
    durs = np.array([0.5, 0.0, 0.5])
    out = flow_batch(bench, x0, durs, np.ones((3, 1)))
    assert out.shape == (5, 2)
    same = flow_batch(bench, x0, [0.5, 0.5], np.ones((2, 1)))
    np.testing.assert_array_equal(out, same)
    with pytest.raises(ValueError, match="negative"):
        flow_batch(bench, x0, [-0.1], np.ones((1, 1)))
    with pytest.raises(ValueError, match="shape"):
        flow_batch(bench, x0, [1.0], np.ones((1, 2)))


def test_reversed_system_undoes_the_flow(bench):
    ctl = ControlSignal.constant([0.8], 0.6)
    u = np.array([2.0, 3.0])
    there = integrate(bench, ctl, u).end
    back = integrate(bench.reversed(), ctl, there).end
    assert Torus(2).dist(back, u) <= 1e-8


def test_control_signal_validation():
    with pytest.raises(ValueError, match="start at 0"):
        ControlSignal(np.array([0.1, 1.0]), np.zeros((1, 1)))
    with pytest.raises(ValueError, match="increasing"):
        ControlSignal(np.array([0.0, 0.5, 0.5]), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="amplitude rows"):
        ControlSignal(np.array([0.0, 1.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="non-finite"):
        ControlSignal(np.array([0.0, 1.0]), np.array([[np.nan]]))


def test_control_signal_evaluation_and_pieces():
    s = ControlSignal.from_pieces([0.25, 0.75], [[1.0], [2.0]])
    assert s(0.0)[0] == 1.0 and s(0.25)[0] == 2.0 and s(1.0)[0] == 2.0
    with pytest.raises(ValueError):
        s(1.5)
    left, right = s.split(0.5)
    assert left.duration == 0.5 and right.duration == 0.5
    back = left.then(right)
    np.testing.assert_allclose(back.breakpoints, [0, 0.25, 0.5, 1.0])
    np.testing.assert_array_equal(back.amplitudes[:, 0], [1, 2, 2])
    l2, r2 = s.split(0.25)
    assert l2.n_pieces == 1 and r2.n_pieces == 1
    with pytest.raises(ValueError):
        s.split(1.0)


def test_control_signal_csv():
    s = ControlSignal.from_pieces([0.5, 0.5], [[1.0, 0.0], [0.0, -1.0]])
    lines = s.to_csv().splitlines()
    assert lines[0] == "start,duration,zeta1,zeta2"
    assert lines[2] == "0.5,0.5,0.0,-1.0"
    assert s.with_coefficients(s.coefficients * 2).amplitudes[1, 1] == -2.0


def test_trajectory_csv(bench):
    tr = integrate(bench, ControlSignal.zero(1, 1 / 128), [0.0, 0.0])
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,x1,x2" and len(lines) == 4
