import math

import numpy as np
import pytest

from ctrlmix.control import (ControlError, ExactControl, alpha_to_control, approach, build_frame,
                             exact_control_f, exact_control_g, psi, psi_inverse, solid_witness, solve_durations)
from ctrlmix.flow import ControlSystem, const_flow, integrate, time_one_map
from ctrlmix.geometry import Circle, Torus
from ctrlmix.noise import NoiseLaw

H = 1 / 64
T2 = Torus(2)
U_HAT = np.array([0.0, math.pi])


@pytest.fixture(scope="module")
def bench_frame(bench):
    return build_frame(bench, U_HAT, np.random.default_rng(0), h=H)


@pytest.fixture(scope="module")
def trans_frame(translation):
    return build_frame(translation, [1.0, 1.0], np.random.default_rng(0), h=H)


def test_translation_frame(trans_frame):
    np.testing.assert_array_equal(trans_frame.zetas, [[0, 0], [1, 0], [0, 1]])
    assert abs(np.linalg.det(trans_frame.jacobian)) == pytest.approx(1.0, rel=1e-6)
    assert trans_frame.tau == pytest.approx(0.6)
    np.testing.assert_allclose(trans_frame.alpha_hat, [0.2, 0.2, 0.2])


def test_benchmark_frame_invariants(bench_frame):
    f = bench_frame
    assert f.zetas.shape == (3, 1)
    assert np.all(f.lower > 0) and np.all(f.lower < f.upper)
    assert f.upper.sum() < 1
    assert f.min_det > 1e-8 and f.radius > 0 and np.isfinite(f.condition)
    assert f.in_box(f.alpha_hat)
    d = f.to_dict()
    assert d["tau"] == pytest.approx(0.6) and len(d["zetas"]) == 3


def test_circle_frame():
    sysc = ControlSystem.from_exprs(Circle(), ["0"], [["1"]])
    f = build_frame(sysc, [1.0], np.random.default_rng(0), h=H)
    np.testing.assert_array_equal(f.zetas, [[0], [1]])


def test_parallel_fields_have_no_frame():
    sysp = ControlSystem.from_exprs(T2, ["0", "0"], [["0", "1"]])
    with pytest.raises(ControlError):
        build_frame(sysp, [1.0, 1.0], np.random.default_rng(0), max_tries=10, h=H)


def test_alpha_to_control_composes_constant_flows(bench, bench_frame):
    f = bench_frame
    alpha = f.alpha_hat + 0.3 * (f.upper - f.alpha_hat) * np.array([1, -1, 0.5])
    sig = alpha_to_control(f, alpha)
    assert sig.n_pieces == 3 and sig.duration == pytest.approx(alpha.sum())
    y = np.append(f.u_hat, 0.0)
    for z, a in zip(f.zetas, alpha):
        y = const_flow(bench, z, a, y, H)
    end = integrate(bench, sig, f.u_hat, h=H).end
    assert T2.dist(end, y[:2]) <= 1e-9 and y[2] == pytest.approx(alpha.sum())
    with pytest.raises(ControlError, match="outside the frame box"):
        alpha_to_control(f, f.upper + 0.1)


def test_g_at_the_center_returns_alpha_hat(bench_frame):
    res = solve_durations(bench_frame, bench_frame.center)
    assert res.iterations == 0
    np.testing.assert_array_equal(res.alpha, bench_frame.alpha_hat)


def test_g_closed_form_on_translation(translation, trans_frame):
    f = trans_frame
    rng = np.random.default_rng(1)
    for _ in range(10):
        off = rng.uniform(-1, 1, 2) * f.radius / 2
        v = f.center + off
        sig = exact_control_g(f, v)
        alpha = np.diff(sig.breakpoints)
        np.testing.assert_allclose(alpha, f.alpha_hat + [-off.sum(), off[0], off[1]], atol=1e-10)
        assert T2.dist(integrate(translation, sig, f.u_hat, h=H).end, v) <= 1e-8


def test_f_closed_form_on_circle():
    # V0 = 1, V1 = 1: the endpoint of f(v) is u_hat + 1 + alpha_1
    sysc = ControlSystem.from_exprs(Circle(), ["1"], [["1"]])
    f = build_frame(sysc, [2.0], np.random.default_rng(0), h=H)
    np.testing.assert_array_equal(f.zetas, [[0], [1]])
    ec = ExactControl(f)
    for v in ec.sample_targets(np.random.default_rng(2), 5):
        sig = ec(v)
        assert sig.duration == pytest.approx(1.0)
        a1 = sig.breakpoints[2] - sig.breakpoints[1]
        assert Circle().dist([2.0 + 1.0 + a1], v) <= 1e-9
        assert Circle().dist(time_one_map(sysc, [2.0], sig, H), v) <= 1e-8


def test_f_steers_exactly_on_benchmark(bench, bench_frame):
    ec = ExactControl(bench_frame)
    for v in ec.sample_targets(np.random.default_rng(3), 10):
        sig = ec(v)
        assert sig.n_pieces == 4 and np.all(sig.amplitudes[-1] == 0)
        assert T2.dist(time_one_map(bench, bench_frame.u_hat, sig, H), v) <= 1e-8


def test_psi_round_trip(bench_frame):
    w = bench_frame.center
    assert T2.dist(psi_inverse(bench_frame, psi(bench_frame, w)), w) <= 1e-8


def test_target_outside_ball_is_rejected(bench_frame):
    far = T2.exp(bench_frame.center, np.array([2 * bench_frame.radius, 0.0]))
    with pytest.raises(ControlError, match="outside the certified ball"):
        exact_control_g(bench_frame, far)
    with pytest.raises(ControlError):
        exact_control_f(bench_frame, psi(bench_frame, far))


def test_duration_map_is_lipschitz(bench_frame):
    f = bench_frame
    rng = np.random.default_rng(4)
    pts = T2.sample_ball(f.center, f.radius * 0.99, rng, 12)
    sol = [solve_durations(f, p).alpha for p in pts]
    for i in range(0, 12, 2):
        da = np.linalg.norm(sol[i] - sol[i + 1])
        dv = float(T2.dist(pts[i], pts[i + 1]))
        assert da <= 1.05 * f.lipschitz * dv + 1e-9


def test_frame_on_the_sphere(sphere):
    syss = ControlSystem.from_exprs(sphere, ["0", "0", "0"], [["0", "-x3", "x2"], ["x3", "0", "-x1"]])
    u_hat = np.array([0.6, 0.0, 0.8])
    f = build_frame(syss, u_hat, np.random.default_rng(0), h=H)
    ec = ExactControl(f)
    for v in ec.sample_targets(np.random.default_rng(5), 5):
        end = time_one_map(syss, u_hat, ec(v), H)
        assert float(sphere.dist(end, v)) <= 1e-8


def test_solid_witness_translation(translation):
    law = NoiseLaw(2, 2, 1.0, 1.0)
    w = solid_witness(translation, [1.0, 1.0], law, np.random.default_rng(0), h=H)
    assert w.rank == 2 and w.tries == 1 and w.covering_radius > 0
    assert w.to_dict()["rank"] == 2


def test_solid_witness_benchmark(bench):
    law = NoiseLaw(1, 2, 1.0, 1.0)
    w = solid_witness(bench, U_HAT, law, np.random.default_rng(0), h=H)
    assert w.rank == 2 and w.covering_radius > 0
    assert w.signal.n_pieces == 4


def test_solid_witness_zero_fields():
    zero = ControlSystem.from_exprs(T2, ["0", "0"], [["0", "0"]])
    with pytest.raises(ControlError, match="no full-rank witness in 3 tries"):
        solid_witness(zero, [1.0, 1.0], NoiseLaw(1, 2), np.random.default_rng(0), tries=3, h=H)


def test_approach_examples(translation):
    law = NoiseLaw(2, 2, 1.0, 1.0)
    rng = np.random.default_rng(0)
    assert approach(translation, [1.0, 1.0], [1.01, 1.0], 0.05, law, rng, h=H).m == 0
    res = approach(translation, [4.0, 4.0], [1.0, 1.0], 0.05, law, rng, h=H)
    assert res.m == 1 and res.distance <= 0.05
    with pytest.raises(ValueError):
        approach(translation, [4.0, 4.0], [1.0, 1.0], 0.0, law, rng)


def test_approach_benchmark_grid(bench):
    law = NoiseLaw(1, 3, 1.0, 1.0)
    rng = np.random.default_rng(1)
    for u0 in T2.grid(3):
        res = approach(bench, u0, U_HAT, 0.05, law, rng, budget=8, h=H)
        assert res.m <= 8 and res.distance <= 0.05
        # independent re-simulation of the returned signals
        x = u0
        for sig in res.signals:
            x = time_one_map(bench, x, sig, H)
        assert float(T2.dist(x, U_HAT)) <= 0.05


def test_approach_budget_exhausted():
    still = ControlSystem.from_exprs(T2, ["0", "0"], [["0", "0"]])
    with pytest.raises(ControlError, match="budget"):
        approach(still, [4.0, 4.0], [1.0, 1.0], 0.05, NoiseLaw(1, 2), np.random.default_rng(0), budget=2, h=H)
