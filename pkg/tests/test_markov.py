import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrlmix.flow import ControlSystem, time_one_map
from ctrlmix.geometry import Torus
from ctrlmix.markov import (HistogramMeasure, empirical_kernel, estimate_coupling, estimate_minorization,
                            estimate_recurrence, merge_cells, overlap, propagate, simulate_chain, tv, tv_distance,
                            tv_counts, tv_halfwidth, wilson_lower)
from ctrlmix.mixing import tv_noise_level
from ctrlmix.noise import NoiseLaw

T2 = Torus(2)
LAW = NoiseLaw(1, 3, 1.0, 1.0, seed=3)
H = 1 / 32


def masses(n):
    return arrays(float, n, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 0).map(lambda a: a / a.sum())


def test_histogram_validation(torus):
    part = torus.mesh(4)
    with pytest.raises(ValueError, match="one mass per cell"):
        HistogramMeasure(part, np.ones(3) / 3)
    with pytest.raises(ValueError, match="sum to 1"):
        HistogramMeasure(part, np.ones(16))
    h = HistogramMeasure.from_points(part, [[0.1, 0.1], [0.1, 0.2], [6.0, 6.0]])
    assert h.n_samples == 3 and h.masses[0] == pytest.approx(2 / 3)
    np.testing.assert_allclose(h.density.sum() * part.volumes[0], 1.0)


def test_tv_examples(torus):
    assert tv([1, 0, 0], [0, 1, 0]) == 1.0
    assert tv([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv([0.2, 0.8], [0.6, 0.4]) == pytest.approx(0.4)
    assert overlap([0.2, 0.8], [0.6, 0.4]) == pytest.approx(0.6)
    a = HistogramMeasure.from_points(torus.mesh(4), [[0.1, 0.1]])
    with pytest.raises(ValueError, match="different partitions"):
        tv_distance(a, HistogramMeasure.from_points(torus.mesh(8), [[0.1, 0.1]]))


@given(masses(6), masses(6), masses(6))
def test_tv_is_a_metric_bounded_by_one(a, b, c):
    assert 0 <= tv(a, b) <= 1 + 1e-15
    assert tv(a, b) == tv(b, a)
    assert tv(a, a) == 0
    assert tv(a, c) <= tv(a, b) + tv(b, c) + 1e-15
    assert tv(a, b) == pytest.approx(1 - overlap(a, b), abs=1e-12)


@given(masses(8), masses(8), st.lists(st.integers(0, 2), min_size=8, max_size=8))
def test_merging_cells_never_increases_tv(a, b, mapping):
    assert tv(merge_cells(a, mapping, 3), merge_cells(b, mapping, 3)) <= tv(a, b) + 1e-15


@given(st.lists(st.integers(0, 50), min_size=6, max_size=6).filter(lambda c: sum(c) > 0),
       st.lists(st.integers(0, 50), min_size=6, max_size=6).filter(lambda c: sum(c) > 0),
       st.lists(st.integers(0, 2), min_size=6, max_size=6))
def test_count_tv_is_exact_and_merge_monotone(c1, c2, mapping):
    exact = tv_counts(c1, c2)
    a, b = np.array(c1) / sum(c1), np.array(c2) / sum(c2)
    assert exact == pytest.approx(tv(a, b), abs=1e-15)
    merged = tv_counts(merge_cells(np.array(c1), mapping, 3), merge_cells(np.array(c2), mapping, 3))
    assert merged <= exact


def test_count_histograms(torus):
    part = torus.mesh(2)
    h1 = HistogramMeasure.from_counts(part, [3, 1, 0, 0])
    h2 = HistogramMeasure.from_counts(part, [0, 1, 1, 0])
    assert tv_distance(h1, h2) == 0.5 * (0.75 + 0.25 + 0.5)
    assert h1.counts.dtype == np.int64 and h1.n_samples == 4
    with pytest.raises(ValueError):
        HistogramMeasure.from_counts(part, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        tv_counts([1, 2], [1, 2, 3])


def test_wilson_lower_solves_the_score_equation():
    # independent oracle: the smaller root of (phat - p)^2 = z^2 p (1 - p) / n
    z = 1.959963984540054
    for k, n in [(0, 10), (3, 10), (50, 100), (999, 1000), (1000, 1000), (7, 2000)]:
        ph = k / n
        a = 1 + z * z / n
        b = -(2 * ph + z * z / n)
        c = ph * ph
        root = (-b - math.sqrt(b * b - 4 * a * c)) / (2 * a)
        assert wilson_lower(k, n) == pytest.approx(max(root, 0.0), abs=1e-12)
    assert wilson_lower(0, 50) == 0.0
    assert 0.99 < wilson_lower(2000, 2000) < 1.0


def test_tv_halfwidth():
    assert tv_halfwidth(100, 100) == pytest.approx(math.sqrt(0.5 * math.log(20) * 0.02))
    assert tv_halfwidth(4000, 4000) < tv_halfwidth(1000, 1000)


def test_simulate_chain_examples(bench, translation):
    assert simulate_chain(bench, [1.0, 2.0], 0, LAW, LAW.stream(0)).shape == (1, 2)
    still = ControlSystem.from_exprs(T2, ["0", "0"], [["1", "0"]])
    path = simulate_chain(still, [1.0, 2.0], 5, NoiseLaw(1, 3, 0.0), LAW.stream(0), H)
    np.testing.assert_allclose(path, np.tile([1.0, 2.0], (6, 1)), atol=1e-14)
    a = simulate_chain(bench, [1.0, 2.0], 4, LAW, LAW.stream(1), H)
    b = simulate_chain(bench, [1.0, 2.0], 4, LAW, LAW.stream(1), H)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        simulate_chain(bench, [1.0, 2.0], -1, LAW, LAW.stream(1))


def test_chain_step_is_the_time_one_map(bench):
    rng_a, rng_b = LAW.stream(9), LAW.stream(9)
    step = simulate_chain(bench, [1.0, 2.0], 1, LAW, rng_a, H)[1]
    eta = LAW.signal(LAW.sample_coefficients(rng_b, 1)[0])
    assert T2.dist(step, time_one_map(bench, [1.0, 2.0], eta, H)) <= 1e-14


def test_empirical_kernel_examples(bench, torus):
    part = torus.mesh(8)
    h0 = empirical_kernel(bench, [1.0, 2.0], 0, 100, part, LAW, LAW.stream(0), H)
    assert h0.masses[part.locate([1.0, 2.0])] == 1.0
    # zero noise: unit mass at the cell of the deterministic image
    quiet = NoiseLaw(1, 3, 0.0)
    h1 = empirical_kernel(bench, [1.0, 2.0], 1, 50, part, quiet, quiet.stream(0), H)
    img = time_one_map(bench, [1.0, 2.0], quiet.signal(np.zeros(8)), H)
    assert h1.masses[part.locate(img)] == 1.0
    with pytest.raises(ValueError):
        empirical_kernel(bench, [1.0, 2.0], 1, 0, part, LAW, LAW.stream(0))


def test_chapman_kolmogorov(bench, torus):
    part = torus.mesh(8)
    N = 20_000
    u = np.array([1.0, 2.0])
    direct = empirical_kernel(bench, u, 2, N, part, LAW, LAW.stream(1), H)
    mid = propagate(bench, np.tile(u, (N, 1)), 1, LAW, LAW.stream(2), H)
    composed = HistogramMeasure.from_points(part, propagate(bench, mid, 1, LAW, LAW.stream(3), H))
    mu = (direct.masses + composed.masses) / 2
    assert tv_distance(direct, composed) <= tv_noise_level(mu, N, N) + 3 * tv_halfwidth(N, N)


def test_recurrence_trivial_cases(torus):
    still = ControlSystem.from_exprs(torus, ["0", "0"], [["1", "0"]])
    quiet = NoiseLaw(1, 3, 0.0)
    # the ball covers the whole torus
    est = estimate_recurrence(still, [1.0, 1.0], 5.0, 1, 3, 200, quiet, H)
    assert est.estimate == 1.0 and est.certified
    # no motion at all: starts away from u_hat never hit a small ball
    est = estimate_recurrence(still, [1.0, 1.0], 0.1, 1, 3, 200, quiet, H)
    assert est.estimate == 0.0 and not est.certified and est.value == 0.0
    assert est.details["spacing_within_quarter_delta"] is False
    with pytest.raises(ValueError):
        estimate_recurrence(still, [1.0, 1.0], 0.0, 1, 3, 10, quiet)


def test_coupling_trivial_cases(bench, torus):
    part = torus.mesh(8)
    same = np.array([[[1.0, 2.0], [1.0, 2.0]]])
    est = estimate_coupling(bench, [1.0, 2.0], 0.3, same, 4000, part, LAW, H)
    # the two starts use different streams, so the overlap is 1 up to sampling error
    assert est.estimate >= 1 - tv_noise_level(np.full(64, 1 / 64), 4000, 4000) - 3 * est.half_width
    quiet = NoiseLaw(1, 3, 0.0)
    far = np.array([[[1.0, 2.0], [4.0, 5.0]]])
    est = estimate_coupling(bench, [1.0, 2.0], 3.0, far, 100, part, quiet, H)
    assert est.estimate == 0.0 and not est.certified


def test_minorization_examples(translation, torus):
    part = torus.mesh(8)
    est = estimate_minorization(translation, [1.0, 1.0], 0.3, part, 4000, NoiseLaw(2, 2, 1.0, 1.0, seed=1), h=H)
    assert est.certified and est.value > 0
    assert est.params["starts"] >= 5
    quiet = NoiseLaw(1, 3, 0.0)
    still = ControlSystem.from_exprs(torus, ["0", "0"], [["1", "0"]])
    est = estimate_minorization(still, [1.0, 1.0], 2.0, part, 200, quiet, h=H)
    assert not est.certified


def test_minorization_consistent_with_coupling(bench, torus):
    part = torus.mesh(8)
    u_hat = [0.0, math.pi]
    N = 4000
    mn = estimate_minorization(bench, u_hat, 0.3, part, N, LAW, h=H)
    cp = estimate_coupling(bench, u_hat, 0.3, 6, N, part, LAW, H)
    assert cp.estimate >= mn.value * mn.details["cell_volume"] - 3 * cp.half_width


def test_estimates_do_not_depend_on_worker_count(bench, torus):
    part = torus.mesh(8)
    a = estimate_coupling(bench, [0.0, math.pi], 0.3, 4, 500, part, LAW, H, workers=1)
    b = estimate_coupling(bench, [0.0, math.pi], 0.3, 4, 500, part, LAW, H, workers=3)
    assert a.to_dict() == b.to_dict()
    r1 = estimate_recurrence(bench, [0.0, math.pi], 0.5, 2, 2, 300, LAW, H, workers=1)
    r2 = estimate_recurrence(bench, [0.0, math.pi], 0.5, 2, 2, 300, LAW, H, workers=2)
    assert r1.to_dict() == r2.to_dict()


def test_to_dict_reports_certification(bench):
    est = estimate_recurrence(bench, [0.0, math.pi], 0.5, 2, 2, 100, LAW, H)
    d = est.to_dict()
    assert d["name"] == "recurrence" and d["certified"] == (d["value"] > 0)
    assert d["params"]["m"] == 2
