"""Pair residuals, thresholds, voting, the moving-target driver and the observer baseline."""

from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from mtd_grid import clustering, detection
from mtd_grid.errors import EmptyCluster, ParseError
from mtd_grid.schemas import ScenarioSpec
from mtd_grid.simkit import SimulationTrace, simulate_scenario
from tests.conftest import TRIANGLE_ATTACK, triangle_scenario

STEP = [{"time": 1.0, "bus": 3, "delta": 0.5}]


def trace_of(Y) -> SimulationTrace:
    """Bare trace around a given reading matrix (l×T)."""
    Y = np.asarray(Y, dtype=float)
    l, T = Y.shape
    return SimulationTrace(
        t=np.arange(T) * 0.01,
        x=np.zeros((l, T)),
        y=Y,
        y_a=np.zeros_like(Y),
        y_tilde=Y,
        d=np.zeros((1, T)),
        interval=np.zeros(T, dtype=int),
        state_labels=tuple(f"x[{k + 1}]" for k in range(l)),
        output_labels=tuple(f"y[{k + 1}]" for k in range(l)),
        load_buses=(1,),
    )


# ============================================================================
# Residuals
# ============================================================================

class TestResidualPair:
    def test_examples(self):
        s = 1 / np.sqrt(2)
        assert detection.residual_pair(1.0, 1.0, s, s) == 0.0
        assert detection.residual_pair(1.1, 1.0, s, s) == pytest.approx(0.1 * s)
        assert detection.residual_pair(2.0, 1.0, 2.0, 1.0) == 0.0

    def test_symmetric_in_the_pair(self):
        assert detection.residual_pair(0.3, -0.7, 0.6, 0.8) == detection.residual_pair(-0.7, 0.3, 0.8, 0.6)

    def test_scales_with_readings(self):
        base = detection.residual_pair(0.3, -0.7, 0.6, 0.8)
        assert detection.residual_pair(-3.0, 7.0, 0.6, 0.8) == pytest.approx(10 * base)

    def test_pair_table_matches_scalar_residual(self):
        cs = clustering.make_clusterset([(0, 2, 3), (1,)], [[1.0, 2.0, 2.0], [1.0]], 0.1, 4)
        pairs = detection.PairTable.from_clusterset(cs)
        Y = np.random.default_rng(0).standard_normal((4, 5))
        R = detection.residuals(Y, pairs)
        assert R.shape == (3, 5)
        for row, (_, i, j, p_i, p_j) in enumerate(cs.pairs()):
            expected = [detection.residual_pair(Y[i, t], Y[j, t], p_i, p_j) for t in range(5)]
            np.testing.assert_allclose(R[row], expected, rtol=1e-14)

    def test_trailing_window_average(self):
        S = np.random.default_rng(1).standard_normal((3, 20))
        batch = detection.smooth_signed(S, 4)
        np.testing.assert_allclose(batch[:, 0], S[:, 0])
        np.testing.assert_allclose(batch[:, 2], S[:, :3].mean(axis=1))
        np.testing.assert_allclose(batch[:, 10], S[:, 7:11].mean(axis=1))

    def test_no_smoothing_is_identity(self):
        S = np.ones((2, 3))
        assert detection.smooth_signed(S, 0) is S


# ============================================================================
# Thresholds
# ============================================================================

class TestCalibrateThreshold:
    def test_safety_times_peak(self):
        cs = clustering.make_clusterset([(0, 1), (2,)], [[1.0, 1.0], [1.0]], 0.1, 3)
        Y = [[0.0, 1.0, 2.0], [0.0, 0.8, 2.0], [5.0, 5.0, 5.0]]
        th = detection.calibrate_threshold(trace_of(Y), cs, 1.5)
        assert th.epsilon[0] == pytest.approx(1.5 * 0.2 / np.sqrt(2))
        assert th.epsilon[1] is None
        assert th.uncovered == ["y[3]"]

    def test_floor(self):
        cs = clustering.make_clusterset([(0, 1)], [[1.0, 1.0]], 0.1, 2)
        th = detection.calibrate_threshold(trace_of(np.ones((2, 10))), cs)
        assert th.epsilon == (detection.EPSILON_FLOOR,)

    def test_unit_safety_fires_at_the_peak(self):
        cs = clustering.make_clusterset([(0, 1)], [[1.0, 1.0]], 0.1, 2)
        Y = np.array([[0.0, 0.3, 0.1], [0.0, 0.0, 0.0]])
        th = detection.calibrate_threshold(trace_of(Y), cs, 1.0)
        assert detection.detect_step(Y[:, 1], cs, th.epsilon)
        assert not detection.detect_step(Y[:, 2], cs, th.epsilon)

    def test_step_mask(self):
        cs = clustering.make_clusterset([(0, 1)], [[1.0, 1.0]], 0.1, 2)
        Y = np.array([[0.0, 5.0, 0.1], [0.0, 0.0, 0.0]])
        th = detection.calibrate_threshold(trace_of(Y), cs, 1.0, steps=np.array([True, False, True]))
        assert th.epsilon[0] == pytest.approx(0.1 / np.sqrt(2))

    def test_all_singletons(self):
        cs = clustering.make_clusterset([(0,), (1,)], [[1.0], [1.0]], 0.0, 2)
        with pytest.raises(EmptyCluster):
            detection.calibrate_threshold(trace_of(np.zeros((2, 4))), cs)


class TestThresholdFile:
    @pytest.fixture
    def table(self):
        return detection.ThresholdTable(
            [
                detection.Thresholds("nominal", 1e-06, 1.5, 0.0, (0.00123, None), (("P_G[1]", "P_G[2]"), ("P_L[3]",))),
                detection.Thresholds("x1.2", 0.01, 2.0, 0.5, (1e-09,), (("a", "b", "c"),)),
            ]
        )

    def test_round_trip(self, table):
        assert detection.parse_thresholds(detection.serialize_thresholds(table)) == table

    def test_layout(self, table):
        text = detection.serialize_thresholds(table)
        assert "1: 0.00123 | P_G[1] P_G[2]\n2: uncovered | P_L[3]\n" in text
        assert "[thresholds]\nloading = x1.2\ntheta = 0.01\n" in text

    def test_numbering(self):
        text = "[thresholds]\nloading = a\ntheta = 0.1\nsafety = 1.5\nsmoothing = 0\n2: 0.1 | a b\n"
        with pytest.raises(ParseError, match="run 1, 2, 3"):
            detection.parse_thresholds(text)

    def test_missing_key(self):
        with pytest.raises(ParseError, match="safety"):
            detection.parse_thresholds("[thresholds]\nloading = a\ntheta = 0.1\nsmoothing = 0\n1: 0.1 | a b\n")

    def test_lookup_requires_same_clusters(self):
        cs = clustering.make_clusterset([(0, 1)], [[1.0, 1.0]], 0.1, 2, ["a", "b"], "nominal")
        th = detection.calibrate_threshold(trace_of(np.zeros((2, 3))), cs, smoothing=0.5)
        table = detection.ThresholdTable([th])
        assert table.lookup(cs, 0.5) is th
        assert table.lookup(cs, 0.0) is None
        other = clustering.make_clusterset([(0,), (1,)], [[1.0], [1.0]], 0.1, 2, ["a", "b"], "nominal")
        assert table.lookup(other, 0.5) is None


# ============================================================================
# Single-step check and voting
# ============================================================================

class TestDetectStep:
    @pytest.fixture
    def cs(self):
        return clustering.make_clusterset([(0, 1, 2), (3, 4), (5,)], [[1.0, 1.0, 1.0], [1.0, 1.0], [1.0]], 0.1, 6)

    def test_consistent_readings(self, cs):
        y = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 9.0])
        assert detection.detect_step(y, cs, (1e-9, 1e-9, None)) == []

    def test_order_and_locality(self, cs):
        y = np.array([1.0, 1.3, 1.0, 2.0, 2.5, 9.0])
        fired = detection.detect_step(y, cs, (1e-9, 1e-9, None))
        assert [(f.k, f.i, f.j) for f in fired] == [(0, 0, 1), (0, 1, 2), (1, 3, 4)]
        assert fired[0].residual == pytest.approx(0.3 / np.sqrt(3))

    def test_corruption_stays_in_its_cluster(self, cs):
        y = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 9.0])
        y[3] += 0.5
        assert {f.k for f in detection.detect_step(y, cs, (1e-9, 1e-9, None))} == {1}

    def test_threshold_is_inclusive(self):
        cs = clustering.make_clusterset([(0, 1)], [[1.0, 1.0]], 0.1, 2)
        p = cs.coefficients[0]
        eps = detection.residual_pair(1.0, 0.0, p[0], p[1])
        assert len(detection.detect_step(np.array([1.0, 0.0]), cs, (eps,))) == 1
        assert detection.detect_step(np.array([1.0, 0.0]), cs, (np.nextafter(eps, 1.0),)) == []


class TestMajorityVote:
    def test_single_corrupted_member(self):
        assert detection.majority_vote([(0, 1), (0, 2)]) == 0

    def test_two_member_cluster_is_ambiguous(self):
        assert detection.majority_vote([(3, 4)]) is None

    def test_tie(self):
        assert detection.majority_vote([(0, 1), (0, 2), (1, 2)]) is None

    def test_nothing_fired(self):
        assert detection.majority_vote([]) is None

    @pytest.mark.parametrize("m", [3, 4, 5])
    def test_star_patterns(self, m):
        # every pair through one member, and nothing else, identifies that member
        for j in range(m):
            star = [(min(i, j), max(i, j)) for i in range(m) if i != j]
            assert detection.majority_vote(star) == j

    @pytest.mark.parametrize("m", [3, 4, 5])
    def test_brute_force_agrees_with_counting(self, m):
        pairs = list(combinations(range(m), 2))
        for r in range(len(pairs) + 1):
            for fired in combinations(pairs, r):
                counts = [sum(x in p for p in fired) for x in range(m)]
                top = max(counts)
                unique = counts.count(top) == 1
                expected = counts.index(top) if top >= 2 and unique else None
                assert detection.majority_vote(list(fired)) == expected


# ============================================================================
# Moving-target driver on the triangle grid
# ============================================================================

class TestRunDetector:
    @pytest.fixture
    def attacked(self, triangle_path, triangle_provider):
        spec = triangle_scenario(triangle_path, attacks=[TRIANGLE_ATTACK])
        return spec, detection.run_detector(triangle_provider, spec)

    def test_symmetric_clusters(self, attacked):
        _, report = attacked
        cs = report.intervals[0].clusterset
        assert ("P_G[1]", "P_G[2]") in cs.pair_set()
        assert ("omega_G[1]", "omega_G[2]") in cs.pair_set()
        assert "P_L[3]" in report.uncovered

    def test_fires_only_inside_windows(self, attacked):
        spec, report = attacked
        for start, end, _ in spec.attack_windows:
            assert report.detections_in(start, end) == 200
            assert report.first_detection_in(start, end) == pytest.approx(start)
        assert report.n_fired == 600
        assert report.first_detection_time == pytest.approx(20.0)

    def test_flags_the_attacked_pair(self, attacked):
        _, report = attacked
        assert report.flagged == ["P_G[1]", "P_G[2]"]
        assert report.ambiguous_pairs == [("P_G[1]", "P_G[2]")]
        assert report.isolated == []
        assert np.all(report.fired_residual >= report.fired_epsilon)

    def test_attack_free_run_is_quiet(self, triangle_path, triangle_provider):
        report = detection.run_detector(triangle_provider, triangle_scenario(triangle_path))
        assert report.n_fired == 0
        assert report.first_detection_time is None

    def test_precomputed_thresholds_reproduce_run(self, attacked, triangle_provider):
        spec, report = attacked
        th = detection.calibrate_sweep(triangle_provider, spec, 1.0)
        again = detection.run_detector(triangle_provider, spec, thresholds=detection.ThresholdTable([th]))
        np.testing.assert_array_equal(again.fired_step, report.fired_step)
        assert again.thresholds.entries[0] is th

    def test_calibration_is_held_out(self, triangle_path, triangle_provider):
        # scenario noise stays out of the sweep unless asked for
        spec = triangle_scenario(triangle_path, noise_std=1e-3)
        quiet = detection.calibrate_sweep(triangle_provider, spec, 1.0)
        noisy = detection.calibrate_sweep(
            triangle_provider, spec.model_copy(update={"calibrate_with_noise": True}), 1.0
        )
        assert quiet.epsilon[0] == detection.EPSILON_FLOOR
        assert noisy.epsilon[0] > 1e-3

    def test_cluster_max_tracks_residuals(self, attacked):
        _, report = attacked
        iv = report.intervals[0]
        k = iv.clusterset.cluster_of(iv.clusterset.labels.index("P_G[1]"))
        inside = int(np.searchsorted(report.t, 21.0))
        assert iv.cluster_max[k, inside] >= iv.thresholds.epsilon[k]
        assert iv.cluster_max.shape == (iv.clusterset.K, report.t.shape[0])


class TestMovingTarget:
    """Clusters change with the operating point, and so does what is watched."""

    @pytest.fixture
    def spec(self):
        attack = {"duration": 2.0, "target": "x[3]", "kind": "bias", "magnitude": 0.05}
        return ScenarioSpec(
            case=Path("synthetic.case"),
            duration=20.0,
            ed_interval=10.0,
            loading_schedule=[1.0, 2.0],
            theta=1e-3,
            load_events=[{"time": 1.0, "bus": 1, "delta": 0.5}],
            attacks=[{"start": 4.0, **attack}, {"start": 12.0, **attack}],
        )

    def test_pairs_differ_per_interval(self, switching_provider, spec):
        report = detection.run_detector(switching_provider, spec)
        first, second = report.intervals[0].clusterset, report.intervals[1].clusterset
        assert first.pair_set() == {("x[2]", "x[3]")}
        assert second.pair_set() == {("x[2]", "x[4]")}
        assert [iv.index for iv in report.intervals] == [0, 1, 2]

    def test_attack_seen_only_while_target_is_clustered(self, switching_provider, spec):
        report = detection.run_detector(switching_provider, spec)
        assert report.detections_in(4.0, 6.0) == 200
        assert report.detections_in(12.0, 14.0) == 0
        assert report.n_fired == 200
        assert "x[3]" in report.uncovered


# ============================================================================
# Noise and smoothing
# ============================================================================

class TestNoise:
    def test_noiseless_thresholds_flood_under_noise(self, triangle_path, triangle_provider):
        spec = triangle_scenario(triangle_path, noise_std=1e-3, duration=10.0, load_events=STEP)
        report = detection.run_detector(triangle_provider, spec)
        assert report.n_fired > 1000

    def test_smoothing_with_noisy_calibration(self, triangle_path, triangle_provider):
        spec = triangle_scenario(
            triangle_path,
            attacks=[TRIANGLE_ATTACK],
            noise_std=1e-3,
            smoothing_window=0.5,
            calibrate_with_noise=True,
        )
        report = detection.run_detector(triangle_provider, spec)
        for start, end, _ in spec.attack_windows:
            assert report.detections_in(start, end) > 0
        assert "P_G[1]" in report.flagged


# ============================================================================
# Luenberger baseline
# ============================================================================

class TestObserver:
    def test_poles_placed(self, triangle_provider):
        model = triangle_provider.model(1.0)
        L = detection.design_observer_gain(model)
        eig = np.sort(np.linalg.eigvals(model.A - L @ model.C).real)
        np.testing.assert_allclose(eig, np.sort(detection.observer_poles(model.n)), atol=1e-8)

    def test_initial_error_decays(self, triangle_path, triangle_provider):
        model = triangle_provider.model(1.0)
        trace = simulate_scenario(triangle_scenario(triangle_path, load_events=[], duration=40.0), triangle_provider)
        r_c = detection.run_observer(model, trace, x_hat0=np.ones(model.n))
        assert np.linalg.norm(r_c[:, 0]) > 1.0
        assert np.linalg.norm(r_c[:, -1]) < 1e-12

    def test_disturbance_leaves_steady_residual(self, triangle_path, triangle_provider):
        model = triangle_provider.model(1.0)
        trace = simulate_scenario(triangle_scenario(triangle_path, load_events=STEP, duration=100.0), triangle_provider)
        obs = detection.make_observer(model)
        r_c = detection.run_observer(model, trace)
        expected = detection.steady_observer_residual(model, obs.L, trace.d[:, -1])
        assert np.linalg.norm(r_c[:, -1] - expected) < 1e-2 * np.linalg.norm(expected)
        assert np.max(np.abs(expected)) > 1e-2

    def test_cluster_residuals_stay_flat_where_observer_does_not(self, triangle_path, triangle_provider):
        spec = triangle_scenario(triangle_path)
        model = triangle_provider.model(1.0)
        trace = simulate_scenario(spec, triangle_provider)
        cs = clustering.cluster_model(model, spec.theta)[0]
        cluster_peak = detection.residuals(trace.y_tilde, detection.PairTable.from_clusterset(cs)).max()
        observer_peak = np.abs(detection.run_observer(model, trace)).max()
        assert observer_peak > 1e3 * max(cluster_peak, detection.EPSILON_FLOOR)
