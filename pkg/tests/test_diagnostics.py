import math

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import single_node, synthetic_trajectory
from diagnostics import (BSTAR_RTOL, blowup_constant, classify_blowup_set, detect_blowup, diagnose,
                         estimate_blowup_time, first_negative_phi, graph_distance, linear_growth_fit,
                         phi_h, phi_h_printed, propagation_depth, rate_constant, rescale, step_ratio_tail)
from discretize import DiscreteSystem, Profile, build_fd_cube, build_fd_interval, sample_initial
from errors import DiagnosticsError
from stepper import SolverConfig, Termination, run
from utils import read_csv


def profile_trajectory(p, center, neighbor, far, n_points=120):
    """Five-node interval with prescribed node histories as functions of g = T - t, T = 1."""
    sys = build_fd_interval(5)
    g = np.geomspace(1e-1, 1e-7, n_points)
    states = np.column_stack([far(g), neighbor(g), center(g), neighbor(g), far(g)])
    return sys, synthetic_trajectory(sys, p, 1.0 - g, states)


class TestEnergy:

    def test_phi_two_nodes(self, interval2):
        assert phi_h(interval2, [1.0, 2.0], 2.0) == pytest.approx(8.0)

    def test_printed_variant(self, interval2):
        assert phi_h_printed(interval2, [1.0, 2.0], 2.0) == pytest.approx(18.0 - 1.0 / 3.0)

    def test_sign_change_with_amplitude(self):
        sys = build_fd_interval(20)
        small = sample_initial(sys, Profile('sine', 1.0)).values
        assert phi_h(sys, small, 2.0) > 0.0
        assert phi_h(sys, 50.0 * small, 2.0) < 0.0

    @pytest.mark.parametrize('p,expected', [(2.0, 1.0), (3.0, math.sqrt(0.5)), (1.5, 4.0)])
    def test_blowup_constant(self, p, expected):
        assert blowup_constant(p) == pytest.approx(expected)


class TestPropagationDepth:

    @pytest.mark.parametrize('p,expected', [(3.0, (0, False)), (2.0, (1, True)), (1.6, (1, False)),
                                            (1.5, (2, True)), (1.4, (2, False)), (4.0 / 3.0, (3, True)),
                                            (1.3, (3, False))])
    def test_brackets(self, p, expected):
        assert propagation_depth(p) == expected

    def test_bracket_holds(self):
        for p in np.linspace(1.05, 3.0, 40):
            K, _ = propagation_depth(p)
            assert (K + 2) / (K + 1) < p
            if K > 0:
                assert p <= (K + 1) / K

    def test_rejects_p_at_most_one(self):
        with pytest.raises(ValueError):
            propagation_depth(1.0)


class TestGraphDistance:

    def test_interval(self):
        np.testing.assert_array_equal(graph_distance(build_fd_interval(5), {2}), [2, 1, 0, 1, 2])

    def test_square_center(self):
        d = graph_distance(build_fd_cube(2, 3), [4])
        np.testing.assert_array_equal(d.reshape(3, 3), [[2, 1, 2], [1, 0, 1], [2, 1, 2]])

    def test_nearest_of_several_seeds(self):
        np.testing.assert_array_equal(graph_distance(build_fd_interval(7), [0, 6]), [0, 1, 2, 3, 2, 1, 0])

    def test_unreachable_nodes(self):
        sys = DiscreteSystem(dim=1, nodes=[[0.25], [0.5], [0.75]], mass=[1.0, 1.0, 1.0],
                             stiffness=sp.csr_matrix([[2.0, -1.0, 0.0], [-1.0, 2.0, 0.0], [0.0, 0.0, 1.0]]))
        d = graph_distance(sys, [0])
        assert d[1] == 1 and math.isinf(d[2])

    @pytest.mark.parametrize('seeds', [[], [5], [-1]])
    def test_rejects_bad_seeds(self, seeds):
        with pytest.raises(ValueError):
            graph_distance(build_fd_interval(5), seeds)


class TestDetectionAndTime:

    def test_detection(self, interval2):
        traj = synthetic_trajectory(interval2, 2.0, [0.0, 0.1, 0.2], [[1, 1], [2, 2], [3, 3]])
        traj.phi[:] = [1.0, -0.5, -1.0]
        assert first_negative_phi(traj) == 1
        assert detect_blowup(traj) == (True, 1)
        traj.termination = Termination.STEADY
        assert detect_blowup(traj) == (False, None)

    def test_closed_form_tail(self):
        sys = single_node(a=1.0, m=1.0)
        traj = synthetic_trajectory(sys, 2.0, [0.8, 0.9], [[99.0], [100.0]], lam=0.01)
        T, bound = estimate_blowup_time(traj)
        assert T == pytest.approx(0.9001, rel=1e-12)
        assert bound == pytest.approx(1e-4, rel=1e-12)

    def test_bound_uses_smallest_increment(self):
        sys = single_node(a=1.0, m=1.0)
        traj = synthetic_trajectory(sys, 2.0, [0.7, 0.8, 0.9], [[98.5], [99.0], [100.0]], lam=0.01)
        T, bound = estimate_blowup_time(traj)
        assert T == pytest.approx(0.9001)
        assert bound == pytest.approx(2e-4)

    def test_nonpositive_increment(self):
        sys = single_node(a=1.0, m=1.0)
        traj = synthetic_trajectory(sys, 2.0, [0.8, 0.9], [[100.0], [99.0]], lam=0.01)
        assert estimate_blowup_time(traj) == (0.9, math.inf)

    def test_needs_two_steps(self):
        sys = single_node(a=1.0, m=1.0)
        with pytest.raises(DiagnosticsError):
            estimate_blowup_time(synthetic_trajectory(sys, 2.0, [0.0], [[1.0]]))

    def test_linear_growth(self):
        sys = single_node(a=1.0, m=1.0)
        j = np.arange(40)
        traj = synthetic_trajectory(sys, 2.0, np.cumsum(1e-3 / (10.0 + 2 * j) ** 2),
                                    (10.0 + 2 * j)[:, None])
        slope, residual = linear_growth_fit(traj)
        assert slope == pytest.approx(2.0)
        assert residual < 1e-12


class TestRescale:

    def test_scaling_and_cut(self, interval2):
        traj = synthetic_trajectory(interval2, 2.0, [0.0, 0.5, 0.75, 1.0], [[1, 1], [2, 2], [4, 4], [8, 8]])
        out = rescale(traj, 1.0)
        np.testing.assert_array_equal(out.index, [0, 1, 2])
        np.testing.assert_allclose(out.y[:, 0], [1.0, 1.0, 1.0])

    def test_rate_constant_of_exact_profile(self):
        p = 3.0
        C = blowup_constant(p)
        _, traj = profile_trajectory(p, lambda g: C * g ** -0.5, lambda g: 0.2 * g ** -0.1, lambda g: 1.0 + g)
        assert rate_constant(traj, 1.0) == pytest.approx(C, rel=1e-6)

    def test_rate_constant_needs_a_tail(self):
        _, traj = profile_trajectory(2.0, lambda g: 1 / g, lambda g: 1.0 + g, lambda g: 1.0 + g, n_points=40)
        with pytest.raises(DiagnosticsError):
            rate_constant(traj, 1.0)

    def test_step_ratio_of_geometric_times(self):
        _, traj = profile_trajectory(2.0, lambda g: 1 / g, lambda g: 1.0 + g, lambda g: 1.0 + g)
        expected = (1e-1 / 1e-7) ** (1 / 119)
        assert step_ratio_tail(traj, 1.0) == pytest.approx(expected, rel=1e-6)


class TestClassify:

    def test_power_rings(self):
        p = 1.6
        C = blowup_constant(p)
        sys, traj = profile_trajectory(p, lambda g: C * g ** (-1 / 0.6), lambda g: 0.5 * g ** (-2 / 3),
                                       lambda g: 3.0 + g)
        classes = classify_blowup_set(sys, traj, 1.0, p, window=(1e-7, 1e-1))
        status = [c.status for c in classes]
        assert status == ['bounded', 'blowup', 'bstar', 'blowup', 'bounded']
        assert [c.d for c in classes] == [2, 1, 0, 1, 2]
        assert classes[2].fitted_exponent == pytest.approx(1 / 0.6, rel=1e-6)
        assert classes[1].fitted_exponent == pytest.approx(2 / 3, rel=1e-6)
        assert classes[2].y_tail_median == pytest.approx(C, rel=1e-6)

    def test_log_ring(self):
        sys, traj = profile_trajectory(2.0, lambda g: 1 / g, lambda g: 5.0 - np.log(g), lambda g: 3.0 + g)
        classes = classify_blowup_set(sys, traj, 1.0, 2.0, tail_bound=1e-9, t_detect=0.0)
        assert [c.status for c in classes] == ['bounded', 'log_blowup', 'bstar', 'log_blowup', 'bounded']
        assert classes[1].log_case and classes[1].log_slope == pytest.approx(1.0, rel=1e-6)
        assert not classes[2].log_case

    def test_bstar_fallback_to_argmax(self, caplog):
        p = 3.0
        C = blowup_constant(p)
        sys, traj = profile_trajectory(p, lambda g: 3 * C * g ** -0.5, lambda g: 1.0 + g, lambda g: 1.0 + g)
        assert 3 * C > (1 + BSTAR_RTOL) * C
        classes = classify_blowup_set(sys, traj, 1.0, p, window=(1e-7, 1e-1))
        assert [c.node for c in classes if c.in_bstar] == [2]
        assert 'falls back' in caplog.text
        # K = 0: every other node must stay bounded
        assert [c.status for c in classes] == ['bounded', 'bounded', 'bstar', 'bounded', 'bounded']

    def test_biased_medians_keep_the_peak_in_bstar(self, caplog):
        # every y scaled up by a biased T: the peak sits at 1.5 C_p, its neighbors at C_p
        p = 3.0
        C = blowup_constant(p)
        sys, traj = profile_trajectory(p, lambda g: 1.5 * C * g ** -0.5, lambda g: C * g ** -0.5,
                                       lambda g: 1.0 + g)
        classes = classify_blowup_set(sys, traj, 1.0, p, window=(1e-7, 1e-1))
        assert [c.node for c in classes if c.in_bstar] == [2]
        assert classes[1].y_tail_median == pytest.approx(C, rel=1e-6)
        assert 'falls back' in caplog.text

    def test_rejected_fit_reports_no_exponent(self, rng):
        p = 1.6
        C = blowup_constant(p)
        sys, traj = profile_trajectory(p, lambda g: C * g ** (-1 / 0.6),
                                       lambda g: g ** (-2 / 3) * np.exp(rng.normal(0.0, 0.5, g.size)),
                                       lambda g: 3.0 + g)
        classes = classify_blowup_set(sys, traj, 1.0, p, window=(1e-7, 1e-1))
        for k in (1, 3):
            assert classes[k].status == 'unclassified'
            assert classes[k].fitted_exponent is None
        assert classes[0].fitted_exponent is None

    def test_growing_far_node_is_not_bounded(self):
        p = 3.0
        C = blowup_constant(p)
        sys, traj = profile_trajectory(p, lambda g: C * g ** -0.5, lambda g: 1.0 + g, lambda g: g ** -0.4)
        classes = classify_blowup_set(sys, traj, 1.0, p, window=(1e-7, 1e-1))
        assert classes[0].status == 'unclassified'
        assert classes[0].residual >= 10.0


class TestDiagnose:

    @pytest.fixture(scope='class')
    def blowup_run(self):
        sys = build_fd_interval(10)
        traj = run(sys, SolverConfig(p=2.0, lam=0.1, w_stop=500.0), sample_initial(sys, Profile('sine', 50.0)))
        return traj, diagnose(traj)

    def test_blowup_report(self, blowup_run):
        traj, report = blowup_run
        assert report.detected and report.first_negative_phi_index == 0
        assert report.termination == 'w_threshold'
        assert report.T_estimate > traj.t[-1]
        assert 0.0 < report.T_tail_bound < math.inf
        assert report.tau_tail['passed']
        assert report.growth_slope > 0.0
        assert report.K == 1 and report.log_case
        assert report.phi_printed_at_j0 is not None
        assert 1.0 <= report.step_ratio <= 1.05
        assert report.node_classes[int(np.argmax(traj.final_state))].in_bstar
        assert len(report.node_classes) == 10
        assert report.flags == []

    def test_report_serializes(self, blowup_run, tmp_path):
        _, report = blowup_run
        data = report.to_dict()
        assert data['C_p'] == 1.0
        assert len(data['node_classes']) == 10
        report.write_node_csv(str(tmp_path / 'nodes.csv'))
        rows = read_csv(str(tmp_path / 'nodes.csv'))
        assert list(rows[0]) == ['node', 'd', 'class', 'fitted_exponent', 'residual']
        assert len(rows) == 10

    def test_decay_report(self):
        sys = build_fd_interval(5)
        traj = run(sys, SolverConfig(p=2.0, lam=1e-5), sample_initial(sys, Profile('sine', 0.1)))
        report = diagnose(traj)
        assert not report.detected
        assert report.T_estimate is None and report.rate_constant is None
        assert report.termination == 'steady'
        assert report.flags == []

    def test_short_blowup_is_flagged(self):
        _, traj = profile_trajectory(2.0, lambda g: 1 / g, lambda g: 1.0 + g, lambda g: 1.0 + g, n_points=30)
        report = diagnose(traj)
        assert report.detected
        assert 'insufficient_tail' in report.flags

    def test_negative_phi_without_blowup(self, interval2):
        traj = synthetic_trajectory(interval2, 2.0, [0.0, 0.1, 0.2], [[1, 1], [2, 2], [3, 3]],
                                    termination=Termination.MAX_STEPS)
        report = diagnose(traj)
        assert 'negative_phi_without_blowup' in report.flags

    def test_phi_increase(self, interval2):
        traj = synthetic_trajectory(interval2, 2.0, [0.0, 0.1, 0.2], [[1, 1], [2, 2], [3, 3]],
                                    termination=Termination.MAX_STEPS)
        traj.phi[:] = [1.0, 2.0, 0.5]
        assert 'phi_increase' in diagnose(traj).flags
