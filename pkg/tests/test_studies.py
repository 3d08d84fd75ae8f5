"""Desk-scale runs that check the asymptotic behavior of the adaptive schemes."""
import os

import numpy as np
import pytest

from conftest import single_node
from diagnostics import blowup_constant, diagnose, estimate_blowup_time
from discretize import Profile, build_fd_interval, sample_initial
from pipeline import ExperimentConfig, ExperimentPipeline
from stepper import SolverConfig, Termination, run

pytestmark = pytest.mark.slow

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')

def sine_run(p, lam, w_stop, scheme='explicit', n=20, amplitude=50.0):
    sys = build_fd_interval(n)
    data = sample_initial(sys, Profile('sine', amplitude))
    traj = run(sys, SolverConfig(p=p, lam=lam, w_stop=w_stop, scheme=scheme), data)
    return sys, data, traj

@pytest.mark.parametrize('scheme', ['explicit', 'implicit'])
def test_rate_constant_quadratic(scheme):
    _, _, traj = sine_run(2.0, 0.5, 1e6, scheme=scheme)
    report = diagnose(traj)
    assert report.detected and report.termination == 'w_threshold'
    assert 0.95 <= report.rate_constant <= 1.05
    assert report.tau_tail['passed']
    assert report.growth_residual < 0.05
    assert np.all(np.diff(traj.phi) <= 1e-12 * np.abs(traj.phi[1:]))

@pytest.mark.parametrize('scheme', ['explicit', 'implicit'])
def test_rate_constant_cubic(scheme):
    _, _, traj = sine_run(3.0, 1e-3, 1e4, scheme=scheme)
    report = diagnose(traj)
    assert report.detected
    assert blowup_constant(3.0) == pytest.approx(0.70711, rel=1e-5)
    assert 0.67 <= report.rate_constant <= 0.74

def test_blowup_time_gaps_shrink_with_lambda():
    times = []
    for lam in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
        _, _, traj = sine_run(2.0, lam, 2e3)
        T, _ = estimate_blowup_time(traj)
        times.append(T)
    gaps = np.abs(np.diff(times))
    assert np.all(np.diff(gaps) < 0.0)
    assert gaps[-1] < 1e-3 * times[-1]

def test_blowup_time_gaps_shrink_with_h():
    times = []
    for n in (10, 20, 40):
        sys = build_fd_interval(n)
        data = sample_initial(sys, Profile('sine', 50.0))
        traj = run(sys, SolverConfig(p=2.0, lam=2e-3, w_stop=2e3), data)
        T, _ = estimate_blowup_time(traj)
        times.append(T)
    assert abs(times[1] - times[0]) > abs(times[2] - times[1])

def test_ode_limit_blowup_time():
    sys = single_node(a=4e-12, m=0.5)
    traj = run(sys, SolverConfig(p=2.0, lam=1e-4, w_stop=5.0), [1.0])
    T, bound = estimate_blowup_time(traj)
    assert T == pytest.approx(1.0, rel=5e-3)
    assert bound == pytest.approx(T - traj.t[-1], rel=1e-6)

def test_decay_below_threshold():
    sys, _, traj = sine_run(2.0, 1e-6, 1e6, amplitude=0.1)
    assert traj.termination is Termination.STEADY
    report = diagnose(traj)
    assert not report.detected and report.flags == []

def test_blowup_set_is_a_single_node():
    sys = build_fd_interval(21)
    data = sample_initial(sys, Profile('bump', 40.0, sharpness=100.0))
    traj = run(sys, SolverConfig(p=3.0, lam=1e-3, w_stop=1e4), data)
    report = diagnose(traj)
    assert report.detected and report.K == 0
    assert [c.node for c in report.node_classes if c.in_bstar] == [10]
    assert report.node_classes[10].status == 'bstar'
    assert int(np.argmax(traj.final_state)) == 10
    assert all(c.status == 'bounded' for c in report.node_classes if c.node != 10)

def test_order_study(tmp_path):
    config = ExperimentConfig.from_file(os.path.join(CONFIG_DIR, 'order.yaml'))
    rows = ExperimentPipeline(config).order(output_dir=str(tmp_path))
    assert [r['n'] for r in rows] == [10, 20, 40]
    assert all(r['order'] >= 1.9 for r in rows[1:])
    assert all(3.6 <= r['consistency_ratio'] <= 4.4 for r in rows[1:])


def test_blowup_set_first_ring():
    config = ExperimentConfig.from_file(os.path.join(CONFIG_DIR, 'set_p16.yaml'))
    traj, report = ExperimentPipeline(config).run()
    assert report.detected and (report.K, report.log_case) == (1, False)
    classes = report.node_classes
    assert [c.d for c in classes] == [2, 1, 0, 1, 2]
    assert [c.node for c in classes if c.in_bstar] == [2]
    assert int(np.argmax(traj.final_state)) == 2
    assert classes[2].status == 'bstar'
    expected = 1.0 / 0.6 - 1.0
    for k in (1, 3):
        assert classes[k].status == 'blowup'
        assert classes[k].fitted_exponent == pytest.approx(expected, rel=0.1)
    assert classes[0].status == classes[4].status == 'bounded'
    # exponents fall off with the distance from B*
    assert classes[2].fitted_exponent > classes[1].fitted_exponent
    assert classes[0].fitted_exponent is None


def test_blowup_set_log_ring():
    config = ExperimentConfig.from_file(os.path.join(CONFIG_DIR, 'set_p2.yaml'))
    _, report = ExperimentPipeline(config).run()
    assert report.detected and (report.K, report.log_case) == (1, True)
    classes = report.node_classes
    assert [c.node for c in classes if c.in_bstar] == [2]
    for k in (1, 3):
        assert classes[k].status == 'log_blowup'
        assert classes[k].log_slope > 0.0
        assert classes[k].fitted_exponent < 0.1
        assert classes[k].y_tail_median < 1e-3 * report.C_p
