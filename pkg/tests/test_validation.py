import numpy as np
import pytest

from conftest import single_pipe
from gaspolicy import policy, uncertainty
from gaspolicy.linearization import linearize
from gaspolicy.steady_state import solve_deterministic
from gaspolicy.validation import (
    ValidationError, binomial_ci, error_bound, evaluate_policies, flow_reversal_stats, project_realization,
    projection_metrics, sample_complexity, validate,
)


@pytest.mark.parametrize("p, v, expected", [(0.1, 0.1, 99), (0.9, 0.9, 1), (0.05, 0.1, 199), (0.5, 0.5, 3)])
def test_sample_complexity(p, v, expected):
    S = sample_complexity(p, v)
    assert S == expected
    assert S >= 1 / (p * v) - 1


@pytest.mark.parametrize("p, v", [(0.0, 0.1), (0.1, 1.0), (-1.0, 0.5)])
def test_sample_complexity_rejects_bad_levels(p, v):
    with pytest.raises(ValueError):
        sample_complexity(p, v)


def test_clopper_pearson_interval():
    # reference values from the beta quantiles of the exact interval
    lo, hi = binomial_ci(0, 100)
    assert lo == 0.0 and hi == pytest.approx(1 - 0.025 ** (1 / 100), rel=1e-9)
    lo, hi = binomial_ci(100, 100)
    assert hi == 1.0 and lo == pytest.approx(0.025 ** (1 / 100), rel=1e-9)
    lo, hi = binomial_ci(5, 50)
    assert lo < 0.1 < hi


def test_zero_covariance_never_violates():
    net = single_pipe(demand=2.0, stddev=0.0, pmin=30.0, pmax=100.0)
    point = solve_deterministic(net)
    lin = linearize(point, net)
    unc = uncertainty.from_network(net)
    sol = policy.optimize(net, lin, unc)
    report = validate(sol, lin, net, unc, S=200, seed=0, point=point)
    assert report.violations.joint_frequency == 0.0
    assert all(f == 0.0 for f in report.violations.frequencies.values())
    np.testing.assert_array_equal(report.violations.flow_reversal, 0.0)
    assert report.projection.p_inj <= 1e-6 and report.projection.p_act <= 1e-6


def test_cc_policies_beat_deterministic(three_node, three_lin, three_cc):
    unc = three_cc.extra["uncertainty"]
    det = policy.optimize(three_node, three_lin, uncertainty.from_network(three_node, eps=0.1), z=0.0)
    xi = uncertainty.sample(unc, 5000, seed=3)
    cc_rep = evaluate_policies(three_cc, three_lin, three_node, xi)
    det_rep = evaluate_policies(det, three_lin, three_node, xi)
    assert cc_rep.joint_frequency <= 0.1
    assert det_rep.joint_frequency > 0.3
    assert 0.0 <= cc_rep.joint_ci[0] <= cc_rep.joint_frequency <= cc_rep.joint_ci[1] <= 1.0
    assert all(0.0 <= f <= 1.0 for f in det_rep.frequencies.values())


def test_empirical_stddev_matches_closed_form(three_node, three_lin, three_cc):
    S = 10_000
    xi = uncertainty.sample(three_cc.extra["uncertainty"], S, seed=4)
    rep = evaluate_policies(three_cc, three_lin, three_node, xi)
    s_pi, s_phi = policy.state_stddev(three_cc, three_lin, three_cc.extra["uncertainty"])
    nz = s_pi > 0
    np.testing.assert_allclose(rep.stddev_pi[nz], s_pi[nz], rtol=3 / np.sqrt(S))
    np.testing.assert_allclose(rep.stddev_phi, s_phi, rtol=3 / np.sqrt(S))


def test_projection_at_zero_error_reproduces_anchor(three_node, three_point, three_cc):
    pr = project_realization(three_node, three_cc.theta, three_cc.kappa, np.zeros(3), three_point,
                             three_cc.pi[three_node.ref])
    assert pr.converged
    assert pr.distance <= 1e-6


def test_projection_metrics_zero_when_distances_zero(three_node, three_point, three_cc):
    summary = projection_metrics(three_cc, three_node, np.zeros((4, 3)), three_point)
    assert summary.failures == 0
    assert np.all(summary.distances <= 1e-6)
    assert summary.p_inj <= 1e-6 and summary.p_act <= 1e-6


def test_deterministic_policies_need_corrections(three_node, three_lin, three_point, three_cc):
    det = policy.optimize(three_node, three_lin, uncertainty.from_network(three_node, eps=0.1), z=0.0)
    xi = uncertainty.sample(three_cc.extra["uncertainty"], 30, seed=5)
    cc = projection_metrics(three_cc, three_node, xi, three_point)
    dt = projection_metrics(det, three_node, xi, three_point)
    assert cc.failures == dt.failures == 0
    assert dt.p_inj + dt.p_act > 10 * (cc.p_inj + cc.p_act)
    assert cc.p_inj >= 0 and cc.p_act >= 0


def test_parallel_projection_matches_sequential(three_node, three_point, three_cc):
    xi = uncertainty.sample(three_cc.extra["uncertainty"], 6, seed=6)
    a = projection_metrics(three_cc, three_node, xi, three_point, workers=1)
    b = projection_metrics(three_cc, three_node, xi, three_point, workers=3)
    assert a.distances.tobytes() == b.distances.tobytes()


def test_zero_variance_edge_never_reverses(six_node, six_lin, six_solutions, six_unc):
    sol = six_solutions["cc"]
    xi = uncertainty.sample(sol.extra["uncertainty"], 2000, seed=0)
    rev = flow_reversal_stats(sol, six_lin, xi)
    _, s_phi = policy.state_stddev(sol, six_lin, sol.extra["uncertainty"])
    assert np.all((rev >= 0) & (rev <= 1))
    np.testing.assert_array_equal(rev[s_phi == 0], 0.0)


def test_error_bound_pipeline(three_node, three_lin, three_point, three_cc):
    unc = three_cc.extra["uncertainty"]
    bound = error_bound(2, three_cc, three_lin, three_node, unc, 0.1, 0.1, three_point, seed=0)
    assert bound.s_used == 99 == bound.errors.size
    assert bound.t_star == bound.errors.max() >= 0.0
    # approximation error stays a small fraction of the nominal pressure
    assert bound.t_star <= 0.05 * three_cc.pi[2]
    assert "0.9" in bound.certificate
    assert error_bound(three_node.ref, three_cc, three_lin, three_node, unc, 0.5, 0.5, three_point, seed=0).t_star == 0.0


def test_error_bound_aborts_on_failed_projection(three_node, three_lin, three_point, three_cc, monkeypatch):
    import gaspolicy.validation as val
    from gaspolicy.steady_state import ConvergenceError

    def boom(*args, **kwargs):
        raise ConvergenceError("stalled")

    monkeypatch.setattr(val, "project_controls", boom)
    with pytest.raises(ValidationError, match="certificate invalid"):
        error_bound(1, three_cc, three_lin, three_node, three_cc.extra["uncertainty"], 0.9, 0.9, three_point)


def test_validate_is_deterministic(three_node, three_lin, three_point, three_cc):
    unc = three_cc.extra["uncertainty"]
    a = validate(three_cc, three_lin, three_node, unc, S=300, seed=9, point=three_point, project=False)
    b = validate(three_cc, three_lin, three_node, unc, S=300, seed=9, point=three_point, project=False)
    assert a.violations.joint_frequency == b.violations.joint_frequency
    assert a.violations.stddev_pi.tobytes() == b.violations.stddev_pi.tobytes()
