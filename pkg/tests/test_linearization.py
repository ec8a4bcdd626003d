import inspect
import json
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import edge, make_network, node, physical_point, random_network, single_pipe
from gaspolicy.linearization import (
    DegenerateFlowError, dumps_model, linearize, respond, response_matrices, sensitivities,
    weymouth_jacobians, weymouth_residual,
)
from gaspolicy.network import active_incidence, incidence_matrix
from gaspolicy.steady_state import simulate_flow


def _point(phi, pi, kappa):
    return SimpleNamespace(phi=np.asarray(phi, float), pi=np.asarray(pi, float), kappa=np.asarray(kappa, float))


def central_jacobian(f, x, h):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(cols).T


def assert_entries_match(J, J_fd, rel=1e-6):
    scale = max(np.abs(J).max(), 1e-300)
    nz = J != 0
    assert np.all(np.abs(J_fd[nz] - J[nz]) <= rel * np.abs(J[nz]))
    assert np.all(np.abs(J_fd[~nz]) <= 1e-12 * scale)


def test_single_pipe_jacobians():
    net = single_pipe(w=1.0)
    J_phi, J_pi, J_kappa = weymouth_jacobians(_point([1.0], [2.0, 1.0], [0.0]), net)
    np.testing.assert_array_equal(J_phi, [[2.0]])
    np.testing.assert_array_equal(J_pi, -np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(J_kappa, [[-1.0]])


def test_jacobians_closed_form_w2():
    net = single_pipe(w=2.0)
    J_phi, _, J_kappa = weymouth_jacobians(_point([3.0], [5.5, 1.0], [0.0]), net)
    np.testing.assert_array_equal(J_phi, [[6.0]])
    np.testing.assert_array_equal(J_kappa, [[-2.0]])


def jacobian_fd_check(net, pt):
    J_phi, J_pi, J_kappa = weymouth_jacobians(pt, net)
    h_phi = 1e-5 * np.abs(pt.phi).max()
    h_pi = 1e-5 * np.abs(pt.pi).max()
    h_k = 1e-5 * max(np.abs(pt.kappa).max(), 1.0)
    assert_entries_match(J_phi, central_jacobian(lambda x: weymouth_residual(net, x, pt.pi, pt.kappa), pt.phi, h_phi))
    assert_entries_match(J_pi, central_jacobian(lambda x: weymouth_residual(net, pt.phi, x, pt.kappa), pt.pi, h_pi))
    assert_entries_match(J_kappa,
                         central_jacobian(lambda x: weymouth_residual(net, pt.phi, pt.pi, x), pt.kappa, h_k))


@pytest.mark.parametrize("seed", range(20))
def test_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    jacobian_fd_check(net, physical_point(net, rng))


@pytest.mark.parametrize("seed", range(20))
def test_offset_is_half_flow_at_stationary_points(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    pt = physical_point(net, rng)
    g1, _, _ = sensitivities(pt, net)
    assert np.abs(g1 - pt.phi / 2).max() <= 1e-9


def test_single_pipe_sensitivities():
    net = single_pipe(w=1.0)
    g1, g2, g3 = sensitivities(_point([1.0], [51.0, 50.0], [0.0]), net)
    np.testing.assert_allclose(g2, [[0.5, -0.5]])
    np.testing.assert_allclose(g3, [[0.5]])
    np.testing.assert_allclose(g1, [0.5])


def test_single_pipe_reduced_inverse():
    net = single_pipe(w=1.0)
    lin = linearize(_point([1.0], [51.0, 50.0], [0.0]), net)
    # reduced nodal matrix at node 2 and its padded inverse
    assert lin.nodal_pressure[1, 1] == pytest.approx(0.5)
    np.testing.assert_allclose(lin.pressure_response, [[0.0, 0.0], [0.0, 2.0]])
    # one extra unit extracted at node 2 lowers its squared pressure by 2
    M_pi, _ = response_matrices(lin, np.zeros((2, 2)), np.zeros((1, 2)))
    assert M_pi[1, 1] == pytest.approx(-2.0)


@pytest.mark.parametrize("delta", [1e-2, 1e-3])
def test_pressure_perturbation_first_order(delta):
    # exact flow on a single pipe is sqrt(w * drop); the linear map must be tangent
    w, phi0 = 1.0, 1.0
    net = single_pipe(w=w)
    pt = _point([phi0], [51.0, 50.0], [0.0])
    g1, g2, g3 = sensitivities(pt, net)

    def err(d):
        exact = np.sqrt(w * (1.0 + d))
        return abs(exact - (g1[0] + g2[0] @ (pt.pi + [d, 0.0])))

    assert g2[0, 0] * delta == pytest.approx(0.5 * w * delta / phi0)
    ratio = err(delta) / err(delta / 2)
    assert ratio == pytest.approx(4.0, rel=0.05)


def test_tree_reduced_inverse_is_identity_off_reference():
    net = make_network([node(1, injection_max=10.0), node(2, extraction_mean=1.0), node(3, extraction_mean=1.0),
                        node(4, extraction_mean=1.0)], [edge(1, 2, 2.0), edge(2, 3, 1.0), edge(2, 4, 3.0)])
    st = simulate_flow(net, [3.0, 0, 0, 0], np.zeros(3), 100.0)
    lin = linearize(_point(st.phi, st.pi, np.zeros(3)), net)
    keep = np.arange(4) != net.ref
    prod = lin.pressure_response @ lin.nodal_pressure
    np.testing.assert_allclose(prod[np.ix_(keep, keep)], np.eye(3), atol=1e-12)
    assert np.all(lin.pressure_response[net.ref] == 0.0)
    assert np.all(lin.pressure_response[:, net.ref] == 0.0)


def test_no_active_edges_specialization():
    rng = np.random.default_rng(3)
    net = random_network(rng, active=False)
    lin = linearize(physical_point(net, rng), net)
    A = incidence_matrix(net)
    np.testing.assert_array_equal(active_incidence(net), 0.0)
    np.testing.assert_allclose(lin.nodal_regulation, A @ lin.flow_regulation)
    expected = lin.flow_pressure @ lin.pressure_response @ A @ lin.flow_regulation - lin.flow_regulation
    np.testing.assert_allclose(lin.regulation_response, expected, atol=1e-12)


def _balanced_policy(net, rng):
    """Random recourse with the reference row free and the balance condition met."""
    N, E = net.n_nodes, net.n_edges
    B = active_incidence(net)
    alpha = np.zeros((N, N))
    beta = np.zeros((E, N))
    sup = np.flatnonzero(net.suppliers)
    alpha[sup] = rng.uniform(0, 1, (sup.size, N))
    beta[net.active] = rng.normal(0, 0.3, (int(net.active.sum()), N))
    # restore (alpha - B beta)' 1 = 1 through the reference supplier
    alpha[net.ref] += 1.0 - (alpha - B @ beta).sum(axis=0)
    return alpha, beta


@pytest.mark.parametrize("seed", range(10))
def test_conservation_along_responses(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    pt = physical_point(net, rng)
    lin = linearize(pt, net)
    alpha, beta = _balanced_policy(net, rng)
    A, B = lin.incidence, lin.fuel
    xi = rng.normal(0, 0.2, (100, net.n_nodes))
    pi_t, phi_t = respond(lin, (pt.pi, pt.phi, alpha, beta), xi)
    theta_t = pt.theta + xi @ alpha.T
    kappa_t = pt.kappa + xi @ beta.T
    resid = phi_t @ A.T - (theta_t - kappa_t @ B.T - pt.extraction - xi)
    assert np.abs(resid).max() <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_linearized_weymouth_holds_along_responses(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    pt = physical_point(net, rng)
    lin = linearize(pt, net)
    alpha, beta = _balanced_policy(net, rng)
    xi = rng.normal(0, 0.2, (100, net.n_nodes))
    pi_t, phi_t = respond(lin, (pt.pi, pt.phi, alpha, beta), xi)
    kappa_t = pt.kappa + xi @ beta.T
    pred = lin.flow_offset + pi_t @ lin.flow_pressure.T + kappa_t @ lin.flow_regulation.T
    assert np.abs(phi_t - pred).max() <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_reference_pressure_pinned(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    pt = physical_point(net, rng)
    lin = linearize(pt, net)
    alpha, beta = _balanced_policy(net, rng)
    pi_t, _ = respond(lin, (pt.pi, pt.phi, alpha, beta), rng.normal(0, 1, (50, net.n_nodes)))
    np.testing.assert_array_equal(pi_t[:, net.ref], pt.pi[net.ref])


def test_zero_error_reproduces_nominal(six_lin, six_point):
    N, E = six_lin.n_nodes, six_lin.n_edges
    pi_t, phi_t = respond(six_lin, (six_point.pi, six_point.phi, np.zeros((N, N)), np.zeros((E, N))), np.zeros(N))
    np.testing.assert_array_equal(pi_t, six_point.pi)
    np.testing.assert_array_equal(phi_t, six_point.phi)


def test_self_balancing_recourse_has_no_response(six_lin, six_point):
    N, E = six_lin.n_nodes, six_lin.n_edges
    xi = np.random.default_rng(0).normal(0, 1, (20, N))
    pi_t, phi_t = respond(six_lin, (six_point.pi, six_point.phi, np.eye(N), np.zeros((E, N))), xi)
    np.testing.assert_array_equal(pi_t, np.broadcast_to(six_point.pi, pi_t.shape))
    np.testing.assert_array_equal(phi_t, np.broadcast_to(six_point.phi, phi_t.shape))


@pytest.mark.parametrize("seed", range(5))
def test_responses_are_tangent_to_physics(seed):
    # the reference supplier absorbs all error; the exact flow solve must agree to first order
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    pt = physical_point(net, rng)
    lin = linearize(pt, net)
    N, E = net.n_nodes, net.n_edges
    alpha = np.zeros((N, N))
    alpha[net.ref] = 1.0
    M_pi, M_phi = response_matrices(lin, alpha, np.zeros((E, N)))
    h = 1e-4
    for k in np.flatnonzero(np.arange(N) != net.ref):
        cols = []
        for s in (1, -1):
            xi = np.zeros(N)
            xi[k] = s * h
            st = simulate_flow(net, pt.theta + alpha @ xi, pt.kappa, pt.pi[net.ref], pt.extraction + xi, tol=1e-12)
            cols.append((st.pi, st.phi))
        d_pi = (cols[0][0] - cols[1][0]) / (2 * h)
        d_phi = (cols[0][1] - cols[1][1]) / (2 * h)
        np.testing.assert_allclose(d_pi, M_pi[:, k], rtol=1e-4, atol=1e-4 * np.abs(M_pi).max())
        np.testing.assert_allclose(d_phi, M_phi[:, k], rtol=1e-4, atol=1e-4 * np.abs(M_phi).max())


def test_respond_is_distribution_free():
    params = list(inspect.signature(respond).parameters)
    assert params == ["lin", "policy", "xi"]


def test_all_zero_flow_is_degenerate():
    net = single_pipe()
    with pytest.raises(DegenerateFlowError):
        sensitivities(_point([0.0], [1.0, 1.0], [0.0]), net)


def test_model_dump_round_trips(six_lin):
    data = json.loads(dumps_model(six_lin))
    np.testing.assert_array_equal(np.array(data["pressure_response"]), six_lin.pressure_response)
    assert data["ref"] == six_lin.ref
