from pathlib import Path

import numpy as np
import pytest

from gaspolicy import policy, uncertainty
from gaspolicy.linearization import linearize
from gaspolicy.network import load_network, network_from_dict
from gaspolicy.steady_state import StationaryPoint, simulate_flow, solve_deterministic

DATA = Path(__file__).resolve().parents[1] / "src" / "gaspolicy" / "data"
SIX_NODE = DATA / "six_node.json"
THREE_NODE = DATA / "three_node.json"


def node(i, **kw):
    rec = dict(id=str(i), pressure_min=0.0, pressure_max=100.0, injection_min=0.0, injection_max=0.0,
               cost_linear=0.0, cost_quadratic=0.0, extraction_mean=0.0, extraction_stddev=0.0)
    rec.update(kw)
    return rec


def edge(a, b, w=1.0, kind="passive", b_fuel=0.0, kappa_min=0.0, kappa_max=0.0):
    return {"from": str(a), "to": str(b), "w": w, "kind": kind, "b": b_fuel,
            "kappa_min": kappa_min, "kappa_max": kappa_max}


def make_network(nodes, edges, ref="1", **extra):
    return network_from_dict({"nodes": nodes, "edges": edges, "reference_node": ref, **extra})


def single_pipe(demand=1.0, c1=1.0, c2=0.0, stddev=0.0, w=1.0, pmin=0.0, pmax=100.0, qmax=10.0):
    return make_network(
        [node(1, injection_max=qmax, cost_linear=c1, cost_quadratic=c2, pressure_min=pmin, pressure_max=pmax),
         node(2, extraction_mean=demand, extraction_stddev=stddev, pressure_min=pmin, pressure_max=pmax)],
        [edge(1, 2, w)],
    )


def random_network(rng, n_nodes=None, active=True):
    """Connected network with node 1 as supplier/reference and optional active edges."""
    N = int(n_nodes or rng.integers(3, 11))
    pairs = []
    for k in range(1, N):
        pairs.append((int(rng.integers(0, k)), k))
    extra = int(rng.integers(0, N // 2 + 1))
    existing = {frozenset(p) for p in pairs}
    for _ in range(extra):
        a, b = rng.choice(N, 2, replace=False)
        if frozenset((a, b)) not in existing:
            pairs.append((int(a), int(b)))
            existing.add(frozenset((a, b)))
    edges = []
    for a, b in pairs:
        kind = "passive"
        if active and a != 0 and b != 0 and rng.random() < 0.3:
            kind = "compressor" if rng.random() < 0.6 else "valve"
        if kind == "compressor":
            edges.append(edge(a + 1, b + 1, float(rng.uniform(0.5, 5.0)), kind, 0.01, 0.0, 5.0))
        elif kind == "valve":
            edges.append(edge(a + 1, b + 1, float(rng.uniform(0.5, 5.0)), kind, 0.01, -5.0, 0.0))
        else:
            edges.append(edge(a + 1, b + 1, float(rng.uniform(0.5, 5.0))))
    nodes = [node(1, injection_max=100.0, cost_linear=1.0, pressure_max=1e4)]
    for k in range(2, N + 1):
        is_sup = rng.random() < 0.25
        nodes.append(node(k, injection_max=20.0 if is_sup else 0.0, cost_linear=float(rng.uniform(1, 3)) if is_sup else 0.0,
                          extraction_mean=0.0 if is_sup else float(rng.uniform(0.5, 3.0)),
                          extraction_stddev=0.0 if is_sup else float(rng.uniform(0.05, 0.3)),
                          pressure_max=1e4))
    return make_network(nodes, edges)


def physical_point(net, rng=None, pi_ref=5000.0) -> StationaryPoint:
    """Exact steady state for random balanced controls (supplier 1 balances)."""
    rng = rng or np.random.default_rng(0)
    kappa = np.zeros(net.n_edges)
    kappa[net.compressors] = rng.uniform(0.5, 4.0, int(net.compressors.sum()))
    kappa[net.valves] = -rng.uniform(0.5, 4.0, int(net.valves.sum()))
    theta = np.zeros(net.n_nodes)
    others = np.flatnonzero(net.suppliers)[1:]
    theta[others] = rng.uniform(0.5, 3.0, others.size)
    from gaspolicy.network import active_incidence
    B = active_incidence(net)
    theta[0] = net.extraction_mean.sum() + (B @ kappa).sum() - theta.sum()
    st = simulate_flow(net, theta, kappa, pi_ref)
    return StationaryPoint(st.phi, st.pi, kappa, theta, net.extraction_mean.copy(), st.residual)


def anchor_point(net, theta, kappa, pi_ref) -> StationaryPoint:
    """Exact steady state at given controls, packaged as a linearization anchor."""
    st = simulate_flow(net, theta, kappa, pi_ref)
    return StationaryPoint(st.phi, st.pi, np.asarray(kappa, float), np.asarray(theta, float),
                           net.extraction_mean.copy(), st.residual)


def forced_on_supplier():
    """Cheap reference supplier plus a dear supplier that must inject at least 2."""
    net = make_network(
        [node(1, injection_max=10.0, cost_linear=1.0, pressure_max=200.0),
         node(2, extraction_mean=4.0, pressure_max=200.0),
         node(3, injection_min=2.0, injection_max=10.0, cost_linear=5.0, pressure_max=200.0)],
        [edge(1, 2, 2.0), edge(3, 2, 1.0)],
    )
    return net, anchor_point(net, [2.0, 0.0, 2.0], [0.0, 0.0], 150.0)


def zero_offset_model(net, point):
    """Zero lower pressure limits and a linearization with gamma1 forced to zero."""
    from gaspolicy.linearization import response_constants, sensitivities
    net = net.replace(pressure_min=np.zeros(net.n_nodes))
    _, g2, g3 = sensitivities(point, net)
    return net, response_constants((np.zeros(net.n_edges), g2, g3), net, anchor=point)


@pytest.fixture(scope="session")
def six_node():
    return load_network(SIX_NODE)


@pytest.fixture(scope="session")
def six_point(six_node):
    return solve_deterministic(six_node)


@pytest.fixture(scope="session")
def six_lin(six_node, six_point):
    return linearize(six_point, six_node)


@pytest.fixture(scope="session")
def six_unc(six_node):
    return uncertainty.from_network(six_node, eps=0.05)


@pytest.fixture(scope="session")
def six_solutions(six_node, six_lin, six_unc):
    """Optimal solutions across the main configurations, keyed by label."""
    configs = {
        "deterministic": dict(z=0.0),
        "cc": dict(),
        "cc-variance": dict(psi_pi=0.1, psi_phi=100.0),
        "cc-injections": dict(mask=policy.INJECTIONS_ONLY, psi_pi=0.01),
        "cc-compressors": dict(mask=policy.INJECTIONS_COMPRESSORS, psi_phi=1.0),
    }
    return {k: policy.optimize(six_node, six_lin, six_unc, **kw) for k, kw in configs.items()}


@pytest.fixture(scope="session")
def three_node():
    return load_network(THREE_NODE)


@pytest.fixture(scope="session")
def three_point(three_node):
    return solve_deterministic(three_node)


@pytest.fixture(scope="session")
def three_lin(three_node, three_point):
    return linearize(three_point, three_node)


@pytest.fixture(scope="session")
def three_cc(three_node, three_lin):
    return policy.optimize(three_node, three_lin, uncertainty.from_network(three_node, eps=0.1))


ACCEPTANCE: list[str] = []


def verdict(label: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
