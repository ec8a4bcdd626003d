"""Out-of-sample checks of optimized policies.

Limit violations are counted on the linearized responses. Feasibility
restoration projects each realized control onto the non-convex steady-state
set, and the worst-case gap between linearized and projected pressures gives
a sample-based error bound.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import beta as beta_dist

from .linearization import LinearizedModel, respond
from .network import GasNetwork
from .policy import PolicySolution
from .steady_state import SteadyStateError, StationaryPoint, project_controls
from .uncertainty import UncertaintyModel, sample


class ValidationError(RuntimeError):
    pass


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(beta_dist.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def sample_complexity(p: float, v: float) -> int:
    """Smallest sample count with ``S >= 1/(p v) - 1``."""
    if not (0 < p < 1 and 0 < v < 1):
        raise ValueError("p and v must lie in (0, 1)")
    bound = 1 / (Fraction(repr(p)) * Fraction(repr(v))) - 1
    return max(1, math.ceil(bound))


@dataclass
class ViolationReport:
    n_samples: int
    joint_frequency: float
    joint_ci: tuple[float, float]
    frequencies: dict[str, float]
    stddev_pi: np.ndarray
    stddev_phi: np.ndarray
    var_pressure: np.ndarray
    flow_reversal: np.ndarray


def realized_controls(sol: PolicySolution, xi: np.ndarray):
    xi = np.atleast_2d(xi)
    return sol.theta + xi @ sol.alpha.T, sol.kappa + xi @ sol.beta.T


def flow_reversal_stats(sol: PolicySolution, lin: LinearizedModel, samples: np.ndarray) -> np.ndarray:
    """Per-edge fraction of samples whose flow direction differs from the nominal one."""
    _, phi = respond(lin, sol.policy(), np.atleast_2d(samples))
    return (np.sign(phi) != np.sign(sol.phi)[None, :]).mean(axis=0)


def evaluate_policies(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, samples: np.ndarray,
                      rtol: float = 1e-9) -> ViolationReport:
    """Count limit violations of the linearized responses over the sample set."""
    xi = np.atleast_2d(np.asarray(samples, dtype=float))
    S = xi.shape[0]
    st = sol.structure
    pi, phi = respond(lin, sol.policy(), xi)
    theta, kappa = realized_controls(sol, xi)
    p_tol = rtol * max(float(net.pressure_max.max(initial=0.0)), 1.0)
    f_tol = rtol * max(float(np.abs(net.extraction_mean).sum()), float(net.injection_max.max(initial=0.0)), 1.0)
    k_tol = rtol * max(float(np.abs(net.kappa_max).max(initial=0.0)), float(np.abs(net.kappa_min).max(initial=0.0)), 1.0)

    checks: dict[str, np.ndarray] = {}
    for n in st.nonref:
        checks[f"pressure_max[{net.nodes[n]}]"] = pi[:, n] > net.pressure_max[n] + p_tol
        checks[f"pressure_min[{net.nodes[n]}]"] = pi[:, n] < net.pressure_min[n] - p_tol
    for l in st.active:
        checks[f"flow_min[{'->'.join(net.edges[l])}]"] = phi[:, l] < -f_tol
    for n in st.suppliers:
        checks[f"injection_max[{net.nodes[n]}]"] = theta[:, n] > net.injection_max[n] + f_tol
        checks[f"injection_min[{net.nodes[n]}]"] = theta[:, n] < net.injection_min[n] - f_tol
    for l in st.active:
        name = "->".join(net.edges[l])
        checks[f"regulation_max[{name}]"] = kappa[:, l] > net.kappa_max[l] + k_tol
        checks[f"regulation_min[{name}]"] = kappa[:, l] < net.kappa_min[l] - k_tol
    joint = np.zeros(S, dtype=bool)
    for hit in checks.values():
        joint |= hit
    k = int(joint.sum())
    rho = np.sqrt(np.maximum(pi, 0.0))
    return ViolationReport(
        n_samples=S,
        joint_frequency=k / S,
        joint_ci=binomial_ci(k, S),
        frequencies={name: float(hit.mean()) for name, hit in checks.items()},
        stddev_pi=pi.std(axis=0),
        stddev_phi=phi.std(axis=0),
        var_pressure=rho.var(axis=0),
        flow_reversal=(np.sign(phi) != np.sign(sol.phi)[None, :]).mean(axis=0),
    )


@dataclass(frozen=True)
class Projection:
    theta: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray
    pi: np.ndarray
    distance: float
    converged: bool
    message: str = ""


def project_realization(net: GasNetwork, theta_t, kappa_t, xi, point: StationaryPoint,
                        pi_ref: float | None = None, max_iter: int = 200) -> Projection:
    """Nearest physically feasible controls for extraction ``mean + xi``.

    Warm-started at the policy output with reference pressure ``pi_ref`` (the
    policy's nominal value, which the linearized responses keep fixed); the
    stationary point serves as fallback start. Pressures do not enter the
    objective, so a feasible start is returned unchanged.
    """
    extraction = np.asarray(point.extraction, dtype=float) + np.asarray(xi, dtype=float)
    anchor_ref = float(point.pi[net.ref])
    pi_ref = anchor_ref if pi_ref is None else float(pi_ref)
    try:
        run = project_controls(net, theta_t, kappa_t, extraction, pi_ref,
                               fallback=(point.theta, point.kappa, anchor_ref), max_iter=max_iter)
    except SteadyStateError as exc:
        nan_n, nan_e = np.full(net.n_nodes, np.nan), np.full(net.n_edges, np.nan)
        return Projection(nan_n, nan_e, nan_e, nan_n, float("nan"), False, str(exc))
    return Projection(run.theta, run.kappa, run.state.phi, run.state.pi, run.objective, True)


@dataclass
class ProjectionSummary:
    p_inj: float
    p_act: float
    distances: np.ndarray
    failures: int
    projections: list = field(default_factory=list, repr=False)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def projection_metrics(sol: PolicySolution, net: GasNetwork, samples: np.ndarray, point: StationaryPoint,
                       workers: int = 1) -> ProjectionSummary:
    """Average control corrections needed to restore non-convex feasibility."""
    xi = np.atleast_2d(samples)
    theta, kappa = realized_controls(sol, xi)
    act = net.active

    def one(s):
        return project_realization(net, theta[s], kappa[s], xi[s], point, sol.pi[net.ref])

    projections = _map(one, range(xi.shape[0]), workers)
    ok = [s for s, pr in enumerate(projections) if pr.converged]
    inj = [np.linalg.norm(theta[s] - projections[s].theta) for s in ok]
    reg = [np.linalg.norm((kappa[s] - projections[s].kappa)[act]) for s in ok]
    dist = np.array([pr.distance for pr in projections])
    return ProjectionSummary(float(np.mean(inj)) if ok else float("nan"), float(np.mean(reg)) if ok else float("nan"),
                             dist, xi.shape[0] - len(ok), projections)


@dataclass(frozen=True)
class ErrorBound:
    node: int
    t_star: float
    s_used: int
    p: float
    v: float
    errors: np.ndarray
    certificate: str


def error_bound(node: int, sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, unc: UncertaintyModel,
                p: float, v: float, point: StationaryPoint, seed: int | None = None, workers: int = 1) -> ErrorBound:
    """Worst sampled gap between linearized and projected squared pressure at ``node``.

    With ``S_used >= 1/(p v) - 1`` samples the bound holds for a fraction at
    least ``1 - p`` of realizations with confidence ``1 - v``.
    """
    S = sample_complexity(p, v)
    xi = sample(unc, S, seed=seed)
    pi_lin, _ = respond(lin, sol.policy(), xi)
    theta, kappa = realized_controls(sol, xi)

    def one(s):
        return project_realization(net, theta[s], kappa[s], xi[s], point, sol.pi[net.ref])

    projections = _map(one, range(S), workers)
    failed = [s for s, pr in enumerate(projections) if not pr.converged]
    if failed:
        raise ValidationError(f"projection failed for samples {failed}; certificate invalid")
    errors = np.array([abs(pi_lin[s, node] - projections[s].pi[node]) for s in range(S)])
    cert = f"P[error <= t*] >= {1 - p:g} with confidence {1 - v:g} from {S} samples"
    return ErrorBound(int(node), float(errors.max()), S, p, v, errors, cert)


@dataclass
class ValidationReport:
    violations: ViolationReport
    projection: ProjectionSummary | None = None
    error_bounds: list = field(default_factory=list)


def validate(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, unc: UncertaintyModel, S: int = 1000,
             seed: int | None = None, point: StationaryPoint | None = None, project: bool = True,
             bound_nodes=(), p: float = 0.1, v: float = 0.1, workers: int = 1) -> ValidationReport:
    xi = sample(unc, S, seed=seed)
    report = ValidationReport(evaluate_policies(sol, lin, net, xi))
    if point is None:
        point = lin.anchor
    if project:
        report.projection = projection_metrics(sol, net, xi, point, workers)
    for n in bound_nodes:
        report.error_bounds.append(error_bound(n, sol, lin, net, unc, p, v, point, seed=seed, workers=workers))
    return report
