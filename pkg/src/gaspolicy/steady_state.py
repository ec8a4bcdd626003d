"""Steady-state gas physics: flow simulation and the deterministic dispatch.

``simulate_flow`` solves conservation plus Weymouth for fixed controls. The
flows are the minimizer of the strictly convex network energy
``sum |phi|^3 / (3 w) - kappa' phi`` subject to conservation, whose optimality
conditions are exactly the Weymouth relation with the multipliers as squared
pressures. Newton's method on that problem is globally convergent with a
backtracking line search.

``solve_deterministic`` runs successive linear programming (SLP) with a trust
region on the controls: at each iterate the physics is solved exactly, the
flow map is linearized, and a conic subproblem with elastic limit penalties
proposes the next controls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import conic
from .conic import Affine, ConicProgram
from .linearization import sensitivities
from .network import GasNetwork, active_incidence, incidence_matrix

NEWTON_TOL = 1e-10
ROUNDOFF_TOL = 1e-9
FEAS_TOL = 1e-7


class SteadyStateError(RuntimeError):
    pass


class ConvergenceError(SteadyStateError):
    pass


class InfeasibleError(SteadyStateError):
    pass


@dataclass(frozen=True)
class FlowState:
    phi: np.ndarray
    pi: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class StationaryPoint:
    """A solution of the steady-state equations used as linearization anchor."""

    phi: np.ndarray
    pi: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    extraction: np.ndarray
    residual_norm: float
    objective: float = float("nan")
    iterations: int = 0
    seed: int = -1

    def to_dict(self, net: GasNetwork | None = None) -> dict:
        out = {
            "phi": self.phi.tolist(),
            "pi": self.pi.tolist(),
            "kappa": self.kappa.tolist(),
            "theta": self.theta.tolist(),
            "extraction": self.extraction.tolist(),
            "residual_norm": self.residual_norm,
            "objective": self.objective,
            "iterations": self.iterations,
            "seed": self.seed,
        }
        if net is not None:
            out["nodes"] = list(net.nodes)
            out["edges"] = [list(e) for e in net.edges]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StationaryPoint":
        arr = {k: np.asarray(data[k], dtype=float) for k in ("phi", "pi", "kappa", "theta", "extraction")}
        return cls(residual_norm=float(data["residual_norm"]), objective=float(data.get("objective", float("nan"))),
                   iterations=int(data.get("iterations", 0)), seed=int(data.get("seed", -1)), **arr)


def dumps_point(point: StationaryPoint, net: GasNetwork | None = None) -> str:
    return json.dumps(point.to_dict(net), indent=1, sort_keys=True)


def save_point(point: StationaryPoint, path, net: GasNetwork | None = None) -> None:
    Path(path).write_text(dumps_point(point, net) + "\n", encoding="utf-8")


def load_point(path) -> StationaryPoint:
    return StationaryPoint.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- physics -----------------------------------------------------------------

def _full_kappa(net: GasNetwork, kappa) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape == (net.n_edges,):
        return kappa
    out = np.zeros(net.n_edges)
    out[net.active] = kappa
    return out


def physics_residual(net: GasNetwork, phi, pi, kappa, theta, extraction=None) -> float:
    """Scaled max-norm of the conservation and Weymouth residuals."""
    A = incidence_matrix(net)
    B = active_incidence(net)
    delta = net.extraction_mean if extraction is None else np.asarray(extraction, dtype=float)
    kappa = _full_kappa(net, kappa)
    d = theta - B @ kappa - delta
    cons = np.abs(A @ phi - d).max(initial=0.0)
    cons_scale = max(np.abs(d).max(initial=0.0), np.abs(phi).max(initial=0.0), 1e-300)
    drop = net.w * (A.T @ pi + kappa)
    wey = np.abs(phi * np.abs(phi) - drop).max(initial=0.0)
    wey_scale = max((phi * phi).max(initial=0.0), np.abs(drop).max(initial=0.0), 1e-300)
    return float(max(cons / cons_scale, wey / wey_scale))


def _pressures(A, w, phi, kappa, ref, pi_ref) -> np.ndarray:
    N = A.shape[0]
    keep = np.arange(N) != ref
    y = phi * np.abs(phi) / w - kappa - A[ref] * pi_ref
    x, *_ = np.linalg.lstsq(w[:, None] * A[keep].T, w * y, rcond=None)
    pi = np.empty(N)
    pi[keep] = x
    pi[ref] = pi_ref
    return pi


def simulate_flow(net: GasNetwork, theta, kappa, pi_ref: float, extraction=None,
                  tol: float = NEWTON_TOL, max_iter: int = 100) -> FlowState:
    """Flows and squared pressures for fixed injections, regulation and reference pressure."""
    A = incidence_matrix(net)
    B = active_incidence(net)
    w = net.w
    theta = np.asarray(theta, dtype=float)
    kappa = _full_kappa(net, kappa)
    delta = net.extraction_mean if extraction is None else np.asarray(extraction, dtype=float)
    d = theta - B @ kappa - delta
    ref = net.ref
    keep = np.arange(net.n_nodes) != ref
    mass = max(np.abs(theta).sum(), np.abs(delta).sum(), np.abs(B @ kappa).sum())
    if abs(d.sum()) > 1e-9 * max(mass, 1e-300):
        raise SteadyStateError(f"mass balance violated: net injection {d.sum():.6g}")

    scale = max(np.abs(d).max(initial=0.0), float(np.sqrt(np.abs(w * kappa)).max(initial=0.0)))
    if scale == 0.0:
        phi = np.zeros(net.n_edges)
        return FlowState(phi, np.full(net.n_nodes, float(pi_ref)), 0.0, 0)
    Ar, dr = A[keep], d[keep]
    phi = Ar.T @ np.linalg.solve(Ar @ Ar.T, dr)

    def energy(f):
        return float(np.sum(np.abs(f) ** 3 / (3.0 * w)) - kappa @ f)

    res = math.inf
    for it in range(1, max_iter + 1):
        mag = np.abs(phi)
        floor = max(1e-6 * mag.mean(), 1e-12 * scale)
        h = 2.0 * np.maximum(mag, floor) / w
        g = phi * mag / w - kappa
        K = (Ar / h) @ Ar.T
        nu = np.linalg.solve(K, -(Ar / h) @ g - (dr - Ar @ phi))
        step = -(g + Ar.T @ nu) / h
        f0, slope = energy(phi), float(g @ step)
        t = 1.0
        while t > 1e-12 and energy(phi + t * step) > f0 + 1e-4 * t * min(slope, 0.0) + 1e-15 * abs(f0):
            t *= 0.5
        phi = phi + t * step
        pi = _pressures(A, w, phi, kappa, ref, pi_ref)
        res = physics_residual(net, phi, pi, kappa, theta, delta)
        # a step at round-off level cannot improve further; accept if already accurate
        stalled = np.abs(t * step).max() <= 1e-14 * max(np.abs(phi).max(), scale)
        if res <= tol or (stalled and res <= ROUNDOFF_TOL):
            return FlowState(phi, pi, res, it)
    raise ConvergenceError(f"Newton flow solve did not converge in {max_iter} iterations (residual {res:.3e})")


# -- successive linear programming ----------------------------------------------

@dataclass
class _Scales:
    flow: float
    pressure: float
    regulation: float


def _scales(net: GasNetwork, extraction) -> _Scales:
    flow = max(np.abs(extraction).sum(), net.injection_max.max(initial=0.0), 1e-12)
    pressure = max(net.pressure_max.max(initial=0.0), 1e-12)
    span = (net.kappa_max - net.kappa_min)[net.active]
    regulation = max(span.max(initial=0.0), 1e-6 * pressure)
    return _Scales(float(flow), float(pressure), float(regulation))


def _violation(net: GasNetwork, phi, pi, sc: _Scales) -> float:
    over = np.maximum(pi - net.pressure_max, 0.0) + np.maximum(net.pressure_min - pi, 0.0)
    back = np.maximum(-phi[net.active], 0.0)
    return float(over.sum() / sc.pressure + back.sum() / sc.flow)


def rebalance(net: GasNetwork, theta, kappa, extraction) -> np.ndarray:
    """Shift supplier injections inside their limits so that supply meets demand exactly."""
    theta = np.clip(np.asarray(theta, dtype=float), net.injection_min, net.injection_max)
    B = active_incidence(net)
    need = float(np.sum(extraction) + np.sum(B @ _full_kappa(net, kappa)) - theta.sum())
    for _ in range(net.n_nodes + 1):
        if need == 0.0:
            break
        room = (net.injection_max - theta) if need > 0 else (theta - net.injection_min)
        room = np.where(net.suppliers, np.maximum(room, 0.0), 0.0)
        total = room.sum()
        if total <= 0.0:
            raise InfeasibleError("injection limits cannot balance demand")
        share = min(1.0, abs(need) / total)
        theta = theta + np.sign(need) * share * room
        theta = np.clip(theta, net.injection_min, net.injection_max)
        need = float(np.sum(extraction) + np.sum(B @ _full_kappa(net, kappa)) - theta.sum())
        if abs(need) <= 1e-15 * max(theta.sum(), 1.0):
            break
    return theta


@dataclass
class SLPResult:
    theta: np.ndarray
    kappa: np.ndarray
    pi_ref: float
    state: FlowState
    objective: float
    violation: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


class _Objective:
    """Either dispatch cost or distance to target controls."""

    def __init__(self, net: GasNetwork, sc: _Scales, target=None):
        self.net = net
        self.target = target
        if target is None:
            c1, c2 = net.cost_linear, net.cost_quadratic
            marginal = np.abs(c1).max(initial=0.0) + 2.0 * c2.max(initial=0.0) * net.injection_max.max(initial=0.0)
            self.scale = max(marginal * sc.flow, 1e-9)
        else:
            self.scale = sc.flow + sc.regulation

    def value(self, theta, kappa) -> float:
        if self.target is None:
            return float(self.net.cost_linear @ theta + self.net.cost_quadratic @ (theta * theta))
        t_theta, t_kappa = self.target
        act = self.net.active
        return float(np.linalg.norm(theta - t_theta) + np.linalg.norm((kappa - t_kappa)[act]))

    def add_to(self, prog: ConicProgram, theta_full: Affine, kappa_full: Affine) -> None:
        net = self.net
        if self.target is None:
            prog.add_objective(_row(net.cost_linear) @ theta_full)
            sup = np.flatnonzero(net.suppliers & (net.cost_quadratic > 0))
            if sup.size:
                prog.add_variable("cost_quad", (sup.size,), scale=self.scale)
                cq = prog.var("cost_quad")
                for i, n in enumerate(sup):
                    inner = theta_full[n] * math.sqrt(net.cost_quadratic[n])
                    prog.add_rotated(f"cost_quad[{n}]", "cost", inner, cq[i])
                prog.add_objective(_row(np.ones(sup.size)) @ cq)
        else:
            t_theta, t_kappa = self.target
            act = np.flatnonzero(net.active)
            prog.add_variable("dist", (1 + (act.size > 0),), scale=self.scale)
            dist = prog.var("dist")
            prog.add_soc("dist_theta", "distance", theta_full - t_theta, dist[0])
            if act.size:
                prog.add_soc("dist_kappa", "distance", kappa_full[act] - t_kappa[act], dist[1])
            prog.add_objective(_row(np.ones(dist.size)) @ dist)


def _row(v) -> np.ndarray:
    return np.asarray(v, dtype=float)[None, :]


def _subproblem(net, extraction, theta, kappa, pi_ref, state, radius, objective: _Objective, sc: _Scales, penalty):
    A = incidence_matrix(net)
    B = active_incidence(net)
    N, E = net.n_nodes, net.n_edges
    act = np.flatnonzero(net.active)
    sup = np.flatnonzero(net.suppliers)
    ref = net.ref
    floor = max(1e-6 * float(np.abs(state.phi).mean()), 1e-9 * sc.flow)

    anchor = SimpleNamespace(phi=state.phi, pi=state.pi, kappa=kappa)
    g1, g2, g3 = sensitivities(anchor, net, floor)

    prog = ConicProgram()
    prog.add_variable("theta", (sup.size,), scale=sc.flow)
    prog.add_variable("kappa", (act.size,), scale=sc.regulation)
    prog.add_variable("phi", (E,), scale=sc.flow)
    prog.add_variable("pi", (N,), scale=sc.pressure)
    prog.add_variable("slack_hi", (N,))
    prog.add_variable("slack_lo", (N,))
    prog.add_variable("slack_flow", (act.size,))

    th_s = prog.var("theta")
    ka = prog.var("kappa")
    phi = prog.var("phi")
    pi = prog.var("pi")
    S_sup = np.zeros((N, sup.size))
    S_sup[sup, np.arange(sup.size)] = 1.0
    fixed_theta = np.where(net.suppliers, 0.0, theta)
    theta_full = S_sup @ th_s + fixed_theta
    S_act = np.zeros((E, act.size))
    S_act[act, np.arange(act.size)] = 1.0
    kappa_full = S_act @ ka

    prog.add_eq("balance", "conservation", A @ phi - theta_full + B @ kappa_full + extraction)
    prog.add_eq("weymouth", "linearized-weymouth", phi - g1 - g2 @ pi - g3 @ kappa_full)

    lo = np.maximum(net.injection_min[sup], theta[sup] - radius["theta"])
    hi = np.minimum(net.injection_max[sup], theta[sup] + radius["theta"])
    if sup.size:
        prog.add_nonneg("theta_box", "box", Affine.vstack([th_s - lo, hi - th_s]))
    if act.size:
        lo = np.maximum(net.kappa_min[act], kappa[act] - radius["kappa"])
        hi = np.minimum(net.kappa_max[act], kappa[act] + radius["kappa"])
        prog.add_nonneg("kappa_box", "box", Affine.vstack([ka - lo, hi - ka]))
        prog.add_nonneg("flow_sign", "elastic", phi[act] + prog.var("slack_flow") * sc.flow)
    lo = max(net.pressure_min[ref], pi_ref - radius["pi_ref"])
    hi = min(net.pressure_max[ref], pi_ref + radius["pi_ref"])
    prog.add_nonneg("ref_box", "box", Affine.vstack([pi[ref] - lo, hi - pi[ref]]))
    prog.add_nonneg("pressure_hi", "elastic", net.pressure_max - pi + prog.var("slack_hi") * sc.pressure)
    prog.add_nonneg("pressure_lo", "elastic", pi - net.pressure_min + prog.var("slack_lo") * sc.pressure)
    slacks = Affine.vstack([prog.var("slack_hi"), prog.var("slack_lo"), prog.var("slack_flow")])
    prog.add_nonneg("slack_sign", "elastic", slacks)
    prog.add_objective(_row(np.full(slacks.size, penalty)) @ slacks)
    objective.add_to(prog, theta_full, kappa_full)
    return prog


def _slp(net: GasNetwork, extraction, theta0, kappa0, pi_ref0, objective: _Objective, sc: _Scales,
         max_iter: int = 200, rel_tol: float = 1e-7, penalty_factor: float = 1e3) -> SLPResult:
    act = net.active
    theta = rebalance(net, theta0, kappa0, extraction)
    kappa = np.clip(_full_kappa(net, kappa0), net.kappa_min, net.kappa_max) * act
    theta = rebalance(net, theta, kappa, extraction)
    ref = net.ref
    pi_ref = float(np.clip(pi_ref0, net.pressure_min[ref], net.pressure_max[ref]))
    state = simulate_flow(net, theta, kappa, pi_ref, extraction)
    penalty = penalty_factor * objective.scale

    def merit(th, ka, st):
        return objective.value(th, ka) + penalty * _violation(net, st.phi, st.pi, sc)

    span_theta = (net.injection_max - net.injection_min)[net.suppliers]
    span_kappa = (net.kappa_max - net.kappa_min)[act]
    span_ref = net.pressure_max[ref] - net.pressure_min[ref]
    radius = {"theta": 0.1 * span_theta, "kappa": 0.1 * span_kappa, "pi_ref": 0.1 * span_ref}
    full = {"theta": span_theta, "kappa": span_kappa, "pi_ref": span_ref}
    m = merit(theta, kappa, state)
    history = [m]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prog = _subproblem(net, extraction, theta, kappa, pi_ref, state, radius, objective, sc, penalty)
        res = conic.solve(prog, tol=1e-10)
        if res.status not in ("optimal", "inaccurate"):
            raise SteadyStateError(f"SLP subproblem failed with status {res.status}")
        vals = res.values
        trial_theta = theta.copy()
        trial_theta[net.suppliers] = vals["theta"]
        trial_kappa = np.zeros(net.n_edges)
        trial_kappa[act] = np.clip(vals["kappa"], net.kappa_min[act], net.kappa_max[act])
        # model value from the subproblem's states, free of slack round-off
        model = objective.value(trial_theta, trial_kappa) + penalty * _violation(net, vals["phi"], vals["pi"], sc)
        pred = m - model
        if pred <= 1e-9 * max(abs(m), objective.scale):
            converged = True
            break
        trial_ref = float(np.clip(vals["pi"][ref], net.pressure_min[ref], net.pressure_max[ref]))
        try:
            trial_theta = rebalance(net, trial_theta, trial_kappa, extraction)
            trial_state = simulate_flow(net, trial_theta, trial_kappa, trial_ref, extraction)
            m_trial = merit(trial_theta, trial_kappa, trial_state)
        except SteadyStateError:
            m_trial = math.inf
        ratio = (m - m_trial) / pred
        if ratio >= 0.1:
            change = abs(m - m_trial)
            theta, kappa, pi_ref, state, m = trial_theta, trial_kappa, trial_ref, trial_state, m_trial
            history.append(m)
            if ratio > 0.75:
                radius = {k: np.minimum(1.5 * radius[k], full[k]) for k in radius}
            if change <= rel_tol * max(abs(m), objective.scale):
                converged = True
                break
        else:
            radius = {k: 0.5 * radius[k] for k in radius}
            sizes = [np.max(radius[k] / np.maximum(full[k], 1e-300), initial=0.0) for k in radius]
            if max(sizes) < 1e-10:
                converged = True
                break
    viol = _violation(net, state.phi, state.pi, sc)
    return SLPResult(theta, kappa, pi_ref, state, objective.value(theta, kappa), viol, it, converged, history)


def _seeds(net: GasNetwork, extraction, kappa0) -> list[np.ndarray]:
    sup = np.flatnonzero(net.suppliers)
    B = active_incidence(net)
    demand = float(np.sum(extraction) + np.sum(B @ kappa0))
    base = net.injection_min.copy()
    span = net.injection_max - net.injection_min
    need = demand - base.sum()
    total = span[sup].sum()
    if need < -1e-12 * max(abs(demand), 1.0) or need > total + 1e-12 * max(abs(demand), 1.0):
        raise InfeasibleError("injection limits cannot meet total extraction")
    frac = 0.0 if total == 0 else min(max(need / total, 0.0), 1.0)
    seeds = [base + frac * span]
    order = sorted(sup, key=lambda n: (net.cost_linear[n], n))
    for first in order[:4]:
        theta = base.copy()
        left = need
        for n in [first] + [k for k in order if k != first]:
            take = min(span[n], max(left, 0.0))
            theta[n] += take
            left -= take
        if not any(np.array_equal(theta, s) for s in seeds):
            seeds.append(theta)
    return seeds


def solve_deterministic(net: GasNetwork, extraction=None, n_starts: int = 5, max_iter: int = 200) -> StationaryPoint:
    """Cost-minimal steady state via multi-start SLP; best local optimum is returned."""
    delta = net.extraction_mean if extraction is None else np.asarray(extraction, dtype=float)
    sc = _scales(net, delta)
    objective = _Objective(net, sc)
    kappa0 = np.clip(np.zeros(net.n_edges), net.kappa_min, net.kappa_max) * net.active
    pi_ref0 = float(net.pressure_max[net.ref])
    best = None
    failures = []
    for k, theta0 in enumerate(_seeds(net, delta, kappa0)[:n_starts]):
        try:
            run = _slp(net, delta, theta0, kappa0, pi_ref0, objective, sc, max_iter=max_iter)
        except SteadyStateError as exc:
            failures.append(f"start {k}: {exc}")
            continue
        if run.violation > FEAS_TOL:
            failures.append(f"start {k}: limits violated by {run.violation:.3e}")
            continue
        if not run.converged:
            failures.append(f"start {k}: iteration cap reached")
            continue
        if best is None or run.objective < best[1].objective:
            best = (k, run)
    if best is None:
        detail = "; ".join(failures)
        if all("violated" in f for f in failures):
            raise InfeasibleError(f"no feasible steady state found ({detail})")
        raise ConvergenceError(f"no start converged ({detail})")
    k, run = best
    st = run.state
    resid = physics_residual(net, st.phi, st.pi, run.kappa, run.theta, delta)
    return StationaryPoint(st.phi, st.pi, run.kappa, run.theta, np.array(delta, dtype=float), resid,
                           run.objective, run.iterations, k)


def project_controls(net: GasNetwork, theta_target, kappa_target, extraction, start_pi_ref: float,
                     fallback=None, max_iter: int = 200) -> SLPResult:
    """Closest physically feasible controls to the targets for the given extraction."""
    sc = _scales(net, extraction)
    objective = _Objective(net, sc, target=(np.asarray(theta_target, dtype=float),
                                            _full_kappa(net, kappa_target)))
    starts = [(theta_target, kappa_target, start_pi_ref)]
    if fallback is not None:
        starts.append(fallback)
    last_exc = None
    for theta0, kappa0, pi0 in starts:
        try:
            run = _slp(net, extraction, theta0, kappa0, pi0, objective, sc, max_iter=max_iter)
        except SteadyStateError as exc:
            last_exc = exc
            continue
        if run.converged and run.violation <= FEAS_TOL:
            return run
        last_exc = ConvergenceError(f"projection ended with violation {run.violation:.3e}")
    raise last_exc if last_exc is not None else ConvergenceError("projection failed")
