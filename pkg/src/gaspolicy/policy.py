"""Chance-constrained affine policies as a second-order cone program.

Controls respond to the forecast error ``xi`` through
``theta(xi) = theta + alpha xi`` and ``kappa(xi) = kappa + beta xi``. Each
limit is enforced with a per-constraint budget through a margin
``z * ||F (row of the response)||``, the expected quadratic cost and the state
standard deviations are epigraphs of rotated and standard cones.

Internally the response rows are contracted with the compact covariance factor
``L`` (``L L' = Sigma``) restricted to the uncertain nodes, so cone sizes scale
with the rank of ``Sigma``. Cone duals are lifted back to node coordinates with
the eigenvector basis so that ``u' F x`` equals the internal pairing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .conic import Affine, ConicProgram
from .linearization import LinearizedModel, response_matrices
from .network import GasNetwork
from .uncertainty import UncertaintyModel

INJECTIONS_ONLY = "injections-only"
INJECTIONS_COMPRESSORS = "injections+compressors"
ALL_ASSETS = "all-assets"
MASKS = (INJECTIONS_ONLY, INJECTIONS_COMPRESSORS, ALL_ASSETS)


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Structure:
    """Index sets shared by the program, the solution and the pricing audit."""

    n_nodes: int
    n_edges: int
    ref: int
    suppliers: np.ndarray
    active: np.ndarray
    responsive: np.ndarray
    uncertain: np.ndarray
    mask: str

    @property
    def nonref(self) -> np.ndarray:
        return np.flatnonzero(np.arange(self.n_nodes) != self.ref)


def structure(net: GasNetwork, unc: UncertaintyModel, mask: str = ALL_ASSETS) -> Structure:
    if mask not in MASKS:
        raise PolicyError(f"unknown policy mask '{mask}'")
    active = np.flatnonzero(net.active)
    if mask == INJECTIONS_ONLY:
        responsive = np.zeros(0, dtype=int)
    elif mask == INJECTIONS_COMPRESSORS:
        responsive = np.flatnonzero(net.compressors)
    else:
        responsive = active
    uncertain = np.flatnonzero(unc.stochastic)
    if net.ref in uncertain:
        raise PolicyError("reference node carries uncertain extraction")
    return Structure(net.n_nodes, net.n_edges, net.ref, np.flatnonzero(net.suppliers), active,
                     responsive, uncertain, mask)


def count_chance_constraints(st: Structure) -> int:
    """Number of limit rows that carry a random term, i.e. share the joint budget."""
    if st.uncertain.size == 0:
        return 0
    return 2 * st.nonref.size + st.active.size + 2 * st.suppliers.size + 2 * st.responsive.size


def _as_vector(value, n: int, name: str) -> np.ndarray:
    v = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if np.any(v < 0):
        raise PolicyError(f"{name} must be non-negative")
    return v


def _empty(n: int) -> Affine:
    return Affine(sp.csr_matrix((0, n)))


def assemble(net: GasNetwork, lin: LinearizedModel, unc: UncertaintyModel, psi_pi=0.0, psi_phi=0.0,
             mask: str = ALL_ASSETS, z: float | None = None) -> ConicProgram:
    """Build the chance-constrained program; ``z`` overrides the safety parameter."""
    N, E = net.n_nodes, net.n_edges
    if lin.n_nodes != N or lin.n_edges != E or unc.n_nodes != N:
        raise PolicyError("dimension mismatch between network, linearization and uncertainty model")
    if np.any(net.cost_quadratic < 0):
        raise PolicyError("quadratic cost coefficients must be non-negative")
    st = structure(net, unc, mask)
    n_cc = count_chance_constraints(st)
    if n_cc != unc.n_constraints:
        unc = unc.split(n_cc)
    z = unc.z_uniform if z is None else float(z)
    if z < 0:
        raise PolicyError("safety parameter must be non-negative")
    psi_pi = _as_vector(psi_pi, N, "psi_pi")
    psi_phi = _as_vector(psi_phi, E, "psi_phi")

    sup, act, bet, K, ref = st.suppliers, st.active, st.responsive, st.uncertain, st.ref
    Ns, Ea, Eb, nK = sup.size, act.size, bet.size, K.size
    LK = unc.basis[K]  # |K| x r
    r = LK.shape[1]
    LKt = LK.T

    A, B = lin.incidence, lin.fuel
    P = lin.pressure_response
    PR = lin.pressure_regulation
    Q = lin.flow_response
    R = lin.regulation_response
    pi0 = np.asarray(lin.anchor.pi, dtype=float)

    flow = max(float(np.abs(unc.mean).sum()), float(net.injection_max.max(initial=0.0)), 1e-12)
    pres = max(float(net.pressure_max.max(initial=0.0)), 1e-12)
    reg = max(float((net.kappa_max - net.kappa_min)[act].max(initial=0.0)), 1e-6 * pres)
    cost = max(float(np.abs(net.cost_linear).max(initial=0.0) * flow), float(net.cost_quadratic.max(initial=0.0) * flow**2), 1e-9)

    prog = ConicProgram()
    prog.add_variable("theta", (Ns,), scale=flow)
    prog.add_variable("kappa", (Ea,), scale=reg)
    prog.add_variable("phi", (E,), scale=flow)
    prog.add_variable("pi", (N,), scale=pres)
    prog.add_variable("alpha", (Ns, nK), scale=1.0)
    prog.add_variable("beta", (Eb, nK), scale=reg / flow)
    prog.add_variable("c_theta", (Ns,), scale=cost)
    prog.add_variable("c_alpha", (Ns,), scale=cost)
    prog.add_variable("s_pi", (N,), scale=0.1 * pres)
    prog.add_variable("s_phi", (E,), scale=0.1 * flow)
    n = prog.n

    theta_s, kappa_a = prog.var("theta"), prog.var("kappa")
    phi, pi = prog.var("phi"), prog.var("pi")
    alpha, beta = prog.var("alpha"), prog.var("beta")
    c_theta, c_alpha = prog.var("c_theta"), prog.var("c_alpha")
    s_pi, s_phi = prog.var("s_pi"), prog.var("s_phi")

    S_sup = np.zeros((N, Ns))
    S_sup[sup, np.arange(Ns)] = 1.0
    S_act = np.zeros((E, Ea))
    S_act[act, np.arange(Ea)] = 1.0
    theta_fixed = np.where(net.suppliers, 0.0, net.injection_min)
    theta_full = S_sup @ theta_s + theta_fixed
    kappa_full = S_act @ kappa_a

    # objective
    c1 = net.cost_linear
    prog.add_objective(c1[sup][None, :] @ theta_s + float(c1 @ theta_fixed))
    prog.add_objective(np.ones((1, Ns)) @ (c_theta + c_alpha))
    prog.add_objective(psi_pi[None, :] @ s_pi + psi_phi[None, :] @ s_phi)

    # equalities
    prog.add_eq("balance", "conservation", A @ phi - theta_full + B @ kappa_full + unc.mean)
    if nK:
        fuel_sign = B[:, bet].sum(axis=0)  # 1'B restricted to responsive edges
        col_alpha = np.kron(np.ones((1, Ns)), np.eye(nK))
        col_beta = np.kron(fuel_sign[None, :], np.eye(nK))
        prog.add_eq("recourse", "recourse-balance", 1.0 - col_alpha @ alpha + col_beta @ beta)
    prog.add_eq("weymouth", "linearized-weymouth",
                phi - lin.flow_offset - lin.flow_pressure @ pi - lin.flow_regulation @ kappa_full)
    prog.add_eq("ref_pin", "reference-pin", pi0[ref] - pi[ref])

    # response rows contracted with the covariance factor, one r-block per node / edge
    if nK and r:
        resp_pi = (np.kron(P[:, sup], LKt) @ alpha) - (np.kron(PR[:, bet], LKt) @ beta) - (P[:, K] @ LK).reshape(-1)
        resp_phi = (np.kron(Q[:, sup], LKt) @ alpha) - (np.kron(R[:, bet], LKt) @ beta) - (Q[:, K] @ LK).reshape(-1)
        ctl_alpha = np.kron(np.eye(Ns), LKt) @ alpha
        ctl_beta = np.kron(np.eye(Eb), LKt) @ beta

        def rows(expr, i):
            return expr[i * r:(i + 1) * r]
    else:
        resp_pi = resp_phi = ctl_alpha = ctl_beta = None

        def rows(expr, i):
            return _empty(n)

    def margin(expr, i):
        return _empty(n) if z == 0.0 or expr is None else rows(expr, i) * z

    for k in range(N):
        prog.add_soc(f"var_pi[{k}]", "variance-pressure", rows(resp_pi, k), s_pi[k])
    for l in range(E):
        prog.add_soc(f"var_phi[{l}]", "variance-flow", rows(resp_phi, l), s_phi[l])
    for k in st.nonref:
        prog.add_soc(f"p_max[{k}]", "pressure-max", margin(resp_pi, k), net.pressure_max[k] - pi[k])
        prog.add_soc(f"p_min[{k}]", "pressure-min", margin(resp_pi, k), pi[k] - net.pressure_min[k])
    for l in act:
        prog.add_soc(f"flow_min[{l}]", "flow-min", margin(resp_phi, l), phi[l])
    c2root = np.sqrt(net.cost_quadratic)
    for i, k in enumerate(sup):
        prog.add_rotated(f"cost_theta[{k}]", "cost-nominal", theta_s[i] * c2root[k], c_theta[i])
        inner = rows(ctl_alpha, i) * c2root[k] if ctl_alpha is not None else _empty(n)
        prog.add_rotated(f"cost_alpha[{k}]", "cost-recourse", inner, c_alpha[i])
        prog.add_soc(f"inj_max[{k}]", "injection-max", margin(ctl_alpha, i), net.injection_max[k] - theta_s[i])
        prog.add_soc(f"inj_min[{k}]", "injection-min", margin(ctl_alpha, i), theta_s[i] - net.injection_min[k])
    pos = {l: j for j, l in enumerate(bet)}
    for i, l in enumerate(act):
        inner = margin(ctl_beta, pos[l]) if l in pos else _empty(n)
        prog.add_soc(f"reg_max[{l}]", "regulation-max", inner, net.kappa_max[l] - kappa_a[i])
        inner = margin(ctl_beta, pos[l]) if l in pos else _empty(n)
        prog.add_soc(f"reg_min[{l}]", "regulation-min", inner, kappa_a[i] - net.kappa_min[l])

    prog.metadata.update(structure=st, uncertainty=unc, z=z, n_chance=n_cc, psi_pi=psi_pi, psi_phi=psi_phi,
                         theta_fixed=theta_fixed, rank=r)
    return prog


@dataclass
class Duals:
    """Multipliers in node/edge coordinates; ``u_*`` rows are cone duals per node or edge."""

    balance: np.ndarray
    recourse: np.ndarray
    weymouth: np.ndarray
    ref_pin: float
    var_pi: np.ndarray
    u_var_pi: np.ndarray
    var_phi: np.ndarray
    u_var_phi: np.ndarray
    p_max: np.ndarray
    u_p_max: np.ndarray
    p_min: np.ndarray
    u_p_min: np.ndarray
    flow_min: np.ndarray
    u_flow_min: np.ndarray
    cost_theta_mu: np.ndarray
    cost_theta_lam: np.ndarray
    u_cost_theta: np.ndarray
    cost_alpha_mu: np.ndarray
    cost_alpha_lam: np.ndarray
    u_cost_alpha: np.ndarray
    inj_max: np.ndarray
    u_inj_max: np.ndarray
    inj_min: np.ndarray
    u_inj_min: np.ndarray
    reg_max: np.ndarray
    u_reg_max: np.ndarray
    reg_min: np.ndarray
    u_reg_min: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "Duals":
        return cls(**{k: (float(v) if k == "ref_pin" else np.asarray(v, dtype=float)) for k, v in data.items()})

    def copy(self) -> "Duals":
        return Duals(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})


@dataclass
class PolicySolution:
    status: str
    objective: float
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    theta: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray
    pi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    c_theta: np.ndarray
    c_alpha: np.ndarray
    s_pi: np.ndarray
    s_phi: np.ndarray
    duals: Duals | None
    structure: Structure
    z: float
    eps_hat: np.ndarray
    psi_pi: np.ndarray
    psi_phi: np.ndarray
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def policy(self):
        """``(pi, phi, alpha, beta)`` as consumed by the response evaluation."""
        return self.pi, self.phi, self.alpha, self.beta

    def to_dict(self) -> dict:
        st = self.structure
        out = {
            "status": self.status,
            "objective": self.objective,
            "gap": self.gap,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "iterations": self.iterations,
            "z": self.z,
            "eps_hat": self.eps_hat.tolist(),
            "psi_pi": self.psi_pi.tolist(),
            "psi_phi": self.psi_phi.tolist(),
            "mask": st.mask,
            "message": self.message,
        }
        for name in ("theta", "kappa", "phi", "pi", "alpha", "beta", "c_theta", "c_alpha", "s_pi", "s_phi"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        out["duals"] = None if self.duals is None else self.duals.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict, st: Structure, unc: UncertaintyModel) -> "PolicySolution":
        arrays = {name: np.asarray(data[name], dtype=float)
                  for name in ("theta", "kappa", "phi", "pi", "alpha", "beta", "c_theta", "c_alpha", "s_pi", "s_phi")}
        duals = None if data.get("duals") is None else Duals.from_dict(data["duals"])
        return cls(status=data["status"], objective=float(data["objective"]), gap=float(data["gap"]),
                   primal_residual=float(data["primal_residual"]), dual_residual=float(data["dual_residual"]),
                   iterations=int(data["iterations"]), duals=duals, structure=st, z=float(data["z"]),
                   eps_hat=np.asarray(data["eps_hat"], dtype=float), psi_pi=np.asarray(data["psi_pi"], dtype=float),
                   psi_phi=np.asarray(data["psi_phi"], dtype=float), message=data.get("message", ""),
                   extra={"uncertainty": unc}, **arrays)


def _lift(u_r: np.ndarray, V: np.ndarray) -> np.ndarray:
    return V @ u_r if u_r.size else np.zeros(V.shape[0])


def solve(prog: ConicProgram, tol: float = 1e-9, max_iter: int = 200) -> PolicySolution:
    """Solve an assembled program and express the results in node/edge coordinates."""
    meta = prog.metadata
    st: Structure = meta["structure"]
    unc: UncertaintyModel = meta["uncertainty"]
    res = conic.solve(prog, tol=tol, max_iter=max_iter)
    N, E = st.n_nodes, st.n_edges
    sup, act, bet, K = st.suppliers, st.active, st.responsive, st.uncertain
    V = unc.eigvecs

    x = res.values
    theta = meta["theta_fixed"].copy()
    kappa = np.zeros(E)
    alpha = np.zeros((N, N))
    beta = np.zeros((E, N))
    c_theta, c_alpha = np.zeros(N), np.zeros(N)
    if res.status in ("optimal", "inaccurate", "iteration_limit", "numerical_error") and res.x is not None and res.x.size:
        theta[sup] = x["theta"]
        kappa[act] = x["kappa"]
        alpha[np.ix_(sup, K)] = x["alpha"]
        beta[np.ix_(bet, K)] = x["beta"]
        other = np.setdiff1d(np.arange(N), K)
        if K.size:
            alpha[:, other] = alpha[:, K].mean(axis=1, keepdims=True)
            beta[:, other] = beta[:, K].mean(axis=1, keepdims=True)
        elif sup.size:
            alpha[sup[0], :] = 1.0
        c_theta[sup] = x["c_theta"]
        c_alpha[sup] = x["c_alpha"]
        phi, pi, s_pi, s_phi = x["phi"], x["pi"], x["s_pi"], x["s_phi"]
    else:
        phi, pi, s_pi, s_phi = np.zeros(E), np.zeros(N), np.zeros(N), np.zeros(E)

    duals = None
    if res.status == "optimal":
        duals = _collect_duals(res, st, V)
    return PolicySolution(
        status=res.status, objective=res.objective, gap=res.gap, primal_residual=res.primal_residual,
        dual_residual=res.dual_residual, iterations=res.iterations, theta=theta, kappa=kappa, phi=phi, pi=pi,
        alpha=alpha, beta=beta, c_theta=c_theta, c_alpha=c_alpha, s_pi=s_pi, s_phi=s_phi, duals=duals,
        structure=st, z=meta["z"], eps_hat=unc.eps_hat, psi_pi=meta["psi_pi"], psi_phi=meta["psi_phi"],
        message=res.message, extra={"uncertainty": unc, "dual_objective": res.dual_objective},
    )


def _collect_duals(res: conic.ConicResult, st: Structure, V: np.ndarray) -> Duals:
    N, E = st.n_nodes, st.n_edges

    def soc(prefix, idx, size):
        lam = np.zeros(size)
        U = np.zeros((size, N))
        for i in idx:
            key = f"{prefix}[{i}]"
            if key not in res.soc_duals:
                raise PolicyError(f"backend returned no dual for '{key}'")
            lam[i], u = res.soc_duals[key]
            U[i] = _lift(u, V)
        return lam, U

    def rot(prefix, idx, lift):
        mu, lam = np.zeros(N), np.zeros(N)
        U = np.zeros((N, N)) if lift else np.zeros(N)
        for i in idx:
            key = f"{prefix}[{i}]"
            if key not in res.rot_duals:
                raise PolicyError(f"backend returned no dual for '{key}'")
            mu[i], lam[i], u = res.rot_duals[key]
            if lift:
                U[i] = _lift(u, V)
            else:
                U[i] = u[0] if u.size else 0.0
        return mu, lam, U

    recourse = np.zeros(N)
    if st.uncertain.size:
        recourse[st.uncertain] = res.eq_duals["recourse"]
    var_pi, u_var_pi = soc("var_pi", range(N), N)
    var_phi, u_var_phi = soc("var_phi", range(E), E)
    p_max, u_p_max = soc("p_max", st.nonref, N)
    p_min, u_p_min = soc("p_min", st.nonref, N)
    flow_min, u_flow_min = soc("flow_min", st.active, E)
    ct_mu, ct_lam, u_ct = rot("cost_theta", st.suppliers, lift=False)
    ca_mu, ca_lam, u_ca = rot("cost_alpha", st.suppliers, lift=True)
    inj_max, u_inj_max = soc("inj_max", st.suppliers, N)
    inj_min, u_inj_min = soc("inj_min", st.suppliers, N)
    reg_max, u_reg_max = soc("reg_max", st.active, E)
    reg_min, u_reg_min = soc("reg_min", st.active, E)
    return Duals(
        balance=res.eq_duals["balance"].copy(), recourse=recourse, weymouth=res.eq_duals["weymouth"].copy(),
        ref_pin=float(res.eq_duals["ref_pin"][0]),
        var_pi=var_pi, u_var_pi=u_var_pi, var_phi=var_phi, u_var_phi=u_var_phi,
        p_max=p_max, u_p_max=u_p_max, p_min=p_min, u_p_min=u_p_min, flow_min=flow_min, u_flow_min=u_flow_min,
        cost_theta_mu=ct_mu, cost_theta_lam=ct_lam, u_cost_theta=u_ct,
        cost_alpha_mu=ca_mu, cost_alpha_lam=ca_lam, u_cost_alpha=u_ca,
        inj_max=inj_max, u_inj_max=u_inj_max, inj_min=inj_min, u_inj_min=u_inj_min,
        reg_max=reg_max, u_reg_max=u_reg_max, reg_min=reg_min, u_reg_min=u_reg_min,
    )


def optimize(net: GasNetwork, lin: LinearizedModel, unc: UncertaintyModel, psi_pi=0.0, psi_phi=0.0,
             mask: str = ALL_ASSETS, z: float | None = None, tol: float = 1e-9) -> PolicySolution:
    return solve(assemble(net, lin, unc, psi_pi, psi_phi, mask, z), tol=tol)


def expected_cost(sol: PolicySolution, unc: UncertaintyModel, c1, c2) -> float:
    """Closed-form mean of the quadratic dispatch cost under the recourse policy."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    theta, alpha = sol.theta, sol.alpha
    return float(c1 @ theta + c2 @ (theta * theta) + np.trace(alpha.T @ (c2[:, None] * alpha) @ unc.cov))


def state_stddev(sol: PolicySolution, lin: LinearizedModel, unc: UncertaintyModel):
    """Standard deviations of squared pressures and flows under the policy."""
    M_pi, M_phi = response_matrices(lin, sol.alpha, sol.beta)
    return np.linalg.norm(M_pi @ unc.factor, axis=1), np.linalg.norm(M_phi @ unc.factor, axis=1)


def dumps_program(prog: ConicProgram) -> str:
    return json.dumps(prog.to_dict(), indent=1, sort_keys=True)


__all__ = [
    "ALL_ASSETS", "INJECTIONS_COMPRESSORS", "INJECTIONS_ONLY", "MASKS", "Duals", "PolicyError",
    "PolicySolution", "Structure", "assemble", "count_chance_constraints", "dumps_program",
    "expected_cost", "optimize", "solve", "state_stddev", "structure",
]
