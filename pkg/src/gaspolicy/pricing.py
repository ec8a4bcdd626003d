"""Revenue decomposition and market audits from the primal-dual policy solution.

All formulas use node/edge coordinates: ``U`` matrices hold one lifted cone
dual per row, ``F`` is the symmetric covariance factor, ``P`` the
reference-reduced pressure response, ``Q`` the flow response, ``R`` the
regulation response and ``PR = P (B + A gamma3)``.

Stationarity residuals are written for the Lagrangian convention of
:mod:`gaspolicy.conic`; the recourse rows include the limit-cone terms, which
belong there because the limit margins depend on ``alpha`` and ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linearization import LinearizedModel, response_matrices
from .network import GasNetwork
from .policy import PolicyError, PolicySolution
from .uncertainty import UncertaintyModel


@dataclass(frozen=True)
class Streams:
    nominal: np.ndarray
    recourse: np.ndarray
    limits: np.ndarray
    variance: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.nominal + self.recourse + self.limits + self.variance


@dataclass(frozen=True)
class Rent:
    flow_congestion: float
    pressure_congestion: float
    reference_pressure: float
    variance: float

    @property
    def total(self) -> float:
        return self.flow_congestion + self.pressure_congestion + self.reference_pressure + self.variance


@dataclass(frozen=True)
class RevenueReport:
    supplier: Streams
    active: Streams
    consumer: Streams
    rent: Rent
    linearization_surplus: float
    adequacy_gap: float
    identity_residual: float
    scale: float
    supplier_mask: np.ndarray
    active_mask: np.ndarray
    supplier_profit: np.ndarray
    active_profit: np.ndarray


def _need_duals(sol: PolicySolution):
    if sol.duals is None:
        raise PolicyError(f"solution has no duals (status {sol.status})")
    return sol.duals


def revenues(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, unc: UncertaintyModel) -> RevenueReport:
    d = _need_duals(sol)
    z = sol.z
    F = unc.factor
    A, B = lin.incidence, lin.fuel
    P, Q, R, PR = lin.pressure_response, lin.flow_response, lin.regulation_response, lin.pressure_regulation
    g1, g2, g3 = lin.flow_offset, lin.flow_pressure, lin.flow_regulation
    alpha, beta = sol.alpha, sol.beta
    ref = lin.ref

    U_lim_pi = d.u_p_max + d.u_p_min
    # per-node/edge aggregated duals seen through the response matrices
    lim_node = z * (P.T @ U_lim_pi + Q.T @ d.u_flow_min)  # N x N
    var_node = P.T @ d.u_var_pi + Q.T @ d.u_var_phi
    lim_edge = z * (PR.T @ U_lim_pi + R.T @ d.u_flow_min)  # E x N
    var_edge = PR.T @ d.u_var_pi + R.T @ d.u_var_phi

    supplier = Streams(
        nominal=d.balance * sol.theta,
        recourse=alpha @ d.recourse,
        limits=np.einsum("ij,ij->i", lim_node @ F, alpha),
        variance=np.einsum("ij,ij->i", var_node @ F, alpha),
    )
    fuel_sum = B.sum(axis=0)
    active = Streams(
        nominal=(g3.T @ d.weymouth - B.T @ d.balance) * sol.kappa,
        recourse=-fuel_sum * (beta @ d.recourse),
        limits=-np.einsum("ij,ij->i", lim_edge @ F, beta),
        variance=-np.einsum("ij,ij->i", var_edge @ F, beta),
    )
    consumer = Streams(
        nominal=d.balance * unc.mean,
        recourse=d.recourse.copy(),
        limits=np.einsum("ij,ij->i", F, lim_node),
        variance=np.einsum("ij,ij->i", F, var_node),
    )
    node_coef = g2.T @ d.weymouth + d.p_min - d.p_max
    nonref = np.arange(net.n_nodes) != ref
    rent = Rent(
        flow_congestion=float((d.flow_min - d.weymouth - A.T @ d.balance) @ sol.phi),
        pressure_congestion=float(node_coef[nonref] @ sol.pi[nonref] + d.p_max @ net.pressure_max
                                  - d.p_min @ net.pressure_min),
        reference_pressure=float(node_coef[ref] * sol.pi[ref]),
        variance=float(d.var_phi @ sol.s_phi + d.var_pi @ sol.s_pi),
    )
    surplus = float(d.weymouth @ g1)
    sup_mask = np.zeros(net.n_nodes, dtype=bool)
    sup_mask[sol.structure.suppliers] = True
    act_mask = net.active.copy()
    con_total, sup_total, act_total = consumer.total.sum(), supplier.total.sum(), active.total.sum()
    gap = float(con_total - sup_total - act_total)
    scale = float(max(1.0, abs(con_total), abs(sup_total), abs(act_total), abs(rent.total), abs(surplus)))
    supplier_profit = supplier.total - net.cost_linear * sol.theta - sol.c_theta - sol.c_alpha
    return RevenueReport(supplier, active, consumer, rent, surplus, gap, gap - rent.total - surplus, scale,
                         sup_mask, act_mask, np.where(sup_mask, supplier_profit, 0.0),
                         np.where(act_mask, active.total, 0.0))


@dataclass(frozen=True)
class AdequacyCheck:
    holds: bool
    gap: float
    conditions_met: bool
    identity_residual: float


def check_revenue_adequacy(report: RevenueReport, net: GasNetwork, lin: LinearizedModel | None = None,
                           tol: float = 1e-6) -> AdequacyCheck:
    """Consumers pay at least what suppliers and active pipelines receive."""
    offset_zero = lin is None or float(np.abs(lin.flow_offset).max(initial=0.0)) <= 1e-12
    conditions = offset_zero and bool(np.all(net.pressure_min == 0.0))
    return AdequacyCheck(report.adequacy_gap >= -tol * report.scale, report.adequacy_gap, conditions,
                         report.identity_residual)


@dataclass(frozen=True)
class AgentProfit:
    kind: str
    index: int
    name: str
    profit: float
    nonnegative: bool
    conditions_met: bool
    failed_condition: str


def check_cost_recovery(report: RevenueReport, sol: PolicySolution, net: GasNetwork,
                        tol: float = 1e-8) -> list[AgentProfit]:
    out = []
    for n in np.flatnonzero(report.supplier_mask):
        ok = net.injection_min[n] == 0.0
        p = float(report.supplier_profit[n])
        out.append(AgentProfit("supplier", int(n), net.nodes[n], p, p >= -tol * report.scale, ok,
                               "" if ok else "injection_min > 0"))
    for l in np.flatnonzero(report.active_mask):
        kind = net.kinds[l]
        if kind == "compressor":
            ok, why = net.kappa_min[l] == 0.0, "kappa_min != 0 on compressor"
        else:
            ok, why = net.kappa_max[l] == 0.0, "kappa_max != 0 on valve"
        p = float(report.active_profit[l])
        name = "->".join(net.edges[l])
        out.append(AgentProfit(kind, int(l), name, p, p >= -tol * report.scale, ok, "" if ok else why))
    return out


def stationarity(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, unc: UncertaintyModel,
                 psi_pi=None, psi_phi=None) -> dict[str, np.ndarray]:
    """Gradient of the Lagrangian per variable block (zero at a KKT point)."""
    d = _need_duals(sol)
    st = sol.structure
    z = sol.z
    F = unc.factor
    A, B = lin.incidence, lin.fuel
    P, Q, R, PR = lin.pressure_response, lin.flow_response, lin.regulation_response, lin.pressure_regulation
    g2, g3 = lin.flow_pressure, lin.flow_regulation
    psi_pi = sol.psi_pi if psi_pi is None else np.broadcast_to(np.asarray(psi_pi, dtype=float), (net.n_nodes,))
    psi_phi = sol.psi_phi if psi_phi is None else np.broadcast_to(np.asarray(psi_phi, dtype=float), (net.n_edges,))
    sup, act, bet = st.suppliers, st.active, st.responsive
    c2root = np.sqrt(net.cost_quadratic)

    r_theta = (net.cost_linear - c2root * d.u_cost_theta - d.balance + d.inj_max - d.inj_min)[sup]
    r_kappa = (B.T @ d.balance - g3.T @ d.weymouth + d.reg_max - d.reg_min)[act]
    pin = np.zeros(net.n_nodes)
    pin[st.ref] = d.ref_pin
    r_pi = d.p_max - d.p_min - g2.T @ d.weymouth - pin
    r_phi = A.T @ d.balance + d.weymouth - d.flow_min
    r_s = np.concatenate([psi_pi - d.var_pi, psi_phi - d.var_phi])
    r_c = np.concatenate([1.0 - d.cost_theta_mu[sup], 1.0 - d.cost_alpha_mu[sup]])

    U_pi = d.u_var_pi + z * (d.u_p_max + d.u_p_min)
    U_phi = d.u_var_phi + z * d.u_flow_min
    node_terms = P.T @ U_pi + Q.T @ U_phi + z * (d.u_inj_max + d.u_inj_min) + c2root[:, None] * d.u_cost_alpha
    r_alpha = -(d.recourse[None, :] + node_terms @ F)[sup]
    edge_terms = PR.T @ U_pi + R.T @ U_phi - z * (d.u_reg_max + d.u_reg_min)
    r_beta = (B.sum(axis=0)[:, None] * d.recourse[None, :] + edge_terms @ F)[bet]
    return {"theta": r_theta, "kappa": r_kappa, "pi": r_pi, "phi": r_phi, "s": r_s, "c": r_c,
            "alpha": r_alpha.reshape(-1), "beta": r_beta.reshape(-1)}


def dual_feasibility(sol: PolicySolution) -> dict[str, float]:
    """Worst cone-dual infeasibility per family: ``||u|| - lam`` and ``||u||^2 - 2 mu lam``."""
    d = _need_duals(sol)
    st = sol.structure
    out = {}
    pairs = {
        "var_pi": (d.var_pi, d.u_var_pi, np.arange(st.n_nodes)),
        "var_phi": (d.var_phi, d.u_var_phi, np.arange(st.n_edges)),
        "p_max": (d.p_max, d.u_p_max, st.nonref),
        "p_min": (d.p_min, d.u_p_min, st.nonref),
        "flow_min": (d.flow_min, d.u_flow_min, st.active),
        "inj_max": (d.inj_max, d.u_inj_max, st.suppliers),
        "inj_min": (d.inj_min, d.u_inj_min, st.suppliers),
        "reg_max": (d.reg_max, d.u_reg_max, st.active),
        "reg_min": (d.reg_min, d.u_reg_min, st.active),
    }
    for name, (lam, U, idx) in pairs.items():
        norms = np.linalg.norm(U[idx], axis=1) if U.ndim == 2 else np.abs(U[idx])
        worst = np.maximum(norms - lam[idx], -lam[idx])
        out[name] = float(max(worst.max(initial=0.0), 0.0))
    sup = st.suppliers
    for name, mu, lam, U in (("cost_theta", d.cost_theta_mu, d.cost_theta_lam, d.u_cost_theta),
                             ("cost_alpha", d.cost_alpha_mu, d.cost_alpha_lam, d.u_cost_alpha)):
        sq = (U[sup] ** 2).sum(axis=1) if U.ndim == 2 else U[sup] ** 2
        worst = np.maximum.reduce([sq - 2.0 * mu[sup] * lam[sup], -mu[sup], -lam[sup]]) if sup.size else np.zeros(0)
        out[name] = float(max(worst.max(initial=0.0), 0.0))
    return out


def complementary_slackness(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork,
                            unc: UncertaintyModel) -> dict[str, float]:
    """Worst ``lam * (margin - radius)`` per cone family (zero at optimality)."""
    d = _need_duals(sol)
    st = sol.structure
    F, z = unc.factor, sol.z
    M_pi, M_phi = response_matrices(lin, sol.alpha, sol.beta)
    sd_pi = np.linalg.norm(M_pi @ F, axis=1)
    sd_phi = np.linalg.norm(M_phi @ F, axis=1)
    sd_theta = np.linalg.norm(sol.alpha @ F, axis=1)
    sd_kappa = np.linalg.norm(sol.beta @ F, axis=1)
    families = {
        "var_pi": (d.var_pi, sol.s_pi - sd_pi, np.arange(st.n_nodes)),
        "var_phi": (d.var_phi, sol.s_phi - sd_phi, np.arange(st.n_edges)),
        "p_max": (d.p_max, net.pressure_max - sol.pi - z * sd_pi, st.nonref),
        "p_min": (d.p_min, sol.pi - net.pressure_min - z * sd_pi, st.nonref),
        "flow_min": (d.flow_min, sol.phi - z * sd_phi, st.active),
        "inj_max": (d.inj_max, net.injection_max - sol.theta - z * sd_theta, st.suppliers),
        "inj_min": (d.inj_min, sol.theta - net.injection_min - z * sd_theta, st.suppliers),
        "reg_max": (d.reg_max, net.kappa_max - sol.kappa - z * sd_kappa, st.active),
        "reg_min": (d.reg_min, sol.kappa - net.kappa_min - z * sd_kappa, st.active),
    }
    return {name: float(np.abs(lam[idx] * slack[idx]).max(initial=0.0))
            for name, (lam, slack, idx) in families.items()}


def check_stationarity(sol: PolicySolution, lin: LinearizedModel, net: GasNetwork, unc: UncertaintyModel,
                       psi_pi=None, psi_phi=None) -> dict[str, float]:
    """Max residual per stationarity block plus the dual-feasibility families."""
    out = {f"stationarity:{k}": float(np.abs(v).max(initial=0.0))
           for k, v in stationarity(sol, lin, net, unc, psi_pi, psi_phi).items()}
    out.update({f"dual:{k}": v for k, v in dual_feasibility(sol).items()})
    return out


def dual_scale(sol: PolicySolution, net: GasNetwork) -> float:
    """Magnitude used to normalize audit residuals."""
    d = _need_duals(sol)
    vals = [1.0, float(np.abs(net.cost_linear).max(initial=0.0))]
    for v in d.__dict__.values():
        vals.append(float(np.abs(v).max(initial=0.0)) if isinstance(v, np.ndarray) else abs(float(v)))
    return max(vals)


def revenue_rows(report: RevenueReport, net: GasNetwork) -> list[tuple[str, str, str, float]]:
    """Flat ``(agent kind, agent id, stream, value)`` rows, rounded to 1e-6."""
    rows = []

    def money(x) -> float:
        return round(float(x), 6) + 0.0  # no negative zeros in reports

    def add(kind, name, streams: Streams, i):
        for stream in ("nominal", "recourse", "limits", "variance"):
            rows.append((kind, name, stream, money(getattr(streams, stream)[i])))

    for n in np.flatnonzero(report.supplier_mask):
        add("supplier", net.nodes[n], report.supplier, n)
    for l in np.flatnonzero(report.active_mask):
        add(net.kinds[l], "->".join(net.edges[l]), report.active, l)
    for n in range(net.n_nodes):
        add("consumer", net.nodes[n], report.consumer, n)
    rent = report.rent
    for stream in ("flow_congestion", "pressure_congestion", "reference_pressure", "variance"):
        rows.append(("operator", "rent", stream, money(getattr(rent, stream))))
    rows.append(("operator", "linearization_surplus", "surplus", money(report.linearization_surplus)))
    return rows
