"""First-order model of the Weymouth equation and the policy response constants.

Around an anchor ``(phi0, pi0, kappa0)`` the Weymouth residual
``phi*|phi| - w*(A' pi + kappa)`` is linearized into

    phi = gamma1 + gamma2 @ pi + gamma3 @ kappa

with ``gamma2 = diag(w / 2|phi0|) A'`` and ``gamma3 = diag(w / 2|phi0|)``.
Nodal aggregates and the reference-reduced inverse then give the affine
responses of pressures and flows to a forecast error ``xi`` under the
recourse policies ``theta + alpha xi`` and ``kappa + beta xi``::

    pi(xi)  = pi  + P (alpha - G3 beta - I) xi
    phi(xi) = phi + (Q (alpha - I) - R beta) xi

where ``G2 = A gamma2``, ``G3 = B + A gamma3``, ``P`` is the inverse of ``G2``
with the reference row and column removed (and zero-padded back), ``Q = gamma2 P``
and ``R = gamma2 P G3 - gamma3``. The minus sign in front of ``R`` is the one
for which the linearized Weymouth relation holds for every ``xi``; see
``test_linearization.py::test_linearized_weymouth_holds_along_responses``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .network import GasNetwork, active_incidence, incidence_matrix

FLOW_FLOOR_REL = 1e-6


class LinearizationError(ValueError):
    pass


class DegenerateFlowError(LinearizationError):
    def __init__(self, edges):
        self.edges = list(edges)
        super().__init__(f"zero flow on edges {self.edges} cannot be regularized (all flows vanish)")


def weymouth_residual(net: GasNetwork, phi, pi, kappa) -> np.ndarray:
    A = incidence_matrix(net)
    phi = np.asarray(phi, dtype=float)
    return phi * np.abs(phi) - net.w * (A.T @ np.asarray(pi, dtype=float) + np.asarray(kappa, dtype=float))


def regularized_magnitude(phi, floor: float | None = None) -> np.ndarray:
    """``|phi|`` clamped from below at ``1e-6 * mean|phi|`` (or an explicit floor)."""
    mag = np.abs(np.asarray(phi, dtype=float))
    if floor is None:
        floor = FLOW_FLOOR_REL * float(mag.mean()) if mag.size else 0.0
    if floor <= 0.0:
        bad = np.flatnonzero(mag == 0.0)
        if bad.size:
            raise DegenerateFlowError(bad.tolist())
        return mag
    return np.maximum(mag, floor)


def weymouth_jacobians(point, net: GasNetwork, floor: float | None = None):
    """Jacobians of the Weymouth residual in flow, pressure and regulation."""
    A = incidence_matrix(net)
    mag = regularized_magnitude(point.phi, floor)
    J_phi = np.diag(2.0 * mag)
    J_pi = -(net.w[:, None] * A.T)
    J_kappa = -np.diag(net.w)
    return J_phi, J_pi, J_kappa


def sensitivities(point, net: GasNetwork, floor: float | None = None):
    """Return ``(gamma1, gamma2, gamma3)`` of the linearized flow map."""
    J_phi, J_pi, J_kappa = weymouth_jacobians(point, net, floor)
    inv = 1.0 / np.diag(J_phi)
    gamma2 = -inv[:, None] * J_pi
    gamma3 = -inv[:, None] * J_kappa
    phi0 = np.asarray(point.phi, dtype=float)
    gamma1 = inv * (J_pi @ point.pi + J_kappa @ point.kappa) + phi0
    return gamma1, gamma2, gamma3


@dataclass(frozen=True)
class LinearizedModel:
    """Linearized flow map and the response constants built from it.

    Attribute names map to the usual notation as follows: ``flow_offset`` is
    gamma1, ``flow_pressure`` gamma2, ``flow_regulation`` gamma3,
    ``nodal_pressure`` A gamma2, ``nodal_regulation`` B + A gamma3,
    ``pressure_response`` the reference-reduced inverse of ``nodal_pressure``,
    ``flow_response`` gamma2 times that inverse and ``regulation_response``
    ``flow_response @ nodal_regulation - flow_regulation``.
    """

    flow_offset: np.ndarray
    flow_pressure: np.ndarray
    flow_regulation: np.ndarray
    nodal_pressure: np.ndarray
    nodal_regulation: np.ndarray
    pressure_response: np.ndarray
    flow_response: np.ndarray
    regulation_response: np.ndarray
    incidence: np.ndarray
    fuel: np.ndarray
    ref: int
    anchor: object = None

    @property
    def n_nodes(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_edges(self) -> int:
        return self.incidence.shape[1]

    @property
    def pressure_regulation(self) -> np.ndarray:
        """``pressure_response @ nodal_regulation``: pressure shift per unit of regulation."""
        return self.pressure_response @ self.nodal_regulation

    def flows(self, pi, kappa) -> np.ndarray:
        return self.flow_offset + self.flow_pressure @ pi + self.flow_regulation @ kappa


def response_constants(gammas, net: GasNetwork, anchor=None) -> LinearizedModel:
    gamma1, gamma2, gamma3 = (np.asarray(g, dtype=float) for g in gammas)
    A = incidence_matrix(net)
    B = active_incidence(net)
    N, r = net.n_nodes, net.ref
    G2 = A @ gamma2
    G3 = B + A @ gamma3
    keep = np.flatnonzero(np.arange(N) != r)
    P = np.zeros((N, N))
    if keep.size:
        try:
            lu = sla.lu_factor(G2[np.ix_(keep, keep)], check_finite=True)
        except (ValueError, sla.LinAlgError) as exc:
            raise LinearizationError(f"reduced nodal pressure matrix is singular (reference node {net.reference_node})") from exc
        diag = np.abs(np.diag(lu[0]))
        if diag.min() <= 1e-14 * max(diag.max(), 1e-300):
            raise LinearizationError(f"reduced nodal pressure matrix is singular (reference node {net.reference_node})")
        P[np.ix_(keep, keep)] = sla.lu_solve(lu, np.eye(keep.size))
    Q = gamma2 @ P
    R = Q @ G3 - gamma3
    return LinearizedModel(gamma1, gamma2, gamma3, G2, G3, P, Q, R, A, B, r, anchor)


def linearize(point, net: GasNetwork, floor: float | None = None) -> LinearizedModel:
    return response_constants(sensitivities(point, net, floor), net, anchor=point)


def response_matrices(lin: LinearizedModel, alpha, beta):
    """Pressure and flow responses to ``xi`` under the given recourse matrices."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    eye = np.eye(lin.n_nodes)
    M_pi = lin.pressure_response @ (alpha - lin.nodal_regulation @ beta - eye)
    M_phi = lin.flow_response @ (alpha - eye) - lin.regulation_response @ beta
    return M_pi, M_phi


def respond(lin: LinearizedModel, policy, xi):
    """Random pressures and flows for error(s) ``xi`` of shape ``(N,)`` or ``(S, N)``."""
    pi, phi, alpha, beta = policy
    M_pi, M_phi = response_matrices(lin, alpha, beta)
    xi = np.asarray(xi, dtype=float)
    return np.asarray(pi) + xi @ M_pi.T, np.asarray(phi) + xi @ M_phi.T


def dumps_model(lin: LinearizedModel) -> str:
    """All coefficient matrices as JSON, for diffing against other implementations."""
    fields = ("flow_offset", "flow_pressure", "flow_regulation", "nodal_pressure", "nodal_regulation",
              "pressure_response", "flow_response", "regulation_response")
    data = {name: np.asarray(getattr(lin, name)).tolist() for name in fields}
    data["ref"] = lin.ref
    return json.dumps(data, indent=1)
