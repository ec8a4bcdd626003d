"""Forecast-error model: covariance factor, violation budgets and sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .network import GasNetwork

GAUSSIAN = "gaussian"
DISTRIBUTION_FREE = "distribution-free"
TAGS = (GAUSSIAN, DISTRIBUTION_FREE)
BLOCK = 1024


class UncertaintyError(ValueError):
    pass


def safety_parameter(eps_hat, tag: str = GAUSSIAN):
    """Margin multiplier ``z`` for a per-constraint violation budget."""
    eps_hat = np.asarray(eps_hat, dtype=float)
    if np.any((eps_hat <= 0) | (eps_hat >= 1)):
        raise UncertaintyError("per-constraint budgets must lie in (0, 1)")
    if tag == GAUSSIAN:
        return norm.ppf(1.0 - eps_hat)
    if tag == DISTRIBUTION_FREE:
        return np.sqrt((1.0 - eps_hat) / eps_hat)
    raise UncertaintyError(f"unknown distribution tag '{tag}'")


def factorize(cov: np.ndarray):
    """Symmetric square root and compact factor of a PSD matrix.

    Returns ``(F, L, V)`` with ``F = F' ``, ``F F' = cov``, ``L = V diag(sqrt(lam))``
    over the strictly positive eigenvalues, so that ``L L' = cov`` and
    ``F = V L'``.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise UncertaintyError("covariance must be square")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(np.abs(cov).max(initial=0.0), 1e-300)):
        raise UncertaintyError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    top = max(float(np.abs(lam).max(initial=0.0)), 0.0)
    if lam.size and lam.min() < -1e-10 * max(top, 1e-300):
        raise UncertaintyError(f"covariance is not positive semidefinite (eigenvalue {lam.min():.3e})")
    keep = lam > 1e-12 * top if top > 0 else np.zeros(lam.size, dtype=bool)
    V = vec[:, keep]
    L = V * np.sqrt(lam[keep])
    F = L @ V.T
    return 0.5 * (F + F.T), L, V


@dataclass(frozen=True)
class UncertaintyModel:
    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    basis: np.ndarray
    eigvecs: np.ndarray
    eps: float
    eps_hat: np.ndarray
    z: np.ndarray
    tag: str = GAUSSIAN
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return self.mean.size

    @property
    def n_constraints(self) -> int:
        return int(self.eps_hat.size)

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    @property
    def stochastic(self) -> np.ndarray:
        return np.abs(self.basis).max(axis=1, initial=0.0) > 0

    @property
    def z_uniform(self) -> float:
        """The common safety parameter of a uniform split (0 when nothing is uncertain)."""
        if self.z.size == 0:
            return 0.0
        if not np.allclose(self.z, self.z[0]):
            raise UncertaintyError("budgets are not uniform")
        return float(self.z[0])

    def split(self, n_constraints: int) -> "UncertaintyModel":
        eps_hat, z = _budgets(self.eps, n_constraints, self.tag)
        return replace(self, eps_hat=eps_hat, z=z)

    def with_seed(self, seed: int) -> "UncertaintyModel":
        return replace(self, seed=int(seed))


def _budgets(eps: float, n: int, tag: str):
    if not 0.0 < eps < 1.0:
        raise UncertaintyError(f"violation budget must lie in (0, 1), got {eps}")
    if n < 0:
        raise UncertaintyError("constraint count must be non-negative")
    eps_hat = np.full(n, eps / n) if n else np.zeros(0)
    z = safety_parameter(eps_hat, tag) if n else np.zeros(0)
    return eps_hat, z


def build(mean, stddev=None, cov=None, eps: float = 0.05, n_constraints: int = 1,
          tag: str = GAUSSIAN, correlation=None, seed: int = 0) -> UncertaintyModel:
    """Uncertainty model from per-node stddevs (plus correlation) or a full covariance."""
    if tag not in TAGS:
        raise UncertaintyError(f"unknown distribution tag '{tag}'")
    mean = np.asarray(mean, dtype=float)
    N = mean.size
    if (stddev is None) == (cov is None):
        raise UncertaintyError("give exactly one of stddev or cov")
    if cov is None:
        sd = np.asarray(stddev, dtype=float)
        if sd.shape != (N,) or np.any(sd < 0):
            raise UncertaintyError("stddev must be a non-negative vector matching the mean")
        C = np.eye(N) if correlation is None else np.asarray(correlation, dtype=float)
        cov = sd[:, None] * C * sd[None, :]
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (N, N):
        raise UncertaintyError("covariance shape does not match the mean")
    F, L, V = factorize(cov)
    eps_hat, z = _budgets(eps, n_constraints, tag)
    return UncertaintyModel(mean, cov, F, L, V, float(eps), eps_hat, z, tag, int(seed))


def from_network(net: GasNetwork, eps: float = 0.05, tag: str = GAUSSIAN, seed: int = 0,
                 n_constraints: int = 1) -> UncertaintyModel:
    return build(net.extraction_mean, stddev=net.extraction_stddev, eps=eps, n_constraints=n_constraints,
                 tag=tag, correlation=net.correlation, seed=seed)


def _block(seed: int, index: int, N: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(index), 0]))
    return gen.standard_normal((BLOCK, N))


def standard_normals(seed: int, S: int, N: int, start: int = 0) -> np.ndarray:
    """Rows ``start .. start+S-1`` of a counter-addressed stream of N-dim standard normals."""
    if S < 0:
        raise UncertaintyError("sample count must be non-negative")
    out = np.empty((S, N))
    pos = 0
    while pos < S:
        s = start + pos
        b, off = divmod(s, BLOCK)
        chunk = _block(seed, b, N)[off:off + S - pos]
        out[pos:pos + chunk.shape[0]] = chunk
        pos += chunk.shape[0]
    return out


def sample(model: UncertaintyModel, S: int, seed: int | None = None, start: int = 0) -> np.ndarray:
    """``S`` forecast errors ``F eta_s``; sample ``s`` depends only on ``(seed, s)``."""
    if S < 1:
        raise UncertaintyError("need at least one sample")
    seed = model.seed if seed is None else seed
    eta = standard_normals(seed, S, model.n_nodes, start)
    return eta @ model.factor.T
