"""Battery-state Markov chain: arrivals, transition matrix, stationary law."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import poisson

from .errors import ChainError
from .model import Policy

ROW_SUM_TOL = 1e-8


@dataclass(frozen=True)
class BatteryChain:
    psi: np.ndarray
    phi: np.ndarray

    @property
    def capacity(self):
        return self.psi.shape[0] - 1

    def residual(self):
        """Sup-norm of phi - phi @ psi."""
        return float(np.max(np.abs(self.phi - self.phi @ self.psi)))


def clipped_poisson(rho: float, K: int) -> np.ndarray:
    """Pmf of stored units per slot: Poisson(rho) with the tail >= K folded into K."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho!r}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K!r}")
    q = np.empty(K + 1)
    q[:K] = poisson.pmf(np.arange(K), rho)
    q[K] = poisson.sf(K - 1, rho)
    return q


def interval_probs(gamma_g: float, thresholds) -> np.ndarray:
    """Probability that a Rayleigh gain with E{g^2}=gamma_g falls in each interval."""
    mu = np.asarray(thresholds, dtype=float)
    tail = np.exp(-mu * mu / gamma_g)
    return tail[:-1] - tail[1:]


def next_state(i: int, s: int, d: int, K: int) -> int:
    """Battery level after a slot starting at ``i`` that stores ``s`` and spends ``d``."""
    if d > i:
        raise ValueError(f"cannot consume {d} units from battery state {i}")
    if not 0 <= i <= K or s < 0 or d < 0:
        raise ValueError(f"invalid transition arguments i={i}, s={s}, d={d}, K={K}")
    return min(max(i + s - d, 0), K)


def _shift_table(q):
    # row s: distribution of min(s + S, K) for S ~ q
    K = len(q) - 1
    table = np.zeros((K + 1, K + 1))
    for s in range(K + 1):
        table[s, s:K] = q[:K - s]
        table[s, K] = q[K - s:].sum()
    return table


def transition_matrix(policy: Policy, arrivals, pi, pi_hat1) -> np.ndarray:
    """Transition matrix Psi for the given policy and interval probabilities."""
    arrivals = np.asarray(arrivals, dtype=float)
    pi = np.asarray(pi, dtype=float)
    K = len(arrivals) - 1
    if len(pi) != policy.levels:
        raise ValueError(f"{len(pi)} interval probabilities for {policy.levels} levels")
    if not 0.0 <= pi_hat1 <= 1.0:
        raise ValueError(f"transmit probability must lie in [0, 1], got {pi_hat1!r}")
    table = _shift_table(arrivals)
    consumed = policy.consumed_table(K)
    states = np.arange(K + 1)
    psi = (1.0 - pi_hat1) * table
    for l in range(policy.levels):
        psi = psi + pi_hat1 * pi[l] * table[states - consumed[l]]
    return psi


def stationary_closed_form(psi: np.ndarray) -> np.ndarray:
    """Solve -(Psi^T - I - B)^{-1} 1 with B the all-ones matrix."""
    n = psi.shape[0]
    system = psi.T - np.eye(n) - np.ones((n, n))
    try:
        phi = -np.linalg.solve(system, np.ones(n))
    except np.linalg.LinAlgError as exc:
        raise ChainError(f"stationary system is singular: {exc}") from None
    if not np.all(np.isfinite(phi)):
        raise ChainError("stationary solve produced non-finite entries")
    if phi.min() < -1e-9:
        raise ChainError(f"stationary vector has negative entry {phi.min():.3e}")
    phi = np.clip(phi, 0.0, None)
    return phi / phi.sum()


def stationary_power_iteration(psi: np.ndarray, tol=1e-14, max_squarings=64) -> np.ndarray:
    """Stationary vector by repeatedly applying Psi, doubling the step each round.

    Kept independent of :func:`stationary_closed_form` so the two can check
    each other.
    """
    n = psi.shape[0]
    phi = np.full(n, 1.0 / n)
    power = psi.copy()
    for _ in range(max_squarings):
        nxt = phi @ power
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - phi)) < tol:
            return nxt
        phi = nxt
        power = power @ power
        # rounding in the row sums would otherwise compound with every squaring
        power /= power.sum(axis=1, keepdims=True)
    raise ChainError("power iteration did not converge")


def build_chain(policy: Policy, arrivals, pi, pi_hat1) -> BatteryChain:
    """Assemble Psi and its stationary distribution Phi, checking both."""
    psi = transition_matrix(policy, arrivals, pi, pi_hat1)
    rows = psi.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > ROW_SUM_TOL:
        raise ChainError(f"transition rows deviate from 1 by {np.max(np.abs(rows - 1.0)):.3e}")
    phi = stationary_closed_form(psi)
    chain = BatteryChain(psi=psi, phi=phi)
    if chain.residual() > 1e-8:
        raise ChainError(f"stationarity residual {chain.residual():.3e}")
    return chain


def battery_stats(chain_or_phi):
    """(mean level, P(empty), P(full)) under the stationary law."""
    phi = chain_or_phi.phi if isinstance(chain_or_phi, BatteryChain) else np.asarray(chain_or_phi)
    mean_b = float(np.arange(len(phi)) @ phi)
    return mean_b, float(phi[0]), float(phi[-1])


def dump_chain_csv(chain: BatteryChain, directory, prefix="sensor0"):
    """Write ``<prefix>_psi.csv`` and ``<prefix>_phi.csv`` at full precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{prefix}_psi.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in chain.psi:
            writer.writerow([repr(float(v)) for v in row])
    with open(directory / f"{prefix}_phi.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "phi"])
        for k, v in enumerate(chain.phi):
            writer.writerow([k, repr(float(v))])


def mean_consumption_units(policy: Policy, phi, pi) -> float:
    """Expected units spent per transmitting slot, sum_l pi_l sum_k phi_k floor(c_l k)."""
    consumed = policy.consumed_table(len(phi) - 1)
    return float(np.asarray(pi) @ (consumed @ np.asarray(phi)))


def is_valid_distribution(v, tol=1e-12):
    v = np.asarray(v)
    return bool(np.all(v >= -tol) and math.isclose(v.sum(), 1.0, abs_tol=tol))
