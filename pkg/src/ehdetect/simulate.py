"""Slot-level Monte-Carlo simulation of the sensing, battery and fusion loop.

Slots are split into fixed-size blocks. Every block gets its own child
seed and, inside it, separate generator streams for the hypothesis,
observation noise, channel gains, energy arrivals, receiver noise and the
initial battery draw, so results do not depend on how blocks are scheduled.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .battery import build_chain, clipped_poisson, interval_probs
from .model import EnergyModel, NetworkConfig, Policy, derive_local_detector

BLOCK_SLOTS = 100_000
STREAMS = ("hyp", "obs", "gain", "arrival", "noise", "init")


@dataclass
class SimResult:
    n_slots: int
    errors: int
    occupancy: np.ndarray          # (N, K+1) counts of battery level at slot start
    tx_counts: np.ndarray          # (N, 2) transmissions under h=0, h=1
    h_counts: np.ndarray           # (2,) slots under each hypothesis
    fusion: str = "exact"
    meta: dict = field(default_factory=dict)

    @property
    def empirical_pe(self):
        return self.errors / self.n_slots

    @property
    def ci_half_width(self):
        """95% normal-approximation half-width for the error rate."""
        p = self.empirical_pe
        return 1.959963984540054 * math.sqrt(p * (1.0 - p) / self.n_slots)

    @property
    def false_alarm_rates(self):
        return self.tx_counts[:, 0] / max(self.h_counts[0], 1)

    @property
    def detection_rates(self):
        return self.tx_counts[:, 1] / max(self.h_counts[1], 1)

    def occupancy_freq(self):
        return self.occupancy / self.occupancy.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {
            "n_slots": self.n_slots,
            "fusion": self.fusion,
            "empirical_pe": self.empirical_pe,
            "ci_half_width": self.ci_half_width,
            "false_alarm_rates": self.false_alarm_rates.tolist(),
            "detection_rates": self.detection_rates.tolist(),
            "occupancy": self.occupancy.tolist(),
        }

    def merge(self, other: "SimResult"):
        return SimResult(self.n_slots + other.n_slots, self.errors + other.errors,
                         self.occupancy + other.occupancy, self.tx_counts + other.tx_counts,
                         self.h_counts + other.h_counts, self.fusion, self.meta)


# ---------------------------------------------------------------------------
# fusion rules

def _log_normal(y, mean, var):
    return -0.5 * (y - mean) ** 2 / var - 0.5 * np.log(2.0 * np.pi * var)


def fusion_llr_exact(y, gains, amplitudes, detectors, sigma_w2):
    """Mixture log-likelihood ratio summed over sensors (last axis).

    Each sensor's received sample is a two-component Gaussian mixture:
    mean g*alpha with weight pd (or pf) and mean 0 otherwise.
    """
    y = np.asarray(y, dtype=float)
    pd = np.array([d.pd for d in detectors])
    pf = np.array([d.pf for d in detectors])
    var = np.broadcast_to(np.asarray(sigma_w2, dtype=float), y.shape[-1:])
    on = _log_normal(y, np.asarray(gains) * np.asarray(amplitudes), var)
    off = _log_normal(y, 0.0, var)
    num = np.logaddexp(np.log(pd) + on, np.log1p(-pd) + off)
    den = np.logaddexp(np.log(pf) + on, np.log1p(-pf) + off)
    return np.sum(num - den, axis=-1)


def _moment_arrays(gains, amplitudes, detectors, sigma_w2):
    ga = np.asarray(gains) * np.asarray(amplitudes)
    pd = np.array([d.pd for d in detectors])
    pf = np.array([d.pf for d in detectors])
    m0, m1 = ga * pf, ga * pd
    v0 = ga * ga * pf * (1.0 - pf) + sigma_w2
    v1 = ga * ga * pd * (1.0 - pd) + sigma_w2
    return m0, m1, v0, v1


def fusion_statistic_approx(y, gains, amplitudes, detectors, sigma_w2, priors):
    """Gaussian-approximation rule: returns (statistic, threshold, decision).

    The statistic sums z_n = (y-m0)^2/var0 - (y-m1)^2/var1 and is compared
    with 2 (log(Pi0/Pi1) - R), R = 1/2 sum log(var0/var1).
    """
    y = np.asarray(y, dtype=float)
    m0, m1, v0, v1 = (np.broadcast_to(v, y.shape)
                      for v in _moment_arrays(gains, amplitudes, detectors, sigma_w2))
    z = np.sum((y - m0) ** 2 / v0 - (y - m1) ** 2 / v1, axis=-1)
    R = 0.5 * np.sum(np.log(v0 / v1), axis=-1)
    tau_p = 2.0 * (math.log(priors[0] / priors[1]) - R)
    return z, tau_p, (z > tau_p).astype(np.int8)


# ---------------------------------------------------------------------------
# battery recursion

def _battery_path(B0, transmit, level, arrivals, table, K):
    """Battery level at each slot start plus units consumed and would-be units."""
    T = len(transmit)
    before = np.empty(T, dtype=np.int64)
    would = np.empty(T, dtype=np.int64)
    tx = transmit.tolist()
    lv = level.tolist()
    s_in = arrivals.tolist()
    rows = table.tolist()
    b = int(B0)
    for t in range(T):
        before[t] = b
        u = rows[lv[t]][b]
        would[t] = u
        if tx[t]:
            b -= u
        b += s_in[t]
        if b > K:
            b = K
    used = np.where(transmit, would, 0)
    return before, used, would


@dataclass(frozen=True)
class _Block:
    network: NetworkConfig
    policies: tuple
    phis: tuple
    n_slots: int
    seed_seq: np.random.SeedSequence
    fusion: str
    cold_start: bool
    keep_trace: int


def _run_block(blk: _Block):
    net = blk.network
    N = net.n_sensors
    K = net.energy.capacity_K
    unit = net.energy.unit_power
    children = blk.seed_seq.spawn(len(STREAMS))
    rng = {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}
    burn = 10 * K if blk.cold_start else 0
    T = blk.n_slots + burn

    h = (rng["hyp"].random(T) < net.priors[1]).astype(np.int8)
    dets = [derive_local_detector(s) for s in net.sensors]
    obs = np.empty((T, N))
    llr = np.empty((T, N))
    gain = np.empty((T, N))
    level = np.empty((T, N), dtype=np.int64)
    before = np.empty((T, N), dtype=np.int64)
    used = np.empty((T, N), dtype=np.int64)
    would = np.empty((T, N), dtype=np.int64)
    transmit = np.empty((T, N), dtype=bool)
    for n, (s, pol, det) in enumerate(zip(net.sensors, blk.policies, dets)):
        sv = math.sqrt(s.sigma_v2)
        obs[:, n] = s.signal_A * h + sv * rng["obs"].standard_normal(T)
        llr[:, n] = (s.signal_A * obs[:, n] - 0.5 * s.signal_A ** 2) / s.sigma_v2
        transmit[:, n] = llr[:, n] >= det.theta
        gain[:, n] = np.sqrt(s.gamma_g * rng["gain"].standard_exponential(T))
        level[:, n] = np.searchsorted(np.asarray(pol.thresholds), gain[:, n], side="right") - 1
        harvest = np.minimum(rng["arrival"].poisson(net.energy.rho, T), K)
        if blk.cold_start:
            B0 = 0
        else:
            B0 = int(rng["init"].choice(K + 1, p=blk.phis[n]))
        before[:, n], used[:, n], would[:, n] = _battery_path(
            B0, transmit[:, n], level[:, n], harvest, pol.consumed_table(K), K)

    sigma_w2 = np.array([s.sigma_w2 for s in net.sensors])
    amp_tilde = np.sqrt(would * unit)
    amp = np.where(transmit, amp_tilde, 0.0)
    y = gain * amp + np.sqrt(sigma_w2) * rng["noise"].standard_normal((T, N))
    tau = math.log(net.priors[0] / net.priors[1])
    if blk.fusion == "exact":
        delta = fusion_llr_exact(y, gain, amp_tilde, dets, sigma_w2)
        decision = (delta > tau).astype(np.int8)
    elif blk.fusion == "clt-approx":
        delta, _, decision = fusion_statistic_approx(y, gain, amp_tilde, dets, sigma_w2,
                                                     net.priors)
    else:
        raise ValueError(f"unknown fusion rule {blk.fusion!r}")

    keep = slice(burn, T)
    hk = h[keep]
    occ = np.stack([np.bincount(before[keep, n], minlength=K + 1) for n in range(N)])
    tx = np.stack([[np.sum(transmit[keep, n] & (hk == 0)), np.sum(transmit[keep, n] & (hk == 1))]
                   for n in range(N)])
    res = SimResult(blk.n_slots, int(np.sum(decision[keep] != hk)), occ, tx,
                    np.bincount(hk, minlength=2), blk.fusion)
    trace = None
    if blk.keep_trace:
        m = min(blk.keep_trace, blk.n_slots)
        sl = slice(burn, burn + m)
        trace = dict(h=h[sl], obs=obs[sl], llr=llr[sl], gain=gain[sl], level=level[sl],
                     before=before[sl], used=used[sl], amp=amp[sl], y=y[sl],
                     delta=delta[sl], decision=decision[sl])
    return res, trace


def _stationary_laws(network, policies):
    arrivals = clipped_poisson(network.energy.rho, network.energy.capacity_K)
    phis = []
    for s, pol in zip(network.sensors, policies):
        det = derive_local_detector(s)
        pi = interval_probs(s.gamma_g, pol.thresholds)
        phis.append(build_chain(pol, arrivals, pi, det.transmit_prob(network.priors)).phi)
    return tuple(phis)


def run_monte_carlo(network: NetworkConfig, policies, n_slots, seed, fusion="exact",
                    workers=1, cold_start=False, block_slots=BLOCK_SLOTS, trace_path=None,
                    trace_cap=1000) -> SimResult:
    """Simulate ``n_slots`` slots and count fusion-center errors.

    Batteries start from the stationary law at each block (or empty with a
    burn-in of 10*K discarded slots when ``cold_start``). The FC is given the
    amplitude each sensor would use in its current state. Output does not
    depend on ``workers``.
    """
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    policies = tuple(policies)
    if len(policies) != network.n_sensors:
        raise ValueError(f"{len(policies)} policies for {network.n_sensors} sensors")
    phis = _stationary_laws(network, policies)
    sizes = [block_slots] * (n_slots // block_slots)
    if n_slots % block_slots:
        sizes.append(n_slots % block_slots)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    keep = trace_cap if trace_path is not None else 0
    blocks = [_Block(network, policies, phis, sz, sq, fusion, cold_start, keep if i == 0 else 0)
              for i, (sz, sq) in enumerate(zip(sizes, seqs))]
    if workers and workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_block, blocks))
    else:
        outs = [_run_block(b) for b in blocks]
    total = outs[0][0]
    for res, _ in outs[1:]:
        total = total.merge(res)
    if trace_path is not None:
        write_trace(trace_path, outs[0][1], network.energy)
    return total


def write_trace(path, trace, energy: EnergyModel):
    """One CSV row per slot; per-sensor columns carry a ``_<n>`` suffix."""
    N = trace["obs"].shape[1]
    per = ("observation", "llr", "gain", "interval", "battery_before", "consumed_units",
           "amplitude", "received_y")
    keys = ("obs", "llr", "gain", "level", "before", "used", "amp", "y")
    header = ["slot", "hypothesis"] + [f"{c}_{n}" for n in range(N) for c in per] \
        + ["fusion_llr", "decision"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(len(trace["h"])):
            row = [t, int(trace["h"][t])]
            for n in range(N):
                for k in keys:
                    v = trace[k][t, n]
                    row.append(int(v) if k in ("level", "before", "used") else repr(float(v)))
            row += [repr(float(trace["delta"][t])), int(trace["decision"][t])]
            w.writerow(row)


# ---------------------------------------------------------------------------
# battery-only cross-check

def simulate_battery(policy: Policy, energy: EnergyModel, gamma_g, pi_hat1, n_slots, seed,
                     B0=None):
    """Occupancy frequencies of the battery when the sensor transmits w.p. ``pi_hat1``."""
    K = energy.capacity_K
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    transmit = streams[0].random(n_slots) < pi_hat1
    g = np.sqrt(gamma_g * streams[1].standard_exponential(n_slots))
    level = np.searchsorted(np.asarray(policy.thresholds), g, side="right") - 1
    harvest = np.minimum(streams[2].poisson(energy.rho, n_slots), K)
    if B0 is None:
        B0 = int(streams[3].integers(K + 1))
    before, _, _ = _battery_path(B0, transmit, level, harvest, policy.consumed_table(K), K)
    return np.bincount(before, minlength=K + 1) / n_slots


def empirical_battery_check(network: NetworkConfig, policy: Policy, n_slots, seed,
                            pi_hat1=None, sensor=0):
    """Sup-norm gap between simulated occupancy and the chain's stationary law."""
    s = network.sensors[sensor]
    if pi_hat1 is None:
        pi_hat1 = derive_local_detector(s).transmit_prob(network.priors)
    arrivals = clipped_poisson(network.energy.rho, network.energy.capacity_K)
    chain = build_chain(policy, arrivals, interval_probs(s.gamma_g, policy.thresholds), pi_hat1)
    freq = simulate_battery(policy, network.energy, s.gamma_g, pi_hat1, n_slots, seed,
                            B0=int(np.argmax(chain.phi)))
    return float(np.max(np.abs(freq - chain.phi)))
