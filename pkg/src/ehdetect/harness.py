"""Experiment plumbing behind the command line: solve, sweep, simulate, validate.

Every command returns plain data (dicts / rows) so it can be tested without
going through argparse. Floats are written with ``repr`` and wall-clock
times only appear when asked for, which keeps reruns byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .battery import (ROW_SUM_TOL, BatteryChain, build_chain, clipped_poisson, dump_chain_csv,
                      interval_probs, stationary_closed_form, stationary_power_iteration)
from .errors import ChainError, ConfigError, InfeasibleError, NumericalError
from .metrics import (analytic_error_prob, avg_j_interval, j_div_pointwise, moment_match,
                      z_moments, z_quadratic)
from .model import (NetworkConfig, Policy, amplitude_for_snr, config_from_dict,
                    derive_local_detector, policies_from_config)
from .optimize import METHODS, Problem, solve_p1
from .simulate import empirical_battery_check, run_monte_carlo

CSV_HEADER = ("variable", "value", "method", "objective", "avg_power_watts", "analytic_pe",
              "empirical_pe", "ci_half_width", "seed", "wall_time", "error")
SWEEP_VARIABLES = ("P0", "K", "rho", "snr_s", "L", "N")
ANALYTIC_DRAWS = 100_000


def read_config(path):
    """Parse a YAML config file into (raw mapping, NetworkConfig)."""
    import yaml

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return data, config_from_dict(data)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    methods: tuple = ("hybrid-moe",)
    replications: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError("sweep.variable", f"must be one of {', '.join(SWEEP_VARIABLES)}, "
                                                f"got {self.variable!r}")
        if not self.values:
            raise ConfigError("sweep.values", "must not be empty")
        diffs = np.diff(np.asarray(self.values, dtype=float))
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ConfigError("sweep.values", "must be strictly monotone")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("sweep.methods", f"unknown method {m!r}")
        if self.replications < 1:
            raise ConfigError("sweep.replications", "must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(d["variable"], tuple(d["values"]), tuple(d.get("methods", ("hybrid-moe",))),
                   int(d.get("replications", 1)))


@dataclass
class SweepRow:
    variable: str
    value: float
    method: str
    objective: float | None = None
    avg_power_watts: float | None = None
    analytic_pe: float | None = None
    empirical_pe: float | None = None
    ci_half_width: float | None = None
    seed: int = 0
    wall_time: float | None = None
    error: str = ""

    def as_list(self, timing=False):
        vals = [self.variable, self.value, self.method, self.objective, self.avg_power_watts,
                self.analytic_pe, self.empirical_pe, self.ci_half_width, self.seed,
                self.wall_time if timing else None, self.error]
        return [_fmt(v) for v in vals]


def apply_variable(network: NetworkConfig, variable: str, value) -> NetworkConfig:
    """Copy of ``network`` with one swept quantity replaced."""
    if variable == "P0":
        return network.with_changes(power_budget_P0=float(value))
    if variable == "K":
        return network.with_changes(energy=replace(network.energy, capacity_K=int(value)))
    if variable == "rho":
        return network.with_changes(energy=replace(network.energy, rho=float(value)))
    if variable == "L":
        return network.with_changes(levels_L=int(value))
    if variable == "N":
        n = int(value)
        if n < 1:
            raise ConfigError("sweep.values", "N must be >= 1")
        base = list(network.sensors)
        sensors = [base[i % len(base)] for i in range(n)]
        return network.with_changes(sensors=tuple(sensors))
    if variable == "snr_s":
        sensors = tuple(replace(s, signal_A=amplitude_for_snr(float(value), s.sigma_v2))
                        for s in network.sensors)
        return network.with_changes(sensors=sensors)
    raise ConfigError("sweep.variable", f"unknown variable {variable!r}")


def _problems(network, pool):
    # share evaluation caches between cells that differ only in the budget
    out = []
    for s in network.sensors:
        key = (s, network.energy, network.priors)
        if key not in pool:
            pool[key] = Problem(s, network.energy, network.priors, network.power_budget_P0)
        out.append(pool[key].with_budget(network.power_budget_P0))
    return out


def evaluate_network(network, method, seed, n_slots, problems=None, workers=1):
    """Solve, then score with the CLT estimate and (if ``n_slots``) simulation."""
    sols = solve_p1(network, method, seed=seed, workers=workers, problems=problems)
    pols = [s.candidate.point for s in sols]
    out = {
        "solutions": sols,
        "objective": float(sum(s.candidate.objective for s in sols)),
        "avg_power": float(max(s.candidate.avg_power for s in sols)),
        "analytic_pe": analytic_error_prob(network.sensors, pols, network.energy,
                                           network.priors, n_draws=ANALYTIC_DRAWS, seed=seed),
    }
    if n_slots:
        res = run_monte_carlo(network, pols, n_slots, seed)
        out["empirical_pe"] = res.empirical_pe
        out["ci_half_width"] = res.ci_half_width
    return out


def _sweep_cell(args):
    network, spec, value, method, seed, n_slots, pool = args
    row = SweepRow(spec.variable, value, method, seed=seed)
    t0 = time.perf_counter()
    try:
        net = apply_variable(network, spec.variable, value)
        ev = evaluate_network(net, method, seed, n_slots, _problems(net, pool))
        row.objective = ev["objective"]
        row.avg_power_watts = ev["avg_power"]
        row.analytic_pe = ev["analytic_pe"]
        row.empirical_pe = ev.get("empirical_pe")
        row.ci_half_width = ev.get("ci_half_width")
    except InfeasibleError as exc:
        row.error = f"infeasible: min power {exc.min_power!r} W"
    except (NumericalError, ChainError, ConfigError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    row.wall_time = time.perf_counter() - t0
    return row


def run_sweep(network: NetworkConfig, spec: SweepSpec, seed=0, n_slots=100_000, workers=1):
    """One :class:`SweepRow` per (value, method, replication), in that nesting order."""
    cells = [(v, m, seed + r) for v in spec.values for m in spec.methods
             for r in range(spec.replications)]
    if workers and workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_cell, [(network, spec, v, m, s, n_slots, {})
                                             for v, m, s in cells]))
    pool = {}
    return [_sweep_cell((network, spec, v, m, s, n_slots, pool)) for v, m, s in cells]


def rows_to_csv(rows, timing=False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_list(timing))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands

def _dump(record, out):
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    return text


def _chains_for(network, policies):
    arrivals = clipped_poisson(network.energy.rho, network.energy.capacity_K)
    chains = []
    for s, pol in zip(network.sensors, policies):
        det = derive_local_detector(s)
        pi = interval_probs(s.gamma_g, pol.thresholds)
        chains.append(build_chain(pol, arrivals, pi, det.transmit_prob(network.priors)))
    return chains


def cmd_optimize(config_path, method="hybrid-moe", seed=0, out=None, n_slots=100_000,
                 workers=1, dump_chain=None, timing=False):
    """Solve every sensor's sub-problem and score the resulting policies."""
    _, network = read_config(config_path)
    ev = evaluate_network(network, method, seed, n_slots, workers=workers)
    pols = [s.candidate.point for s in ev["solutions"]]
    record = {
        "method": method,
        "seed": seed,
        "power_budget_P0": network.power_budget_P0,
        "sensors": [s.to_dict(timing) for s in ev["solutions"]],
        "objective": ev["objective"],
        "avg_power_watts": ev["avg_power"],
        "analytic_pe": ev["analytic_pe"],
    }
    if n_slots:
        record["empirical_pe"] = ev["empirical_pe"]
        record["ci_half_width"] = ev["ci_half_width"]
        silent = [Policy((0.0,) * p.levels, p.thresholds) for p in pols]
        record["baseline_empirical_pe"] = run_monte_carlo(network, silent, n_slots,
                                                          seed).empirical_pe
    if timing:
        record["wall_time"] = float(sum(s.wall_time for s in ev["solutions"]))
    if dump_chain:
        for n, chain in enumerate(_chains_for(network, pols)):
            dump_chain_csv(chain, dump_chain, prefix=f"sensor{n}")
    return record, _dump(record, out)


def cmd_sweep(config_path, spec: SweepSpec | None = None, seed=0, out=None, n_slots=100_000,
              workers=1, timing=False):
    data, network = read_config(config_path)
    if spec is None:
        if not data.get("sweep"):
            raise ConfigError("sweep", "no sweep given on the command line or in the config")
        spec = SweepSpec.from_dict(data["sweep"])
    rows = run_sweep(network, spec, seed, n_slots, workers)
    text = rows_to_csv(rows, timing)
    if out:
        Path(out).write_text(text)
    return rows, text


def _policies_or_solve(data, network, method, seed, workers):
    pols = policies_from_config(data, network.n_sensors)
    if pols is None:
        sols = solve_p1(network, method, seed=seed, workers=workers)
        pols = [s.candidate.point for s in sols]
    return pols


def cmd_simulate(config_path, method="hybrid-moe", seed=0, out=None, n_slots=100_000,
                 workers=1, trace=None, fusion="exact", cold_start=False, dump_chain=None):
    """Simulate the network with the config's policies (or freshly solved ones)."""
    data, network = read_config(config_path)
    pols = _policies_or_solve(data, network, method, seed, workers)
    res = run_monte_carlo(network, pols, n_slots, seed, fusion=fusion, workers=workers,
                          cold_start=cold_start, trace_path=trace)
    record = res.to_dict()
    record["seed"] = seed
    record["policies"] = [p.to_dict() for p in pols]
    record["analytic_pe"] = analytic_error_prob(network.sensors, pols, network.energy,
                                                network.priors, n_draws=ANALYTIC_DRAWS, seed=seed)
    if dump_chain:
        for n, chain in enumerate(_chains_for(network, pols)):
            dump_chain_csv(chain, dump_chain, prefix=f"sensor{n}")
    return record, _dump(record, out)


def _check(report, module, operation, invariant, observed, expected, passed):
    report.append({"module": module, "operation": operation, "invariant": invariant,
                   "observed": observed, "expected": expected, "passed": bool(passed)})


def _chain_checks(report, label, chain: BatteryChain):
    rows = chain.psi.sum(axis=1)
    dev = float(np.max(np.abs(rows - 1.0)))
    _check(report, "battery", f"transition_matrix[{label}]", "row_sums", dev,
           f"<= {ROW_SUM_TOL}", dev <= ROW_SUM_TOL)
    try:
        phi = stationary_closed_form(chain.psi)
        res = float(np.max(np.abs(phi - phi @ chain.psi)))
        _check(report, "battery", f"stationary_closed_form[{label}]", "stationarity_residual",
               res, "< 1e-10", res < 1e-10)
        _check(report, "battery", f"stationary_closed_form[{label}]", "sums_to_one",
               float(abs(phi.sum() - 1.0)), "< 1e-10", abs(phi.sum() - 1.0) < 1e-10)
        pit = stationary_power_iteration(chain.psi)
        gap = float(np.max(np.abs(pit - phi)))
        _check(report, "battery", f"stationary_power_iteration[{label}]",
               "agrees_with_closed_form", gap, "< 1e-8", gap < 1e-8)
    except ChainError as exc:
        _check(report, "battery", f"stationary_closed_form[{label}]", "solvable", str(exc),
               "solvable chain", False)


def cmd_validate(config_path, method="hybrid-moe", seed=0, out=None, n_slots=200_000,
                 workers=1, inject_fault=False):
    """Run the oracle checks on one config; returns (report, text, all_passed)."""
    data, network = read_config(config_path)
    pols = _policies_or_solve(data, network, method, seed, workers)
    arrivals = clipped_poisson(network.energy.rho, network.energy.capacity_K)
    report = []
    seen = {}
    for n, (s, pol) in enumerate(zip(network.sensors, pols)):
        if (s, pol) in seen:
            continue
        seen[(s, pol)] = n
        det = derive_local_detector(s)
        pi = interval_probs(s.gamma_g, pol.thresholds)
        pi_hat1 = det.transmit_prob(network.priors)
        chain = build_chain(pol, arrivals, pi, pi_hat1)
        if inject_fault:
            psi = chain.psi.copy()
            psi[0] *= 0.9
            chain = BatteryChain(psi, chain.phi)
        _chain_checks(report, f"sensor{n}", chain)

        for l in range(pol.levels):
            val = avg_j_interval(s, det, pol, chain, l, network.energy)
            units = pol.consumed_table(network.energy.capacity_K)[l]
            lo, hi = pol.thresholds[l], pol.thresholds[l + 1]
            ref = 0.0
            for k, phik in enumerate(chain.phi):
                a = math.sqrt(units[k] * network.energy.unit_power)
                ref += phik * quad(lambda g: j_div_pointwise(g, a, det, s.sigma_w2)
                                   * 2.0 * g / s.gamma_g * math.exp(-g * g / s.gamma_g),
                                   lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)[0]
            rel = abs(val - ref) / abs(ref) if ref else abs(val)
            _check(report, "metrics", f"avg_j_interval[sensor{n},l={l}]", "matches_quadrature",
                   rel, "< 1e-6 relative", rel < 1e-6)

        g = math.sqrt(s.gamma_g)
        a = math.sqrt(max(1, network.energy.capacity_K // 2) * network.energy.unit_power)
        mp = moment_match(g, a, det, s.sigma_w2)
        zm = z_moments(mp)
        qa, qb, qc = z_quadratic(mp)
        for h, (m, v, mean, var) in enumerate([(mp.m0, mp.var0, zm.mean0, zm.var0),
                                               (mp.m1, mp.var1, zm.mean1, zm.var1)]):
            sd = math.sqrt(v)

            def pdf(y):
                return math.exp(-0.5 * (y - m) ** 2 / v) / math.sqrt(2 * math.pi * v)

            def zf(y):
                return qa * y * y + qb * y + qc
            e1 = quad(lambda y: zf(y) * pdf(y), m - 40 * sd, m + 40 * sd, epsabs=0,
                      epsrel=1e-11, limit=400)[0]
            e2 = quad(lambda y: (zf(y) - e1) ** 2 * pdf(y), m - 40 * sd, m + 40 * sd, epsabs=0,
                      epsrel=1e-11, limit=400)[0]
            err = max(abs(mean - e1), abs(var - e2) / max(e2, 1e-300))
            _check(report, "metrics", f"z_moments[sensor{n},h={h}]", "matches_integration",
                   err, "< 1e-9", err < 1e-9)

        gap = empirical_battery_check(network, pol, n_slots, seed, sensor=n)
        _check(report, "simulator", f"empirical_battery_check[sensor{n}]", "occupancy_gap",
               gap, "< 0.01", gap < 0.01)

    analytic = analytic_error_prob(network.sensors, pols, network.energy, network.priors,
                                   n_draws=ANALYTIC_DRAWS, seed=seed)
    mc = run_monte_carlo(network, pols, n_slots, seed, workers=workers)
    diff = abs(analytic - mc.empirical_pe)
    _check(report, "metrics", "clt_error_prob", "agrees_with_monte_carlo",
           {"analytic": analytic, "empirical": mc.empirical_pe}, "|diff| <= 0.02", diff <= 0.02)

    ok = all(c["passed"] for c in report)
    record = {"config": str(config_path), "seed": seed, "passed": ok, "checks": report}
    return record, _dump(record, out), ok
