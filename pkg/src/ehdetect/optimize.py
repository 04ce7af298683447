"""Per-sensor policy design: exhaustive grid, recursive random search, hybrids.

A grid point is an integer index tuple ``(i_c0, ..., i_c{L-1}, j_1, ..., j_{L-1})``.
Scale index ``i`` maps to ``i / (n_c - 1)``; threshold index ``j`` maps to
``mu_max * (j + 1) / n_mu``. Threshold indices must be strictly increasing.
When the thresholds are pinned (hybrid methods) only the scale indices remain.
"""

from __future__ import annotations

import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .battery import clipped_poisson
from .errors import ConfigError, InfeasibleError
from .metrics import evaluate_policy
from .model import EnergyModel, NetworkConfig, Policy, SensorParams, SolverSettings, \
    derive_local_detector

POWER_TOL = 1e-12
METHODS = ("grid", "rrs", "hybrid-mmae", "hybrid-moe")


@dataclass(frozen=True)
class GridSpec:
    n_c: int = 10
    n_mu: int = 20
    mu_max: float = 3.0

    def __post_init__(self):
        if self.n_c < 2:
            raise ConfigError("n_c", f"must be >= 2, got {self.n_c!r}")
        if self.n_mu < 2:
            raise ConfigError("n_mu", f"must be >= 2, got {self.n_mu!r}")
        if not self.mu_max > 0:
            raise ConfigError("mu_max", f"must be positive, got {self.mu_max!r}")

    @classmethod
    def for_sensor(cls, settings: SolverSettings, gamma_g: float):
        mu_max = settings.mu_max if settings.mu_max is not None else 3.0 * math.sqrt(gamma_g)
        return cls(settings.n_c, settings.n_mu, mu_max)

    def scale(self, i):
        return i / (self.n_c - 1)

    def threshold(self, j):
        return self.mu_max * (j + 1) / self.n_mu


def exploration_count(p, r) -> int:
    """Samples needed so that one lands in the top-r fraction with probability p."""
    if not (0.0 < p < 1.0 and 0.0 < r < 1.0):
        raise ValueError(f"p and r must lie in (0, 1), got p={p!r}, r={r!r}")
    # the ratio of two logs can land a hair above an integer
    return max(1, math.ceil(math.log1p(-p) / math.log1p(-r) - 1e-12))


@dataclass(frozen=True)
class RrsParams:
    p: float = 0.99
    r: float = 0.1
    q2: int = 10
    rho0: int = 3

    @property
    def q1(self):
        return exploration_count(self.p, self.r)

    def check(self, dims: int):
        if not (0.0 < self.p < 1.0 and 0.0 < self.r < 1.0):
            raise ConfigError("rrs", f"p and r must lie in (0, 1), got {self.p}, {self.r}")
        if self.rho0 < 1:
            raise ConfigError("rrs.rho0", f"must be >= 1, got {self.rho0!r}")
        shell = 3 ** dims - 1
        if not 1 <= self.q2 < shell:
            raise ConfigError("rrs.q2", f"must satisfy 1 <= q2 < {shell} in {dims} dims, "
                                        f"got {self.q2!r}")

    def fitted(self, dims: int):
        """Copy with q2 capped below the smallest full shell for ``dims`` dimensions."""
        return RrsParams(self.p, self.r, max(1, min(self.q2, 3 ** dims - 2)), self.rho0)


@dataclass(frozen=True)
class Candidate:
    point: Policy
    objective: float
    avg_power: float
    feasible: bool
    index: tuple = ()


@dataclass
class Solution:
    """Structured record of one per-sensor solve."""

    candidate: Candidate
    method: str
    seed: int | None
    wall_time: float
    evaluations: int = 0

    def to_dict(self, timing=False):
        d = {
            "method": self.method,
            "seed": self.seed,
            "policy": self.candidate.point.to_dict(),
            "objective": self.candidate.objective,
            "avg_power_watts": self.candidate.avg_power,
            "evaluations": self.evaluations,
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


# ---------------------------------------------------------------------------
# objective evaluation

@dataclass
class Problem:
    """One sensor's constrained design problem with a shared evaluation cache.

    Objective and power do not depend on the budget, so :meth:`with_budget`
    returns a sibling that reuses every evaluation already made.
    """

    sensor: SensorParams
    energy: EnergyModel
    priors: tuple
    budget: float
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.detector = derive_local_detector(self.sensor)
        self.arrivals = clipped_poisson(self.energy.rho, self.energy.capacity_K)
        self.j_memo = {}

    @classmethod
    def from_network(cls, network: NetworkConfig, n: int, budget=None):
        return cls(network.sensors[n], network.energy, network.priors,
                   network.power_budget_P0 if budget is None else budget)

    def with_budget(self, budget):
        sib = Problem(self.sensor, self.energy, self.priors, budget, self.cache)
        sib.j_memo = self.j_memo
        return sib

    def raw(self, policy: Policy):
        hit = self.cache.get(policy)
        if hit is None:
            ev = evaluate_policy(self.sensor, policy, self.energy, self.priors,
                                 self.detector, self.arrivals, self.j_memo)
            hit = (ev.objective, ev.avg_power)
            self.cache[policy] = hit
        return hit

    def evaluate(self, policy: Policy, index=()) -> Candidate:
        obj, pw = self.raw(policy)
        return Candidate(policy, obj, pw, pw <= self.budget + POWER_TOL, tuple(index))


# ---------------------------------------------------------------------------
# search space

class GridSpace:
    """Index space over scales and (optionally) thresholds."""

    def __init__(self, spec: GridSpec, levels: int, fixed_thresholds=None):
        self.spec = spec
        self.levels = levels
        self.fixed = None if fixed_thresholds is None else tuple(float(m) for m in fixed_thresholds)
        if self.fixed is not None and len(self.fixed) != levels + 1:
            raise ConfigError("thresholds", f"need {levels + 1} thresholds for L={levels}")
        n_thr = 0 if self.fixed is not None else levels - 1
        self.sizes = (spec.n_c,) * levels + (spec.n_mu,) * n_thr
        self.dims = len(self.sizes)

    def valid(self, idx) -> bool:
        if any(not 0 <= i < s for i, s in zip(idx, self.sizes)):
            return False
        thr = idx[self.levels:]
        return all(b > a for a, b in zip(thr, thr[1:]))

    def decode(self, idx) -> Policy:
        scales = tuple(self.spec.scale(i) for i in idx[:self.levels])
        if self.fixed is not None:
            return Policy(scales, self.fixed)
        return Policy.from_inner(scales, [self.spec.threshold(j) for j in idx[self.levels:]])

    def count(self) -> int:
        n_thr = self.dims - self.levels
        return self.spec.n_c ** self.levels * math.comb(self.spec.n_mu, n_thr)

    def enumerate(self):
        """All valid points in lexicographic order."""
        n_thr = self.dims - self.levels
        for cs in itertools.product(range(self.spec.n_c), repeat=self.levels):
            for ms in itertools.combinations(range(self.spec.n_mu), n_thr):
                yield cs + ms

    def random_point(self, rng):
        cs = tuple(int(v) for v in rng.integers(0, self.spec.n_c, self.levels))
        n_thr = self.dims - self.levels
        ms = tuple(sorted(int(v) for v in rng.choice(self.spec.n_mu, n_thr, replace=False)))
        return cs + ms


def neighborhood(point, shell_rho, space: GridSpace):
    """Valid grid points within Chebyshev index distance ``shell_rho``, center excluded."""
    if shell_rho < 1:
        raise ValueError("shell_rho must be >= 1")
    point = tuple(point)
    ranges = [range(max(0, p - shell_rho), min(s, p + shell_rho + 1))
              for p, s in zip(point, space.sizes)]
    return [q for q in itertools.product(*ranges) if q != point and space.valid(q)]


# ---------------------------------------------------------------------------
# exhaustive grid

def _best(cands):
    best = None
    for c in cands:
        if c.feasible and (best is None or c.objective > best.objective):
            best = c
    return best


def _min_power(cands):
    return min((c.avg_power for c in cands), default=float("nan"))


def _eval_chunk(args):
    problem, space, points = args
    return [problem.evaluate(space.decode(p), p) for p in points]


def grid_search(problem: Problem, space: GridSpace, workers=1) -> Candidate:
    """Exhaustive search; ties go to the lexicographically smallest index."""
    points = list(space.enumerate())
    if workers and workers > 1 and len(points) > 256:
        size = math.ceil(len(points) / (4 * workers))
        chunks = [points[i:i + size] for i in range(0, len(points), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_eval_chunk, [(problem, space, ch) for ch in chunks])
            cands = [c for part in results for c in part]
        for c in cands:
            problem.cache.setdefault(c.point, (c.objective, c.avg_power))
    else:
        cands = [problem.evaluate(space.decode(p), p) for p in points]
    best = _best(cands)
    if best is None:
        raise InfeasibleError("no grid point meets the power budget", _min_power(cands))
    return best


# ---------------------------------------------------------------------------
# recursive random search

@dataclass
class RrsTrace:
    explored: list
    threshold: float
    exploited: list


def _draw_unseen(space, rng, seen, max_tries=2000):
    for _ in range(max_tries):
        p = space.random_point(rng)
        if p not in seen:
            return p
    rest = [p for p in space.enumerate() if p not in seen]
    if not rest:
        return None
    return rest[int(rng.integers(len(rest)))]


def rrs_solve(problem: Problem, space: GridSpace, rrs: RrsParams, seed, trace=False):
    """Recursive random search over ``space``.

    Exploration keeps drawing unseen points until ``q1`` feasible ones are
    found (or the grid runs out). Each explored point is then refined: draw
    ``q2`` points from the current shell and move to the best one that is
    feasible, beats the exploration mean, and improves on the current point;
    otherwise shrink the shell. At most ``q1`` moves per explored point.
    """
    rrs.check(space.dims)
    rng = np.random.default_rng(seed)
    q1 = rrs.q1
    seen = set()
    explored, powers = [], []
    total = space.count()
    while len(explored) < q1 and len(seen) < total:
        p = _draw_unseen(space, rng, seen)
        if p is None:
            break
        seen.add(p)
        c = problem.evaluate(space.decode(p), p)
        powers.append(c.avg_power)
        if c.feasible:
            explored.append(c)
    if not explored:
        raise InfeasibleError("no feasible point found while exploring", min(powers))
    j_tr = float(np.mean([c.objective for c in explored]))

    exploited = []
    for start in explored:
        cur = start
        shell, moves = rrs.rho0, 0
        while shell >= 1:
            nb = neighborhood(cur.index, shell, space)
            if len(nb) > rrs.q2:
                pick = sorted(rng.choice(len(nb), rrs.q2, replace=False))
                nb = [nb[i] for i in pick]
            batch = [problem.evaluate(space.decode(q), q) for q in nb]
            better = [c for c in batch
                      if c.feasible and c.objective >= j_tr and c.objective > cur.objective]
            if better and moves < q1:
                cur = max(better, key=lambda c: c.objective)
                moves += 1
            else:
                shell -= 1
        exploited.append(cur)
    best = max(exploited, key=lambda c: c.objective)
    # max() keeps the first maximal element, so ties resolve by exploration order
    if trace:
        return best, RrsTrace(explored, j_tr, exploited)
    return best


# ---------------------------------------------------------------------------
# threshold rules for the hybrid methods

def _rayleigh_cdf(g, gamma):
    return -math.expm1(-g * g / gamma)


def _rayleigh_pdf(g, gamma):
    return 2.0 * g / gamma * math.exp(-g * g / gamma)


def _rayleigh_quantile(u, gamma):
    return math.sqrt(-gamma * math.log1p(-u))


def _mae_recursion(mu1, L):
    # unit gamma; returns (inner thresholds, F implied at the last boundary) or overshoot
    mus = [0.0, mu1]
    for l in range(1, L):
        F_next = _rayleigh_cdf(mus[l], 1.0) + (mus[l] - mus[l - 1]) * _rayleigh_pdf(mus[l], 1.0)
        if l == L - 1:
            return mus[1:], F_next
        if F_next >= 1.0:
            return None, F_next
        mus.append(_rayleigh_quantile(F_next, 1.0))
    raise AssertionError("unreachable")


def mmae_thresholds(gamma_g, L):
    """Thresholds minimizing the mean absolute error of g against its lower cell edge.

    Solves the first-order recursion by bisecting on the first threshold
    until the implied CDF at the last boundary equals one.
    """
    if L < 2:
        raise ConfigError("levels_L", f"MMAE thresholds need L >= 2, got {L}")
    lo, hi = 1e-12, 12.0
    if _mae_recursion(lo, L)[1] >= 1.0 or _mae_recursion(hi, L)[1] < 1.0:
        raise ConfigError("levels_L", f"cannot bracket the MMAE recursion for L={L}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _mae_recursion(mid, L)[1] >= 1.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    inner, F_end = _mae_recursion(lo, L)
    if inner is None or abs(F_end - 1.0) >= 1e-9:
        raise ConfigError("levels_L", f"MMAE recursion residual {F_end - 1.0:.3e} for L={L}")
    root = math.sqrt(gamma_g)
    return (0.0, *(root * m for m in inner), math.inf)


def mean_abs_error(gamma_g, thresholds):
    """E|g - mu_l| with mu_l the lower edge of the cell holding g."""
    from scipy.special import erfc

    mu = list(thresholds)
    sig = math.sqrt(gamma_g)

    def partial_mean(a, b):
        # int_a^b g f(g) dg for Rayleigh with E g^2 = gamma
        def upper(x):
            if x == math.inf:
                return 0.0
            return x * math.exp(-x * x / gamma_g) + 0.5 * math.sqrt(math.pi) * sig * erfc(x / sig)
        return upper(a) - upper(b)

    total = 0.0
    for l in range(len(mu) - 1):
        a, b = mu[l], mu[l + 1]
        mass = math.exp(-a * a / gamma_g) - (0.0 if b == math.inf else math.exp(-b * b / gamma_g))
        total += partial_mean(a, b) - a * mass
    return total


def moe_thresholds(gamma_g, L):
    """Equal-probability cells for the Rayleigh gain."""
    if L < 2:
        raise ConfigError("levels_L", f"MOE thresholds need L >= 2, got {L}")
    return (0.0, *(_rayleigh_quantile(l / L, gamma_g) for l in range(1, L)), math.inf)


def hybrid_thresholds(gamma_g, L, rule):
    if L == 1:
        return (0.0, math.inf)
    if rule == "mmae":
        return mmae_thresholds(gamma_g, L)
    if rule == "moe":
        return moe_thresholds(gamma_g, L)
    raise ConfigError("method", f"unknown threshold rule {rule!r}")


def hybrid_solve(problem: Problem, rule, spec: GridSpec, levels, rrs: RrsParams, seed):
    """Pin thresholds by ``rule`` ('mmae' or 'moe'), then search scales with RRS."""
    space = GridSpace(spec, levels, hybrid_thresholds(problem.sensor.gamma_g, levels, rule))
    return rrs_solve(problem, space, rrs.fitted(space.dims), seed)


# ---------------------------------------------------------------------------
# network level

def _rrs_from_settings(s: SolverSettings, hybrid: bool):
    return RrsParams(s.p, s.r, s.q2_hybrid if hybrid else s.q2, s.rho0)


def solve_sensor(problem: Problem, network: NetworkConfig, method: str, seed=0,
                 workers=1) -> Solution:
    settings = network.solver
    spec = GridSpec.for_sensor(settings, problem.sensor.gamma_g)
    L = int(network.levels_L)
    before = len(problem.cache)
    t0 = time.perf_counter()
    if method == "grid":
        cand = grid_search(problem, GridSpace(spec, L), workers=workers)
    elif method == "rrs":
        space = GridSpace(spec, L)
        cand = rrs_solve(problem, space, _rrs_from_settings(settings, False).fitted(space.dims),
                         seed)
    elif method in ("hybrid-mmae", "hybrid-moe"):
        cand = hybrid_solve(problem, method.split("-")[1], spec, L,
                            _rrs_from_settings(settings, True), seed)
    else:
        raise ConfigError("method", f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return Solution(cand, method, None if method == "grid" else seed,
                    time.perf_counter() - t0, len(problem.cache) - before)


def solve_p1(network: NetworkConfig, method: str, seed=0, workers=None, problems=None):
    """Solve each sensor's sub-problem independently; identical sensors share one solve.

    Returns a list of :class:`Solution` (one per sensor, in order). A sensor
    whose sub-problem is infeasible raises :class:`InfeasibleError`.
    """
    workers = default_workers() if workers is None else workers
    memo = {}
    out = []
    for n, sensor in enumerate(network.sensors):
        if sensor not in memo:
            prob = problems[n] if problems is not None else Problem.from_network(network, n)
            try:
                memo[sensor] = solve_sensor(prob, network, method, seed, workers)
            except InfeasibleError as exc:
                raise InfeasibleError(f"sensor {n}: {str(exc).split(' (')[0]}",
                                      exc.min_power) from None
        out.append(memo[sensor])
    return out


def default_workers():
    env = os.environ.get("EHDETECT_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("EHDETECT_WORKERS", f"not an integer: {env!r}") from None
    return 1
