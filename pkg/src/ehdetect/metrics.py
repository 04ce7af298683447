"""J-divergence objective, average power, and the CLT error-probability estimate.

The channel gain g is Rayleigh, so x = g**2 is exponential with mean
``gamma_g``. Interval averages are taken over x in [mu_l**2, mu_{l+1}**2)
and are *unconditional* partial expectations: summing them over the
intervals gives E{J}, and a silent interval contributes 2 * pi_l.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .battery import BatteryChain, build_chain, clipped_poisson, interval_probs
from .errors import NumericalError
from .model import EnergyModel, LocalDetector, Policy, SensorParams, derive_local_detector
from .special import exp_integral_ei, qfunc, scaled_e1  # noqa: F401  (re-exported)

# switch to the power series once d * x_typ / s drops below this
_SERIES_EPS = 1e-3
_SERIES_TERMS = 8


@dataclass(frozen=True)
class MomentPair:
    m0: float
    m1: float
    var0: float
    var1: float


@dataclass(frozen=True)
class JCoefficients:
    A: float
    B: float
    C: float
    D: float


@dataclass(frozen=True)
class ZMoments:
    mean0: float
    var0: float
    mean1: float
    var1: float


def moment_match(g, alpha, det: LocalDetector, sigma_w2) -> MomentPair:
    """Gaussian moments of y = g*alpha*1{transmit} + w under each hypothesis."""
    ga = g * alpha
    ga2 = ga * ga
    return MomentPair(
        m0=ga * det.pf,
        m1=ga * det.pd,
        var0=ga2 * det.pf * (1.0 - det.pf) + sigma_w2,
        var1=ga2 * det.pd * (1.0 - det.pd) + sigma_w2,
    )


def j_coefficients(det: LocalDetector) -> JCoefficients:
    pd, pf = det.pd, det.pf
    return JCoefficients(
        A=pf * (1.0 - pd) + pd * (pd - pf),
        B=pd * (1.0 - pd),
        C=pd * (1.0 - pf) - pf * (pd - pf),
        D=pf * (1.0 - pf),
    )


def j_div_pointwise(g, alpha, det: LocalDetector, sigma_w2):
    """Gaussian-approximated J-divergence at a fixed gain and amplitude.

    Equals 2 when the two conditionals coincide (alpha = 0 or pd = pf).
    Works elementwise on arrays of ``g``.
    """
    k = j_coefficients(det)
    e = np.asarray(g, dtype=float) ** 2 * alpha * alpha
    out = (sigma_w2 + k.A * e) / (sigma_w2 + k.B * e) + (sigma_w2 + k.C * e) / (sigma_w2 + k.D * e)
    return out if np.ndim(out) else float(out)


def j_div_gaussian(mp: MomentPair):
    """J-divergence between N(m1, var1) and N(m0, var0) in the moment form."""
    dm2 = (mp.m1 - mp.m0) ** 2
    return (mp.var1 + dm2) / mp.var0 + (mp.var0 + dm2) / mp.var1


# ---------------------------------------------------------------------------
# interval averages over the exponential law of x = g^2

def _upper_gamma_int(j, t):
    # Gamma(j+1, t) = j! e^{-t} sum_{i<=j} t^i / i!   (t may be inf)
    if t == math.inf:
        return 0.0
    term, acc = 1.0, 1.0
    for i in range(1, j + 1):
        term *= t / i
        acc += term
    return math.factorial(j) * math.exp(-t) * acc


def _partial_moment(j, gamma, x1, x2):
    """int_{x1}^{x2} x^j (1/gamma) e^{-x/gamma} dx."""
    lam = 1.0 / gamma
    return gamma ** j * (_upper_gamma_int(j, lam * x1) - _upper_gamma_int(j, lam * x2))


def _ratio_integral(s, d, gamma, x1, x2):
    """int_{x1}^{x2} x / (s + d x) (1/gamma) e^{-x/gamma} dx for s > 0, d >= 0.

    Uses the E1 closed form unless d*x/s is tiny over the bulk of the
    interval, where that form cancels catastrophically and a power series
    in d/s is exact to double precision instead.
    """
    lam = 1.0 / gamma
    x_typ = x1 + 10.0 * gamma
    if d * x_typ <= _SERIES_EPS * s:
        total, ratio = 0.0, 1.0
        for m in range(_SERIES_TERMS):
            total += ratio * _partial_moment(m + 1, gamma, x1, x2)
            ratio *= -d / s
        return total / s
    kappa = s / d
    lk = lam * kappa
    mass = math.exp(-lam * x1) - (0.0 if x2 == math.inf else math.exp(-lam * x2))
    lower = math.exp(-lam * x1) * float(scaled_e1(lam * (x1 + kappa)))
    upper = 0.0 if x2 == math.inf else math.exp(-lam * x2) * float(scaled_e1(lam * (x2 + kappa)))
    return (mass - lk * (lower - upper)) / d


def interval_j_integral(power, x1, x2, coeffs: JCoefficients, sigma_w2, gamma):
    """int over x in [x1, x2) of J(x; alpha^2 = power) against the law of x.

    J(x) = 2 + (A-B) a x / (s + B a x) + (C-D) a x / (s + D a x) with
    a = power and s = sigma_w2.
    """
    mass = math.exp(-x1 / gamma) - (0.0 if x2 == math.inf else math.exp(-x2 / gamma))
    if power == 0.0:
        return 2.0 * mass
    s = sigma_w2
    val = 2.0 * mass
    val += (coeffs.A - coeffs.B) * power * _ratio_integral(s, coeffs.B * power, gamma, x1, x2)
    val += (coeffs.C - coeffs.D) * power * _ratio_integral(s, coeffs.D * power, gamma, x1, x2)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite interval average for power={power}, [{x1}, {x2})")
    return val


def avg_j_interval(sensor: SensorParams, det: LocalDetector, policy: Policy, chain,
                   interval_l: int, energy: EnergyModel, debug=False, memo=None):
    """Battery-averaged partial expectation of J over gain interval ``interval_l``.

    ``chain`` may be a :class:`BatteryChain` or a bare stationary vector.
    With ``debug=True`` returns ``(value, details)`` where details lists the
    per-consumption-level integrals. ``memo`` is an optional dict reused
    across calls for the same sensor.
    """
    phi = chain.phi if isinstance(chain, BatteryChain) else np.asarray(chain, dtype=float)
    K = len(phi) - 1
    coeffs = j_coefficients(det)
    mu_lo, mu_hi = policy.thresholds[interval_l], policy.thresholds[interval_l + 1]
    x1, x2 = mu_lo * mu_lo, (math.inf if mu_hi == math.inf else mu_hi * mu_hi)
    units = policy.consumed_table(K)[interval_l]
    per_unit = {}
    for u in np.unique(units):
        key = (int(u), x1, x2)
        if memo is not None and key in memo:
            per_unit[int(u)] = memo[key]
            continue
        per_unit[int(u)] = interval_j_integral(int(u) * energy.unit_power, x1, x2, coeffs,
                                               sensor.sigma_w2, sensor.gamma_g)
        if memo is not None:
            memo[key] = per_unit[int(u)]
    value = float(sum(phi[k] * per_unit[int(units[k])] for k in range(K + 1)))
    if not math.isfinite(value):
        raise NumericalError("non-finite J average")
    if debug:
        return value, {"x_bounds": (x1, x2), "per_units": per_unit, "coefficients": coeffs}
    return value


def avg_power_interval(policy: Policy, chain, pi, pi_hat1, interval_l, energy: EnergyModel):
    """Average transmit power (Watts) spent in interval ``interval_l``."""
    phi = chain.phi if isinstance(chain, BatteryChain) else np.asarray(chain, dtype=float)
    units = policy.consumed_table(len(phi) - 1)[interval_l]
    return float(pi_hat1 * pi[interval_l] * (phi @ units) * energy.unit_power)


@dataclass(frozen=True)
class PolicyEvaluation:
    objective: float
    avg_power: float
    chain: BatteryChain
    pi: np.ndarray
    pi_hat1: float
    per_interval_j: tuple
    per_interval_power: tuple


def evaluate_policy(sensor: SensorParams, policy: Policy, energy: EnergyModel, priors,
                    det: LocalDetector | None = None, arrivals=None,
                    memo=None) -> PolicyEvaluation:
    """Objective sum_l Jbar_l and average power sum_l Pbar_l for one sensor."""
    det = det or derive_local_detector(sensor)
    arrivals = clipped_poisson(energy.rho, energy.capacity_K) if arrivals is None else arrivals
    pi = interval_probs(sensor.gamma_g, policy.thresholds)
    pi_hat1 = det.transmit_prob(priors)
    chain = build_chain(policy, arrivals, pi, pi_hat1)
    js = tuple(avg_j_interval(sensor, det, policy, chain, l, energy, memo=memo)
               for l in range(policy.levels))
    ps = tuple(avg_power_interval(policy, chain, pi, pi_hat1, l, energy)
               for l in range(policy.levels))
    return PolicyEvaluation(objective=float(sum(js)), avg_power=float(sum(ps)), chain=chain,
                            pi=pi, pi_hat1=pi_hat1, per_interval_j=js, per_interval_power=ps)


# ---------------------------------------------------------------------------
# approximate fusion statistic z_n = (y-m0)^2/var0 - (y-m1)^2/var1

def z_quadratic(mp: MomentPair):
    """Coefficients (a, b, c) with z = a y^2 + b y + c."""
    a = 1.0 / mp.var0 - 1.0 / mp.var1
    b = 2.0 * mp.m1 / mp.var1 - 2.0 * mp.m0 / mp.var0
    c = mp.m0 ** 2 / mp.var0 - mp.m1 ** 2 / mp.var1
    return a, b, c


def _z_mean_var(a, b, c, m, v):
    mean = a * (m * m + v) + b * m + c
    var = 2.0 * a * a * (2.0 * m * m * v + v * v) + b * v * (b + 4.0 * a * m)
    return mean, var


def z_moments(mp: MomentPair) -> ZMoments:
    """Mean and variance of z under each hypothesis, y taken Gaussian."""
    if not (mp.var0 > 0 and mp.var1 > 0):
        raise ValueError("z_moments needs positive variances")
    a, b, c = z_quadratic(mp)
    mean0, var0 = _z_mean_var(a, b, c, mp.m0, mp.var0)
    mean1, var1 = _z_mean_var(a, b, c, mp.m1, mp.var1)
    return ZMoments(mean0=mean0, var0=max(var0, 0.0), mean1=mean1, var1=max(var1, 0.0))


def _gauss_pdf(y, m, v):
    return np.exp(-0.5 * (y - m) ** 2 / v) / np.sqrt(2.0 * np.pi * v)


def z_pdf(mp: MomentPair, z, h: int):
    """Density of z under hypothesis ``h`` when y ~ N(m_h, var_h).

    The two roots of the quadratic contribute f_y(root) / |dz/dy|; the
    density is zero where the quadratic never reaches ``z``.
    """
    if mp.var0 == mp.var1:
        raise ValueError("z_pdf needs var0 != var1 (z is then linear in y)")
    if h not in (0, 1):
        raise ValueError("h must be 0 or 1")
    a, b, c = z_quadratic(mp)
    z = np.asarray(z, dtype=float)
    disc = b * b - 4.0 * a * (c - z)
    out = np.zeros_like(z)
    ok = disc > 0
    root = np.sqrt(disc[ok])
    m, v = (mp.m0, mp.var0) if h == 0 else (mp.m1, mp.var1)
    y_plus = (-b + root) / (2.0 * a)
    y_minus = (-b - root) / (2.0 * a)
    out[ok] = (_gauss_pdf(y_plus, m, v) + _gauss_pdf(y_minus, m, v)) / root
    return out if out.ndim else float(out)


def z_support_edge(mp: MomentPair):
    """Value of z at the vertex of the quadratic (the density's finite edge)."""
    a, b, c = z_quadratic(mp)
    return c - b * b / (4.0 * a)


def log_det_term(pairs) -> float:
    """R = 1/2 sum_n log(var0_n / var1_n)."""
    return 0.5 * sum(math.log(p.var0 / p.var1) for p in pairs)


def clt_threshold(priors, R):
    """tau' = 2 (log(Pi0/Pi1) - R)."""
    return 2.0 * (math.log(priors[0] / priors[1]) - R)


def clt_error_prob(zms, priors, R) -> float:
    """Error probability of the approximate fusion rule under the CLT.

    Sums the per-sensor z moments and evaluates
    Pi0 Q((tau'-mu0)/sd0) + Pi1 (1 - Q((tau'-mu1)/sd1)), with sd the
    standard deviation of the summed statistic.
    """
    zms = list(zms)
    if not zms:
        raise ValueError("need at least one sensor")
    mu0 = sum(z.mean0 for z in zms)
    mu1 = sum(z.mean1 for z in zms)
    v0 = sum(z.var0 for z in zms)
    v1 = sum(z.var1 for z in zms)
    if not (v0 > 0 and v1 > 0):
        raise NumericalError("fusion statistic has zero variance under a hypothesis")
    tau_p = clt_threshold(priors, R)
    return float(priors[0] * qfunc((tau_p - mu0) / math.sqrt(v0))
                 + priors[1] * (1.0 - qfunc((tau_p - mu1) / math.sqrt(v1))))


def _clt_pe_batch(mu0, v0, mu1, v1, tau_p, priors):
    from scipy.special import erfc

    def q(x):
        return 0.5 * erfc(x / math.sqrt(2.0))

    pe = np.empty_like(mu0)
    live = (v0 > 0) & (v1 > 0)
    pe[live] = (priors[0] * q((tau_p[live] - mu0[live]) / np.sqrt(v0[live]))
                + priors[1] * (1.0 - q((tau_p[live] - mu1[live]) / np.sqrt(v1[live]))))
    # all sensors silent: the statistic is the constant mu0 == mu1; decide 1 iff it exceeds tau'
    dead = ~live
    pe[dead] = np.where(mu0[dead] > tau_p[dead], priors[0], priors[1])
    return pe


def analytic_error_prob(sensors, policies, energy: EnergyModel, priors, chains=None,
                        n_draws=20000, seed=0) -> float:
    """CLT error probability averaged over channel gains and battery states.

    For each draw every sensor gets a Rayleigh gain and a battery level from
    its stationary law; the FC statistic is conditioned on the resulting
    would-be amplitudes and the CLT formula is averaged across draws.
    """
    rng = np.random.default_rng(seed)
    N = len(sensors)
    K = energy.capacity_K
    mu0 = np.zeros(n_draws)
    mu1 = np.zeros(n_draws)
    v0 = np.zeros(n_draws)
    v1 = np.zeros(n_draws)
    R = np.zeros(n_draws)
    for n in range(N):
        sensor, policy = sensors[n], policies[n]
        det = derive_local_detector(sensor)
        if chains is None:
            chain = evaluate_policy(sensor, policy, energy, priors, det).chain
        else:
            chain = chains[n]
        g = np.sqrt(rng.exponential(sensor.gamma_g, n_draws))
        k = rng.choice(K + 1, size=n_draws, p=chain.phi)
        l = np.searchsorted(np.asarray(policy.thresholds), g, side="right") - 1
        units = policy.consumed_table(K)[l, k]
        ga = g * np.sqrt(units * energy.unit_power)
        m0, m1 = ga * det.pf, ga * det.pd
        s0 = ga * ga * det.pf * (1.0 - det.pf) + sensor.sigma_w2
        s1 = ga * ga * det.pd * (1.0 - det.pd) + sensor.sigma_w2
        a = 1.0 / s0 - 1.0 / s1
        b = 2.0 * m1 / s1 - 2.0 * m0 / s0
        c = m0 * m0 / s0 - m1 * m1 / s1
        e0, w0 = _z_mean_var(a, b, c, m0, s0)
        e1, w1 = _z_mean_var(a, b, c, m1, s1)
        mu0 += e0
        mu1 += e1
        v0 += np.maximum(w0, 0.0)
        v1 += np.maximum(w1, 0.0)
        R += 0.5 * np.log(s0 / s1)
    tau_p = 2.0 * (math.log(priors[0] / priors[1]) - R)
    return float(np.mean(_clt_pe_batch(mu0, v0, mu1, v1, tau_p, priors)))
