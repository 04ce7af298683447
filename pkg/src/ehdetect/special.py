"""Gaussian tail function and exponential integrals.

Only ``math.erfc`` and a bracketed root finder are relied upon; the
exponential integral is computed here by series / continued fraction.
"""

import math

import numpy as np
from scipy.optimize import brentq

from .errors import NumericalError

EULER_GAMMA = 0.57721566490153286061

_SQRT2 = math.sqrt(2.0)


def qfunc(x):
    """Gaussian tail probability Q(x) = P(N(0,1) > x)."""
    return 0.5 * math.erfc(x / _SQRT2)


def qfunc_inv(p, tol=1e-12):
    """Inverse of :func:`qfunc` on (0, 1).

    Solved by Brent's method on a bracket wide enough for any double ``p``;
    the returned root satisfies ``|qfunc(x) - p| < tol``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"qfunc_inv needs p in (0, 1), got {p!r}")
    lo, hi = -40.0, 40.0
    x = brentq(lambda t: qfunc(t) - p, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
               maxiter=500)
    if abs(qfunc(x) - p) >= tol:
        raise NumericalError(f"qfunc_inv({p}) residual {qfunc(x) - p:.3e}")
    return x


def _e1_series(z):
    # E1(z) = -gamma - ln z - sum_{k>=1} (-z)^k / (k k!), fine for 0 < z <= 1
    total = np.zeros_like(z)
    term = np.ones_like(z)
    for k in range(1, 60):
        term = term * (-z) / k
        total = total + term / k
    return -EULER_GAMMA - np.log(z) - total


def _scaled_e1_cf(z, max_iter=500):
    # e^z E1(z) by modified Lentz on the even continued fraction; z > 1
    tiny = 1e-300
    b = z + 1.0
    c = np.full_like(z, 1.0 / tiny)
    d = 1.0 / b
    h = d.copy()
    done = np.zeros(z.shape, dtype=bool)
    for i in range(1, max_iter):
        a = -float(i * i)
        b = b + 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h = np.where(done, h, h * delta)
        done |= np.abs(delta - 1.0) < 1e-16
        if done.all():
            return h
    raise NumericalError("continued fraction for E1 did not converge")


def _scaled_e1_scalar(z):
    if z <= 1.0:
        total, term = 0.0, 1.0
        for k in range(1, 60):
            term *= -z / k
            total += term / k
        return math.exp(z) * (-EULER_GAMMA - math.log(z) - total)
    tiny = 1e-300
    b = z + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise NumericalError("continued fraction for E1 did not converge")


def scaled_e1(z):
    """Return ``exp(z) * E1(z)`` for ``z > 0`` (array or scalar).

    Stays finite for large ``z`` where ``E1`` alone underflows.
    """
    if isinstance(z, float) and z > 0:
        return _scaled_e1_scalar(z)
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValueError("scaled_e1 needs z > 0")
    out = np.empty_like(z)
    small = z <= 1.0
    if small.any():
        zs = z[small]
        out[small] = np.exp(zs) * _e1_series(zs)
    if (~small).any():
        out[~small] = _scaled_e1_cf(z[~small])
    return out if out.ndim else float(out)


def exp_integral_e1(z):
    """Exponential integral E1(z) for z > 0."""
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValueError("exp_integral_e1 needs z > 0")
    out = np.empty_like(z)
    small = z <= 1.0
    if small.any():
        out[small] = _e1_series(z[small])
    if (~small).any():
        zl = z[~small]
        out[~small] = np.exp(-zl) * _scaled_e1_cf(zl)
    return out if out.ndim else float(out)


def exp_integral_ei(x):
    """Exponential integral Ei(x) for negative real ``x``.

    Ei(x) = -E1(-x); only the negative half-line is supported.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x < 0)):
        raise ValueError("exp_integral_ei is only defined here for x < 0")
    out = -exp_integral_e1(-x)
    return out
