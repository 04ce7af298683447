"""Problem parameters, validation and local-detector quantities.

All power quantities are SI: Watts for powers, Joules for ``b_u``,
seconds for ``T_s``. Battery and consumption are counted in integer
energy units (cells); ``b_u / T_s`` converts units-per-slot into Watts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .special import qfunc, qfunc_inv

# guards floor(c * k) against products like 0.29 * 100 = 28.999999999999996
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class SensorParams:
    gamma_g: float
    sigma_w2: float
    sigma_v2: float
    signal_A: float
    target_pd: float

    def __post_init__(self):
        for name in ("gamma_g", "sigma_w2", "sigma_v2", "signal_A"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(name, f"must be a positive finite number, got {value!r}")
        if not 0.0 < self.target_pd < 1.0:
            raise ConfigError("target_pd", f"must lie in (0, 1), got {self.target_pd!r}")

    @property
    def amplitude_ratio(self):
        """Observation amplitude over noise standard deviation."""
        return self.signal_A / math.sqrt(self.sigma_v2)


@dataclass(frozen=True)
class EnergyModel:
    rho: float
    capacity_K: int
    b_u: float
    T_s: float

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigError("rho", f"must be positive, got {self.rho!r}")
        if isinstance(self.capacity_K, bool) or int(self.capacity_K) != self.capacity_K \
                or self.capacity_K < 1:
            raise ConfigError("capacity_K", f"must be an integer >= 1, got {self.capacity_K!r}")
        object.__setattr__(self, "capacity_K", int(self.capacity_K))
        if not self.b_u > 0:
            raise ConfigError("b_u", f"must be positive, got {self.b_u!r}")
        if not self.T_s > 0:
            raise ConfigError("T_s", f"must be positive, got {self.T_s!r}")

    @property
    def unit_power(self):
        """Watts corresponding to spending one energy unit per slot."""
        return self.b_u / self.T_s


@dataclass(frozen=True)
class Policy:
    """Scale factors ``c[0..L-1]`` and thresholds ``mu[0..L]`` (mu[0]=0, mu[L]=inf)."""

    scales: tuple
    thresholds: tuple

    def __post_init__(self):
        scales = tuple(float(c) for c in self.scales)
        thresholds = tuple(float(m) for m in self.thresholds)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "thresholds", thresholds)
        L = len(scales)
        if L < 1:
            raise ConfigError("scales", "need at least one scale factor")
        if len(thresholds) != L + 1:
            raise ConfigError("thresholds", f"need {L + 1} thresholds for {L} scales, "
                                            f"got {len(thresholds)}")
        if thresholds[0] != 0.0 or thresholds[-1] != math.inf:
            raise ConfigError("thresholds", "must start at 0 and end at inf")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("thresholds", "must be strictly increasing")
        for i, c in enumerate(scales):
            if not 0.0 <= c <= 1.0:
                raise ConfigError(f"scales[{i}]", f"must lie in [0, 1], got {c!r}")

    @property
    def levels(self):
        return len(self.scales)

    @classmethod
    def from_inner(cls, scales, inner_thresholds):
        """Build from scales and the L-1 interior thresholds."""
        return cls(tuple(scales), (0.0, *inner_thresholds, math.inf))

    def consumed_table(self, K):
        """Integer array ``[l, k] -> floor(c_l * k)`` for k = 0..K."""
        k = np.arange(K + 1)
        units = np.floor(np.outer(self.scales, k) + _FLOOR_EPS).astype(np.int64)
        return np.minimum(units, k)

    def to_dict(self):
        return {"scales": list(self.scales), "thresholds": [_enc_inf(m) for m in self.thresholds]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["scales"]), tuple(_dec_inf(m) for m in data["thresholds"]))


def _enc_inf(x):
    return "inf" if x == math.inf else x


def _dec_inf(x):
    return math.inf if x in ("inf", "Infinity", ".inf") else float(x)


@dataclass(frozen=True)
class LocalDetector:
    theta: float
    pd: float
    pf: float

    def transmit_prob(self, priors):
        """Probability that the sensor transmits, Pi0*pf + Pi1*pd."""
        return priors[0] * self.pf + priors[1] * self.pd


@dataclass(frozen=True)
class SolverSettings:
    """Grid / RRS knobs that the config file may set (all optional)."""

    n_c: int = 10
    n_mu: int = 20
    mu_max: float | None = None
    p: float = 0.99
    r: float = 0.1
    q2: int = 10
    q2_hybrid: int = 3
    rho0: int = 3


@dataclass(frozen=True)
class NetworkConfig:
    sensors: tuple
    priors: tuple
    power_budget_P0: float
    levels_L: int
    energy: EnergyModel
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "priors", tuple(float(p) for p in self.priors))
        if len(self.sensors) < 1:
            raise ConfigError("sensors", "need at least one sensor")
        if len(self.priors) != 2 or not all(0.0 < p < 1.0 for p in self.priors) \
                or abs(sum(self.priors) - 1.0) > 1e-12:
            raise ConfigError("priors", f"must be two values in (0,1) summing to 1, "
                                        f"got {self.priors!r}")
        if not self.power_budget_P0 > 0:
            raise ConfigError("power_budget_P0", f"must be positive, got {self.power_budget_P0!r}")
        if int(self.levels_L) != self.levels_L or self.levels_L < 1:
            raise ConfigError("levels_L", f"must be an integer >= 1, got {self.levels_L!r}")

    @property
    def n_sensors(self):
        return len(self.sensors)

    def with_changes(self, **kwargs):
        return replace(self, **kwargs)


def derive_local_detector(s: SensorParams) -> LocalDetector:
    """Threshold and false-alarm rate that pin the detection rate at ``target_pd``."""
    if not 0.0 < s.target_pd < 1.0:
        raise ConfigError("target_pd", f"must lie in (0, 1), got {s.target_pd!r}")
    d = s.amplitude_ratio
    qi = qfunc_inv(s.target_pd)
    theta = qi * d + 0.5 * d * d
    pf = qfunc(qi + d)
    return LocalDetector(theta=theta, pd=s.target_pd, pf=pf)


def detection_prob(theta, s: SensorParams):
    """Forward detection probability for a given LLR threshold."""
    d = s.amplitude_ratio
    return qfunc((theta - 0.5 * d * d) / d)


def false_alarm_prob(theta, s: SensorParams):
    d = s.amplitude_ratio
    return qfunc((theta + 0.5 * d * d) / d)


def snr_s(s: SensorParams) -> float:
    """Observation SNR in dB, 20 log10(A / sigma_v)."""
    return 20.0 * math.log10(s.amplitude_ratio)


def amplitude_for_snr(snr_db, sigma_v2=1.0):
    """Signal amplitude giving the requested observation SNR."""
    return math.sqrt(sigma_v2) * 10.0 ** (snr_db / 20.0)


def consumed_units(scale, k):
    return min(int(math.floor(scale * k + _FLOOR_EPS)), k)


def transmit_amplitude(policy: Policy, energy: EnergyModel, k: int, l: int) -> float:
    """Amplitude sqrt(floor(c_l k) b_u / T_s) sent in battery state k, interval l."""
    if not 0 <= k <= energy.capacity_K:
        raise ValueError(f"battery state {k} outside 0..{energy.capacity_K}")
    if not 0 <= l < policy.levels:
        raise ValueError(f"interval index {l} outside 0..{policy.levels - 1}")
    units = consumed_units(policy.scales[l], k)
    return math.sqrt(units * energy.unit_power)


# ---------------------------------------------------------------------------
# config files

def _require(mapping, key, path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required entry")
    return mapping[key]


def _build(ctor, kwargs, path):
    try:
        return ctor(**kwargs)
    except ConfigError as exc:
        sub = ".".join(p for p in (path, exc.path) if p)
        raise ConfigError(sub, str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def _sensor_from_dict(entry, path):
    entry = dict(entry)
    entry.pop("repeat", None)
    if "snr_s_db" in entry:
        if "signal_A" in entry:
            raise ConfigError(path, "give either signal_A or snr_s_db, not both")
        entry["signal_A"] = amplitude_for_snr(float(entry.pop("snr_s_db")),
                                              float(entry.get("sigma_v2", 1.0)))
    entry.setdefault("sigma_v2", 1.0)
    return _build(SensorParams, {k: (float(v) if isinstance(v, (int, float)) else v)
                                 for k, v in entry.items()}, path)


def config_from_dict(data: dict) -> NetworkConfig:
    """Validate a parsed config mapping and build a :class:`NetworkConfig`.

    Sensors may carry ``repeat: n`` to stand for n identical entries and may
    give ``snr_s_db`` in place of ``signal_A``. Raises :class:`ConfigError`
    naming the first violated entry.
    """
    if not isinstance(data, dict):
        raise ConfigError("", "config root must be a mapping")
    energy_d = _require(data, "energy", "")
    if not isinstance(energy_d, dict):
        raise ConfigError("energy", "must be a mapping")
    energy = _build(EnergyModel, dict(energy_d), "energy")

    raw_sensors = _require(data, "sensors", "")
    if not isinstance(raw_sensors, list) or not raw_sensors:
        raise ConfigError("sensors", "must be a non-empty list")
    sensors = []
    for i, entry in enumerate(raw_sensors):
        path = f"sensors[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(path, "must be a mapping")
        repeat = entry.get("repeat", 1)
        if int(repeat) != repeat or repeat < 1:
            raise ConfigError(f"{path}.repeat", f"must be an integer >= 1, got {repeat!r}")
        sensors.extend([_sensor_from_dict(entry, path)] * int(repeat))

    solver = _build(SolverSettings, dict(data.get("solver") or {}), "solver")
    return _build(NetworkConfig, dict(
        sensors=tuple(sensors),
        priors=tuple(data.get("priors", (0.5, 0.5))),
        power_budget_P0=float(_require(data, "power_budget_P0", "")),
        levels_L=_require(data, "levels_L", ""),
        energy=energy,
        solver=solver,
    ), "")


def load_config(path) -> NetworkConfig:
    """Read a YAML config file into a validated :class:`NetworkConfig`."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return config_from_dict(data)


def policies_from_config(data: dict, n_sensors: int) -> list[Policy] | None:
    """Optional fixed ``policy`` / ``policies`` section of a config mapping."""
    if "policies" in data:
        pols = [Policy.from_dict(p) for p in data["policies"]]
        if len(pols) != n_sensors:
            raise ConfigError("policies", f"need {n_sensors} entries, got {len(pols)}")
        return pols
    if "policy" in data:
        return [Policy.from_dict(data["policy"])] * n_sensors
    return None
