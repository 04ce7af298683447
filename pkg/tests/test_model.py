import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from ehdetect.errors import ConfigError
from ehdetect.model import (EnergyModel, Policy, SensorParams, amplitude_for_snr,
                            config_from_dict, consumed_units, derive_local_detector,
                            detection_prob, false_alarm_prob, load_config, policies_from_config,
                            snr_s, transmit_amplitude)


def _raw_config(**over):
    base = {
        "priors": [0.5, 0.5],
        "power_budget_P0": 0.002,
        "levels_L": 2,
        "energy": {"rho": 2, "capacity_K": 5, "b_u": 0.01, "T_s": 10},
        "sensors": [{"gamma_g": 2, "sigma_w2": 0.001, "sigma_v2": 1, "snr_s_db": 3,
                     "target_pd": 0.9, "repeat": 3}],
    }
    base.update(over)
    return base


def test_local_detector_hits_target(desk_sensor):
    det = derive_local_detector(desk_sensor)
    assert detection_prob(det.theta, desk_sensor) == pytest.approx(0.9, abs=1e-12)
    assert false_alarm_prob(det.theta, desk_sensor) == pytest.approx(det.pf, abs=1e-14)


@given(st.floats(0.05, 0.99), st.floats(0.1, 4.0), st.floats(0.2, 3.0))
def test_false_alarm_against_gaussian_llr(pd, A, sv2):
    # LLR = (A x - A^2/2)/sv2 with x ~ N(0, sv2) under H0
    s = SensorParams(1.0, 1e-3, sv2, A, pd)
    det = derive_local_detector(s)
    x_thr = (det.theta * sv2 + 0.5 * A * A) / A
    assert det.pf == pytest.approx(norm.sf(x_thr / math.sqrt(sv2)), rel=1e-9, abs=1e-15)
    assert det.pf < det.pd


def test_desk_transmit_probability(desk_sensor):
    det = derive_local_detector(desk_sensor)
    assert det.pf == pytest.approx(0.4477, abs=5e-4)
    assert det.transmit_prob((0.5, 0.5)) == pytest.approx(0.674, abs=1e-3)


def test_snr_round_trip():
    s = SensorParams(1.0, 1.0, 2.0, amplitude_for_snr(3.0, 2.0), 0.9)
    assert snr_s(s) == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("field,value", [("gamma_g", 0.0), ("sigma_w2", -1.0),
                                         ("signal_A", math.nan), ("target_pd", 1.0)])
def test_sensor_validation_names_field(field, value):
    kw = dict(gamma_g=1.0, sigma_w2=1.0, sigma_v2=1.0, signal_A=1.0, target_pd=0.9)
    kw[field] = value
    with pytest.raises(ConfigError) as exc:
        SensorParams(**kw)
    assert exc.value.path == field


def test_policy_validation():
    with pytest.raises(ConfigError):
        Policy((0.5, 0.5), (0.0, 1.0))
    with pytest.raises(ConfigError):
        Policy((0.5, 0.5), (0.0, 1.0, 1.0, math.inf))
    with pytest.raises(ConfigError):
        Policy((0.5, 0.5), (0.0, 2.0, 1.0))
    with pytest.raises(ConfigError):
        Policy((1.2,), (0.0, math.inf))
    with pytest.raises(ConfigError):
        Policy((0.2, 0.3), (0.1, 1.0, math.inf))


def test_consumption_floor_is_robust_to_rounding():
    # 0.29 * 100 evaluates to 28.999999999999996 in binary floating point
    assert consumed_units(0.29, 100) == 29
    pol = Policy((0.29,), (0.0, math.inf))
    assert pol.consumed_table(100)[0, 100] == 29
    tbl = Policy((0.1, 0.3, 0.5, 0.7), (0, 0.2, 1.4, 3.6, math.inf)).consumed_table(6)
    assert tbl.tolist() == [[0, 0, 0, 0, 0, 0, 0],
                            [0, 0, 0, 0, 1, 1, 1],
                            [0, 0, 1, 1, 2, 2, 3],
                            [0, 0, 1, 2, 2, 3, 4]]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.integers(1, 60))
def test_consumption_never_exceeds_state(scales, K):
    L = len(scales)
    pol = Policy.from_inner(scales, [0.5 * (i + 1) for i in range(L - 1)])
    tbl = pol.consumed_table(K)
    assert np.all(tbl <= np.arange(K + 1))
    assert np.all(tbl >= 0)


def test_transmit_amplitude_units(desk_energy):
    pol = Policy((0.4, 1.0), (0.0, 1.0, math.inf))
    for k in range(desk_energy.capacity_K + 1):
        for l in range(2):
            a = transmit_amplitude(pol, desk_energy, k, l)
            units = a * a * desk_energy.T_s / desk_energy.b_u
            assert units == pytest.approx(pol.consumed_table(5)[l, k], abs=1e-9)
    with pytest.raises(ValueError):
        transmit_amplitude(pol, desk_energy, 6, 0)


def test_power_per_unit():
    assert EnergyModel(2, 6, 0.01, 10).unit_power == pytest.approx(1e-3)
    with pytest.raises(ConfigError):
        EnergyModel(2, 0, 0.01, 10)
    with pytest.raises(ConfigError):
        EnergyModel(2, 2.5, 0.01, 10)


def test_config_expands_repeat_and_snr():
    cfg = config_from_dict(_raw_config())
    assert cfg.n_sensors == 3
    assert len(set(cfg.sensors)) == 1
    assert snr_s(cfg.sensors[0]) == pytest.approx(3.0)


@pytest.mark.parametrize("over,path", [
    ({"priors": [0.7, 0.7]}, "priors"),
    ({"power_budget_P0": 0}, "power_budget_P0"),
    ({"energy": {"rho": -1, "capacity_K": 5, "b_u": 0.01, "T_s": 10}}, "energy.rho"),
    ({"sensors": [{"gamma_g": 2, "sigma_w2": 1, "signal_A": 1, "target_pd": 1.3}]},
     "sensors[0].target_pd"),
    ({"sensors": []}, "sensors"),
])
def test_config_errors_carry_path(over, path):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(_raw_config(**over))
    assert exc.value.path == path


def test_missing_key_is_reported():
    raw = _raw_config()
    del raw["levels_L"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.path == "levels_L"


def test_yaml_loading_and_policies(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("""
priors: [0.5, 0.5]
power_budget_P0: 0.002
levels_L: 2
energy: {rho: 2, capacity_K: 5, b_u: 0.01, T_s: 10}
sensors: [{gamma_g: 2, sigma_w2: 0.001, snr_s_db: 3, target_pd: 0.9, repeat: 2}]
policy: {scales: [0.2, 1.0], thresholds: [0, 1.1, inf]}
""")
    cfg = load_config(p)
    import yaml
    pols = policies_from_config(yaml.safe_load(p.read_text()), cfg.n_sensors)
    assert pols[0] == Policy((0.2, 1.0), (0.0, 1.1, math.inf))
    assert Policy.from_dict(pols[0].to_dict()) == pols[0]
