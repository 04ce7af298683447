import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ehdetect.battery import (BatteryChain, battery_stats, build_chain, clipped_poisson,
                              dump_chain_csv, interval_probs, is_valid_distribution,
                              mean_consumption_units, next_state, stationary_closed_form,
                              stationary_power_iteration, transition_matrix)
from ehdetect.errors import ChainError
from ehdetect.model import Policy

POLICY_A = Policy((0.1, 0.3, 0.5, 0.7), (0.0, 0.2, 1.4, 3.6, math.inf))


def brute_force_psi(policy, rho, K, gamma, pi_hat1):
    # enumerate (interval, arrivals) outcomes one at a time
    q = [math.exp(-rho) * rho ** s / math.factorial(s) for s in range(K)]
    q.append(1.0 - sum(q))
    mu = policy.thresholds
    pi = [math.exp(-mu[l] ** 2 / gamma) - (0.0 if mu[l + 1] == math.inf
                                            else math.exp(-mu[l + 1] ** 2 / gamma))
          for l in range(policy.levels)]
    psi = np.zeros((K + 1, K + 1))
    for i in range(K + 1):
        for s in range(K + 1):
            psi[i, next_state(i, s, 0, K)] += (1 - pi_hat1) * q[s]
            for l in range(policy.levels):
                d = int(math.floor(policy.scales[l] * i + 1e-9))
                psi[i, next_state(i, s, d, K)] += pi_hat1 * pi[l] * q[s]
    return psi


def random_policy(draw, K):
    L = draw(st.integers(1, 4))
    scales = draw(st.lists(st.floats(0, 1), min_size=L, max_size=L))
    inner = sorted(set(draw(st.lists(st.floats(0.01, 4), min_size=L - 1, max_size=L - 1))))
    if len(inner) != L - 1:
        inner = [0.5 * (i + 1) for i in range(L - 1)]
    return Policy.from_inner(scales, inner)


@st.composite
def chain_inputs(draw):
    K = draw(st.integers(1, 20))
    pol = random_policy(draw, K)
    rho = draw(st.floats(0.05, 15))
    gamma = draw(st.floats(0.1, 5))
    pi_hat1 = draw(st.floats(0, 1))
    return pol, rho, K, gamma, pi_hat1


def test_clipped_poisson_formula():
    q = clipped_poisson(2.0, 6)
    ref = [math.exp(-2) * 2 ** k / math.factorial(k) for k in range(6)]
    assert np.allclose(q[:6], ref, rtol=1e-14)
    assert q.sum() == pytest.approx(1.0, abs=1e-15)
    assert q[6] == pytest.approx(1 - sum(ref), abs=1e-15)
    with pytest.raises(ValueError):
        clipped_poisson(0.0, 3)


def test_interval_probs_sum_to_one():
    pi = interval_probs(1.0, POLICY_A.thresholds)
    assert pi.sum() == pytest.approx(1.0, abs=1e-15)
    assert pi[0] == pytest.approx(1 - math.exp(-0.04))


def test_next_state_rules():
    assert next_state(3, 2, 1, 4) == 4
    assert next_state(0, 0, 0, 4) == 0
    with pytest.raises(ValueError):
        next_state(1, 0, 2, 4)


@given(chain_inputs())
def test_transition_matrix_matches_enumeration(args):
    pol, rho, K, gamma, pi_hat1 = args
    psi = transition_matrix(pol, clipped_poisson(rho, K), interval_probs(gamma, pol.thresholds),
                            pi_hat1)
    assert np.allclose(psi, brute_force_psi(pol, rho, K, gamma, pi_hat1), atol=1e-13)
    assert np.allclose(psi.sum(axis=1), 1.0, atol=1e-12)


@given(chain_inputs())
def test_stationary_solutions_agree(args):
    pol, rho, K, gamma, pi_hat1 = args
    chain = build_chain(pol, clipped_poisson(rho, K), interval_probs(gamma, pol.thresholds),
                        pi_hat1)
    assert chain.residual() < 1e-10
    assert is_valid_distribution(chain.phi, 1e-10)
    assert np.max(np.abs(stationary_power_iteration(chain.psi) - chain.phi)) < 1e-8


def test_never_transmit_concentrates_at_full():
    chain = build_chain(POLICY_A, clipped_poisson(2, 6), interval_probs(1, POLICY_A.thresholds), 0)
    assert chain.phi[-1] == pytest.approx(1.0, abs=1e-12)
    silent = Policy((0, 0, 0, 0), POLICY_A.thresholds)
    chain = build_chain(silent, clipped_poisson(2, 6), interval_probs(1, silent.thresholds), 1)
    assert battery_stats(chain) == pytest.approx((6.0, 0.0, 1.0), abs=1e-12)


def test_empty_state_unreachable_under_floor_rule():
    # floor(c k) < k for c < 1, so no transition leaves a positive battery empty
    pol = Policy((0.5, 0.7, 0.9), (0.0, 0.8, 1.2, math.inf))
    chain = build_chain(pol, clipped_poisson(10, 50), interval_probs(1, pol.thresholds), 1)
    assert np.all(chain.psi[1:, 0] == 0)
    assert chain.phi[0] == pytest.approx(0.0, abs=1e-12)


def test_singular_system_raises():
    with pytest.raises(ChainError):
        # two closed classes: stationary law is not unique
        stationary_closed_form(np.eye(3))


def test_row_sum_check_in_build():
    # build_chain validates rows; a broken matrix fed to the residual check fails too
    psi = transition_matrix(POLICY_A, clipped_poisson(2, 6),
                            interval_probs(1, POLICY_A.thresholds), 1.0)
    bad = BatteryChain(psi * 0.9, stationary_closed_form(psi))
    assert bad.residual() > 1e-3


def test_mean_consumption_and_dump(tmp_path):
    pi = interval_probs(1, POLICY_A.thresholds)
    chain = build_chain(POLICY_A, clipped_poisson(2, 6), pi, 1.0)
    brute = sum(pi[l] * chain.phi[k] * math.floor(POLICY_A.scales[l] * k + 1e-9)
                for l in range(4) for k in range(7))
    assert mean_consumption_units(POLICY_A, chain.phi, pi) == pytest.approx(brute, rel=1e-14)
    dump_chain_csv(chain, tmp_path, "s0")
    rows = list(csv.reader(open(tmp_path / "s0_psi.csv")))
    assert np.array_equal(np.array(rows, dtype=float), chain.psi)
    phi_rows = list(csv.reader(open(tmp_path / "s0_phi.csv")))[1:]
    assert np.array_equal(np.array([r[1] for r in phi_rows], dtype=float), chain.phi)
