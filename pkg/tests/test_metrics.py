import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfisac import metrics
from cfisac.experiments import random_allocation
from cfisac.metrics import Allocation
from cfisac.scenario import ChannelStats, SystemConfig, array_gain_table, make_scenario


def literal_sinrs(stats, alloc, rho):
    """Closed forms evaluated term by term in eta units (second route)."""
    M, K, L, N = stats.M, stats.K, stats.L, stats.N
    a, ec, es = alloc.a, alloc.eta_c, alloc.eta_s
    b, g, z, G = stats.beta, stats.gamma, stats.zeta, stats.array_gain
    user = np.empty(K)
    for k in range(K):
        num = (N * sum(math.sqrt(a[m] * rho * ec[m, k]) * g[m, k] for m in range(M))) ** 2
        den = 1.0
        for m in range(M):
            den += N * sum(a[m] * rho * ec[m, kk] * b[m, k] * g[m, kk] for kk in range(K))
            den += N * sum((1 - a[m]) * rho * es[m, l] * b[m, k] for l in range(L))
        user[k] = num / den
    eav, masr = np.empty(L), np.empty(L)
    for l in range(L):
        num = N * sum(a[m] * rho * ec[m, k] * z[m, l] * g[m, k] for m in range(M) for k in range(K))
        den = 1.0 + sum((1 - a[m]) * rho * es[m, j] * z[m, l] * G[m, l, j] for m in range(M) for j in range(L))
        eav[l] = num / den
        num = N * N * sum((1 - a[m]) * es[m, l] * z[m, l] for m in range(M))
        den = N * sum(a[m] * ec[m, k] * z[m, l] * g[m, k] for m in range(M) for k in range(K))
        den += sum((1 - a[m]) * es[m, j] * z[m, l] * G[m, l, j] for m in range(M) for j in range(L) if j != l)
        masr[l] = num / den if den > 0 else (math.inf if num > 0 else 0.0)
    return user, eav, masr


def single_stats(beta=0.8, gamma=0.5, zeta=(0.3,), theta=(0.2,), N=4):
    zeta = np.array([list(zeta)])
    theta = np.array([list(theta)])
    return ChannelStats(np.array([[beta]]), np.array([[gamma]]), zeta, theta,
                        array_gain_table(theta, N), N)


def test_user_sinr_single_link_reduction():
    s = single_stats()
    eta, rho, N = 0.3, 2.0, s.N
    alloc = Allocation(np.array([1.0]), np.array([[eta]]), np.array([[0.0]]))
    expected = N**2 * rho * eta * 0.5**2 / (N * rho * eta * 0.8 * 0.5 + 1)
    assert metrics.sinr_user(s, alloc, 0, SystemConfig(M=1, K=1, L=1, N=4, rho=rho)) == pytest.approx(expected)


def test_zero_comm_power_gives_zero_sinrs(desk, desk_stats):
    alloc = Allocation(np.full(desk.M, 0.5), np.zeros((desk.M, desk.K)), np.full((desk.M, desk.L), 0.01))
    assert np.all(metrics.user_sinrs(desk_stats, alloc, desk) == 0.0)
    assert np.all(metrics.eav_sinrs(desk_stats, alloc, desk) == 0.0)


def test_eav_without_sensing_is_linear(desk, desk_stats, rng):
    ec = rng.uniform(0, 1, (desk.M, desk.K)) / (desk.N * desk.K * desk_stats.gamma)
    a = np.ones(desk.M)
    one = metrics.eav_sinrs(desk_stats, Allocation(a, ec, np.zeros((desk.M, desk.L))), desk)
    two = metrics.eav_sinrs(desk_stats, Allocation(a, 2 * ec, np.zeros((desk.M, desk.L))), desk)
    np.testing.assert_allclose(two, 2 * one)
    z, g = desk_stats.zeta, desk_stats.gamma
    np.testing.assert_allclose(one, desk.N * desk.rho * np.einsum("mk,ml,mk->l", ec, z, g))


def test_masr_conventions(desk, desk_stats):
    M, K, L = desk.M, desk.K, desk.L
    all_comm = Allocation(np.ones(M), np.full((M, K), 1e-3), np.full((M, L), 1e-3))
    assert np.all(metrics.masrs(desk_stats, all_comm) == 0.0)
    s = single_stats()
    only_sense = Allocation(np.zeros(1), np.zeros((1, 1)), np.array([[0.2]]))
    assert metrics.masr(s, only_sense, 0) == math.inf
    nothing = Allocation(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)))
    assert metrics.masr(s, nothing, 0) == 0.0


def test_masr_two_zone_hand_value():
    s = single_stats(zeta=(0.3, 0.7), theta=(0.1, 0.9), N=4)
    es = np.array([[0.15, 0.05]])
    alloc = Allocation(np.zeros(1), np.zeros((1, 1)), es)
    G = s.array_gain[0]
    assert metrics.masr(s, alloc, 0) == pytest.approx(16 * 0.15 * 0.3 / (0.05 * 0.3 * G[0, 1]))
    assert metrics.masr(s, alloc, 1) == pytest.approx(16 * 0.05 * 0.7 / (0.15 * 0.7 * G[1, 0]))


@pytest.mark.parametrize("seed", range(5))
def test_closed_forms_match_literal_evaluation(desk, seed):
    _, s = make_scenario(desk, seed)
    alloc = random_allocation(s, np.random.default_rng(seed))
    u, e, m = literal_sinrs(s, alloc, desk.rho)
    np.testing.assert_allclose(metrics.user_sinrs(s, alloc, desk), u, rtol=1e-12)
    np.testing.assert_allclose(metrics.eav_sinrs(s, alloc, desk), e, rtol=1e-12)
    np.testing.assert_allclose(metrics.masrs(s, alloc), m, rtol=1e-12)


def test_secrecy_arithmetic():
    np.testing.assert_allclose(metrics.secrecy_from_rates(np.log2([4.0]), np.log2([2.0, 1.5])), [1.0])
    assert metrics.secrecy_from_rates(np.array([1.0]), np.array([2.0]))[0] == 0.0


def test_rates_and_secrecy_report(desk, desk_stats):
    alloc = metrics.average_baseline(desk_stats, desk)
    rep = metrics.rates_and_secrecy(desk_stats, alloc, desk, prelog=False)
    np.testing.assert_allclose(rep.rate_user, np.log2(1 + rep.sinr_user))
    np.testing.assert_allclose(rep.secrecy, np.maximum(0, rep.rate_user - rep.rate_eav.max()))
    u, e, m = literal_sinrs(desk_stats, alloc, desk.rho)
    np.testing.assert_allclose(rep.sinr_user, u, rtol=1e-12)
    np.testing.assert_allclose(rep.sinr_eav, e, rtol=1e-12)
    pre = metrics.rates_and_secrecy(desk_stats, alloc, desk, prelog=True)
    np.testing.assert_allclose(pre.rate_user, (1 - desk.tau_t / desk.tau) * rep.rate_user)


def test_violations_listed(desk, desk_stats):
    alloc = metrics.average_baseline(desk_stats, desk)
    rep = metrics.rates_and_secrecy(desk_stats, alloc, desk, nu=1e-9, kappa=1e9, varsigma=1e9,
                                    check_qos=True)
    names = {v.name for v in rep.violations}
    assert {"eav_sinr", "masr", "user_sinr"} <= names
    hot = Allocation(alloc.a, 2 * alloc.eta_c, 2 * alloc.eta_s)
    assert any(v.name == "ap_power" for v in metrics.feasibility_check(desk_stats, hot, desk))


def test_average_baseline_construction(desk, desk_stats):
    alloc = metrics.average_baseline(desk_stats, desk)
    np.testing.assert_allclose(metrics.ap_power(desk_stats, alloc), 1.0, rtol=1e-12)
    assert set(np.unique(alloc.a)) <= {0.0, 1.0}
    order = np.argsort(-desk_stats.gamma.sum(axis=1), kind="stable")
    assert np.all(alloc.a[order[: desk.M // 2]] == 1.0)
    big = SystemConfig.paper_scale()
    _, s = make_scenario(big, 1)
    assert metrics.average_baseline(s, big).a.sum() == 16
    viol = metrics.feasibility_check(desk_stats, alloc, desk, nu=math.inf, kappa=1e-12)
    assert viol == []
    with pytest.raises(ValueError):
        metrics.average_baseline(desk_stats, desk, mode_split=1.0)


def test_fraction_round_trip(desk_stats, rng):
    alloc = random_allocation(desk_stats, rng)
    p, r = alloc.fractions(desk_stats)
    back = Allocation.from_fractions(desk_stats, alloc.a, p, r)
    np.testing.assert_allclose(back.eta_c, alloc.eta_c)
    np.testing.assert_allclose(back.eta_s, alloc.eta_s)
    with pytest.raises(ValueError):
        Allocation(np.array([np.nan]), np.zeros((1, 1)), np.zeros((1, 1)))


def test_mc_exact_zero_and_unit_denominator(desk, desk_stats):
    M, K, L = desk.M, desk.K, desk.L
    zero = Allocation(np.ones(M), np.zeros((M, K)), np.zeros((M, L)))
    est, _ = metrics.mc_user_sinrs(desk_stats, zero, desk, 2000, 0)
    assert np.all(est == 0.0)
    est, _ = metrics.mc_eav_sinrs(desk_stats, zero, desk, 2000, 0)
    assert np.all(est == 0.0)
    # all communication: no sensing interference, so the eavesdropper
    # SINR is the desired-signal power alone
    comm = Allocation(np.ones(M), np.full((M, K), 0.5) / (desk.N * K * desk_stats.gamma), np.zeros((M, L)))
    est, se = metrics.mc_eav_sinrs(desk_stats, comm, desk, 20000, 1)
    closed = metrics.eav_sinrs(desk_stats, comm, desk)
    assert np.all(np.abs(est - closed) <= 4 * se)


@pytest.mark.parametrize("seed", range(3))
def test_mc_agrees_with_closed_form(desk, seed):
    _, s = make_scenario(desk, 100 + seed)
    alloc = random_allocation(s, np.random.default_rng(seed))
    mu, su = metrics.mc_user_sinrs(s, alloc, desk, 40000, seed)
    me, se = metrics.mc_eav_sinrs(s, alloc, desk, 40000, seed + 7)
    assert np.all(np.abs(mu - metrics.user_sinrs(s, alloc, desk)) <= 3.5 * su)
    assert np.all(np.abs(me - metrics.eav_sinrs(s, alloc, desk)) <= 3.5 * se)


def test_mc_is_deterministic(desk, desk_stats, rng):
    alloc = random_allocation(desk_stats, rng)
    a = metrics.mc_user_sinrs(desk_stats, alloc, desk, 3000, 5)
    b = metrics.mc_user_sinrs(desk_stats, alloc, desk, 3000, 5)
    np.testing.assert_array_equal(a[0], b[0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1.0, 5.0))
def test_user_sinr_monotone_under_common_comm_scaling(seed, scale):
    cfg = SystemConfig(K=1)
    _, s = make_scenario(cfg, seed)
    alloc = random_allocation(s, np.random.default_rng(seed))
    before = metrics.user_sinrs(s, alloc, cfg)[0]
    after = metrics.user_sinrs(s, Allocation(alloc.a, scale * alloc.eta_c, alloc.eta_s), cfg)[0]
    assert after >= before * (1 - 1e-12)


def test_single_ap_power_increase_can_lower_sinr():
    # raising one AP's power adds more to the beamforming-uncertainty term
    # than to the coherent signal once the other APs dominate the signal
    cfg = SystemConfig(K=1)
    _, s = make_scenario(cfg, 255)
    alloc = random_allocation(s, np.random.default_rng(255))
    ec = alloc.eta_c.copy()
    ec[0, 0] *= 3.0
    before = metrics.user_sinrs(s, alloc, cfg)[0]
    after = metrics.user_sinrs(s, Allocation(alloc.a, ec, alloc.eta_s), cfg)[0]
    assert after < before
    u, _, _ = literal_sinrs(s, Allocation(alloc.a, ec, alloc.eta_s), cfg.rho)
    assert u[0] == pytest.approx(after, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_report_invariants(seed):
    cfg = SystemConfig()
    _, s = make_scenario(cfg, seed)
    alloc = random_allocation(s, np.random.default_rng(seed))
    rep = metrics.rates_and_secrecy(s, alloc, cfg)
    assert np.all(rep.rate_user >= 0) and np.all(rep.rate_eav >= 0)
    np.testing.assert_allclose(rep.secrecy, np.maximum(0, rep.rate_user - rep.rate_eav.max()))
    assert np.all(metrics.ap_power(s, alloc) <= 1 + 1e-12)
