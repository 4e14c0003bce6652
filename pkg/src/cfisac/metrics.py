"""Closed-form user/eavesdropper SINR, MASR, secrecy and their Monte Carlo oracle.

Internally every allocation is handled through its per-AP power *fractions*
``p[m, k] = N * eta_c[m, k] * gamma[m, k]`` and ``r[m, l] = N * eta_s[m, l]``,
which live in [0, 1] regardless of the path loss.  The ``*_core`` functions
accept arbitrary leading batch dimensions on ``a``, ``p`` and ``r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import ChannelStats, SystemConfig, array_response

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class Allocation:
    a: np.ndarray  # (M,) AP mode, 1 = communication
    eta_c: np.ndarray  # (M, K)
    eta_s: np.ndarray  # (M, L)

    def __post_init__(self):
        for name in ("a", "eta_c", "eta_s"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_fractions(cls, stats: ChannelStats, a, p, r) -> "Allocation":
        N = stats.N
        g = stats.gamma
        with np.errstate(divide="ignore", invalid="ignore"):
            eta_c = np.where(g > 0, np.asarray(p, float) / (N * np.where(g > 0, g, 1.0)), 0.0)
        return cls(np.asarray(a, float), eta_c, np.asarray(r, float) / N)

    def fractions(self, stats: ChannelStats):
        return self.eta_c * stats.N * stats.gamma, self.eta_s * stats.N

    def binary_residual(self) -> float:
        return float(np.max(np.minimum(self.a, 1.0 - self.a)))


@dataclass(frozen=True)
class Violation:
    name: str
    index: int
    magnitude: float


@dataclass
class RateReport:
    sinr_user: np.ndarray
    sinr_eav: np.ndarray
    masr: np.ndarray
    rate_user: np.ndarray
    rate_eav: np.ndarray
    secrecy: np.ndarray
    violations: list[Violation] = field(default_factory=list)

    @property
    def secrecy_mean(self) -> float:
        return float(np.mean(self.secrecy))

    def csv_row(self, seed, strategy: str) -> dict:
        row = {"seed": seed, "strategy": strategy}
        for k, v in enumerate(self.rate_user):
            row[f"rate_user_{k}"] = float(v)
        for l, v in enumerate(self.rate_eav):
            row[f"rate_eav_{l}"] = float(v)
        for l, v in enumerate(self.masr):
            row[f"masr_{l}"] = float(v)
        for k, v in enumerate(self.secrecy):
            row[f"secrecy_{k}"] = float(v)
        row["violations"] = len(self.violations)
        return row


# -- closed forms on power fractions ----------------------------------------

def user_sinr_core(stats: ChannelStats, rho: float, a, p, r):
    a = np.asarray(a, float)[..., :, None]  # (..., M, 1)
    root = np.sqrt(np.clip(a * p, 0.0, None) * stats.gamma)  # (..., M, K)
    num = rho * stats.N * root.sum(axis=-2) ** 2
    P = np.sum(p, axis=-1, keepdims=True)  # (..., M, 1)
    R = np.sum(r, axis=-1, keepdims=True)
    den = rho * np.sum(stats.beta * (a * P + (1.0 - a) * R), axis=-2) + 1.0
    return num / den


def _cross_sensing(stats: ChannelStats, r, exclude_self: bool):
    # E[..., m, l] = sum_l' r[m, l'] G[m, l, l'] / N
    G = stats.array_gain
    if exclude_self:
        L = G.shape[-1]
        G = G * (1.0 - np.eye(L))
    return np.einsum("...mj,mlj->...ml", r, G) / stats.N


def eav_sinr_core(stats: ChannelStats, rho: float, a, p, r):
    a = np.asarray(a, float)[..., :, None]
    P = np.sum(p, axis=-1, keepdims=True)
    E = _cross_sensing(stats, r, exclude_self=False)
    num = rho * np.sum(a * stats.zeta * P, axis=-2)
    den = rho * np.sum((1.0 - a) * stats.zeta * E, axis=-2) + 1.0
    return num / den


def masr_core(stats: ChannelStats, a, p, r):
    a = np.asarray(a, float)[..., :, None]
    P = np.sum(p, axis=-1, keepdims=True)
    Ex = _cross_sensing(stats, r, exclude_self=True)
    num = stats.N * np.sum((1.0 - a) * r * stats.zeta, axis=-2)
    den = np.sum(a * stats.zeta * P + (1.0 - a) * stats.zeta * Ex, axis=-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    return out


# -- public metrics ---------------------------------------------------------

def _split(stats: ChannelStats, alloc: Allocation):
    p, r = alloc.fractions(stats)
    return alloc.a, p, r


def user_sinrs(stats: ChannelStats, alloc: Allocation, config: SystemConfig) -> np.ndarray:
    return user_sinr_core(stats, config.rho, *_split(stats, alloc))


def eav_sinrs(stats: ChannelStats, alloc: Allocation, config: SystemConfig) -> np.ndarray:
    return eav_sinr_core(stats, config.rho, *_split(stats, alloc))


def masrs(stats: ChannelStats, alloc: Allocation, config: SystemConfig | None = None) -> np.ndarray:
    return masr_core(stats, *_split(stats, alloc))


def sinr_user(stats, alloc, k: int, config) -> float:
    return float(user_sinrs(stats, alloc, config)[k])


def sinr_eav(stats, alloc, l: int, config) -> float:
    return float(eav_sinrs(stats, alloc, config)[l])


def masr(stats, alloc, l: int, config=None) -> float:
    return float(masrs(stats, alloc)[l])


def ap_power(stats: ChannelStats, alloc: Allocation) -> np.ndarray:
    """Normalized per-AP transmit power (budget 1)."""
    p, r = alloc.fractions(stats)
    return alloc.a * p.sum(axis=1) + (1.0 - alloc.a) * r.sum(axis=1)


def feasibility_check(stats: ChannelStats, alloc: Allocation, config: SystemConfig, *,
                      nu: float | None = None, kappa: float | None = None,
                      varsigma: float | None = None, check_qos: bool = False,
                      tol: float = FEAS_TOL) -> list[Violation]:
    """List every constraint breach beyond ``tol`` (absolute).

    Checks the per-AP budget, the modal budgets of the binary problem, the
    eavesdropper cap, the MASR floor and, when asked, the user SINR floor.
    """
    nu = config.nu if nu is None else nu
    kappa = config.kappa if kappa is None else kappa
    varsigma = config.varsigma if varsigma is None else varsigma
    out: list[Violation] = []
    p, r = alloc.fractions(stats)
    for name, arr in (("a_range", np.maximum(-alloc.a, alloc.a - 1.0)),
                      ("eta_c_negative", -alloc.eta_c.min(axis=1)),
                      ("eta_s_negative", -alloc.eta_s.min(axis=1)),
                      ("ap_power", ap_power(stats, alloc) - 1.0),
                      ("comm_budget", p.sum(axis=1) - alloc.a),
                      ("sensing_budget", r.sum(axis=1) - (1.0 - alloc.a))):
        for i, v in enumerate(np.atleast_1d(arr)):
            if v > tol:
                out.append(Violation(name, i, float(v)))
    for l, v in enumerate(eav_sinrs(stats, alloc, config)):
        if v > nu + tol:
            out.append(Violation("eav_sinr", l, float(v - nu)))
    for l, v in enumerate(masrs(stats, alloc)):
        if v < kappa - tol:
            out.append(Violation("masr", l, float(kappa - v)))
    if check_qos:
        for k, v in enumerate(user_sinrs(stats, alloc, config)):
            if v < varsigma - tol:
                out.append(Violation("user_sinr", k, float(varsigma - v)))
    return out


def rates_and_secrecy(stats: ChannelStats, alloc: Allocation, config: SystemConfig, *,
                      check_qos: bool = False, prelog: bool = False,
                      tol: float = FEAS_TOL, **thresholds) -> RateReport:
    su = user_sinrs(stats, alloc, config)
    se = eav_sinrs(stats, alloc, config)
    factor = 1.0 - config.tau_t / config.tau if prelog else 1.0
    ru = factor * np.log2(1.0 + su)
    re = factor * np.log2(1.0 + se)
    secrecy = np.maximum(0.0, ru - re.max())
    violations = feasibility_check(stats, alloc, config, check_qos=check_qos, tol=tol, **thresholds)
    return RateReport(su, se, masrs(stats, alloc), ru, re, secrecy, violations)


def secrecy_from_rates(rate_user, rate_eav) -> np.ndarray:
    return np.maximum(0.0, np.asarray(rate_user) - np.max(rate_eav))


def average_baseline(stats: ChannelStats, config: SystemConfig, mode_split: float = 0.5) -> Allocation:
    """Equal-power baseline: the strongest APs communicate, the rest sense."""
    if not 0.0 < mode_split < 1.0:
        raise ValueError("mode_split must lie in (0, 1)")
    M, K, L = stats.M, stats.K, stats.L
    n_comm = math.ceil(mode_split * M)
    order = np.argsort(-stats.gamma.sum(axis=1), kind="stable")
    a = np.zeros(M)
    a[order[:n_comm]] = 1.0
    p = np.where(stats.gamma > 0, 1.0 / K, 0.0) * a[:, None]
    r = np.full((M, L), 1.0 / L) * (1.0 - a)[:, None]
    return Allocation.from_fractions(stats, a, p, r)


# -- Monte Carlo oracle -----------------------------------------------------

_CHUNK = 5000


def _cn(rng, shape, var):
    std = np.sqrt(np.asarray(var, float) / 2.0)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * std


def _chunks(trials: int, seed):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_chunks = -(-trials // _CHUNK)
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    for i, ss in enumerate(seqs):
        yield min(_CHUNK, trials - i * _CHUNK), np.random.default_rng(ss)


class _Moments:
    """Running first/second moments of a small real feature vector."""

    def __init__(self, dim):
        self.n = 0
        self.s1 = np.zeros(dim)
        self.s2 = np.zeros((dim, dim))

    def add(self, x):  # x: (n, dim)
        self.n += x.shape[0]
        self.s1 += x.sum(axis=0)
        self.s2 += x.T @ x

    def mean_cov(self):
        mu = self.s1 / self.n
        return mu, self.s2 / self.n - np.outer(mu, mu)


def _sample_user_terms(stats, config, alloc, n, rng):
    """Per-trial (effective gain, interference power) for every user.

    Returns ``z`` (n, K) complex and ``w`` (n, K) real where ``z[:, k]`` is
    the coherent term sum_m sqrt(a rho eta) g^H ghat and ``w`` collects the
    inter-user and sensing interference powers.
    """
    M, K, L, N = stats.M, stats.K, stats.L, stats.N
    rho = config.rho
    g_hat = _cn(rng, (n, M, K, N), stats.gamma[None, :, :, None])
    err = _cn(rng, (n, M, K, N), (stats.beta - stats.gamma)[None, :, :, None])
    g = g_hat + err
    # inner[t, m, k, k'] = g_mk^H ghat_mk'
    inner = np.einsum("tmkn,tmjn->tmkj", g.conj(), g_hat)
    amp_c = np.sqrt(alloc.a[:, None] * rho * alloc.eta_c)  # (M, K)
    per_k = np.einsum("tmkj,mj->tkj", inner, amp_c)  # contributions of user j's stream at user k
    z = np.einsum("tkk->tk", per_k)
    iui = np.abs(per_k) ** 2
    iui_power = iui.sum(axis=-1) - np.abs(z) ** 2
    steer = _steering(stats, config)
    amp_s = np.sqrt((1.0 - alloc.a)[:, None] * rho * alloc.eta_s)  # (M, L)
    # sensing symbols are independent per zone: powers add over l
    is_terms = np.einsum("tmkn,mln->tkl", g.conj(), amp_s[:, :, None] * steer)
    is_power = (np.abs(is_terms) ** 2).sum(axis=-1)
    return z, iui_power + is_power


def _steering(stats, config) -> np.ndarray:
    return np.stack([np.stack([array_response(th, stats.N, config.spacing_ratio) for th in row])
                     for row in stats.theta])


def _ratio_stderr(mu, cov, grad, n):
    return float(math.sqrt(max(grad @ cov @ grad, 0.0) / n))


def mc_user_sinrs(stats: ChannelStats, alloc: Allocation, config: SystemConfig,
                  trials: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Use-and-then-forget SINR estimate for every user, with delta-method stderr."""
    K = stats.K
    moments = [_Moments(4) for _ in range(K)]
    for n, rng in _chunks(trials, seed):
        z, w = _sample_user_terms(stats, config, alloc, n, rng)
        for k in range(K):
            feats = np.column_stack([z[:, k].real, z[:, k].imag, np.abs(z[:, k]) ** 2, w[:, k]])
            moments[k].add(feats)
    est, se = np.empty(K), np.empty(K)
    for k, mom in enumerate(moments):
        mu, cov = mom.mean_cov()
        dr, di, q, wbar = mu
        f = dr * dr + di * di
        den = q - f + wbar + 1.0
        est[k] = f / den
        grad = np.array([2 * dr * (den + f) / den**2, 2 * di * (den + f) / den**2, -f / den**2, -f / den**2])
        se[k] = _ratio_stderr(mu, cov, grad, mom.n)
    return est, se


def mc_eav_sinrs(stats: ChannelStats, alloc: Allocation, config: SystemConfig,
                 trials: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo E|DS_l|^2 / (E|IS_l|^2 + 1) for every zone.

    Sensing contributions of different APs are drawn with independent uniform
    phases, so they add in power as the closed form assumes.
    """
    M, K, L, N = stats.M, stats.K, stats.L, stats.N
    rho = config.rho
    steer = _steering(stats, config)
    amp_c = np.sqrt(alloc.a[:, None] * rho * alloc.eta_c)
    amp_s = np.sqrt((1.0 - alloc.a)[:, None] * rho * alloc.eta_s)
    sq_zeta = np.sqrt(stats.zeta)
    # cross[m, l, l'] = sqrt(zeta_ml) a(theta_ml)^H a(theta_ml') sqrt((1-a) rho eta_s_ml')
    cross = sq_zeta[:, :, None] * np.einsum("mln,mjn->mlj", steer.conj(), steer) * amp_s[:, None, :]
    moments = [_Moments(2) for _ in range(L)]
    for n, rng in _chunks(trials, seed):
        g_hat = _cn(rng, (n, M, K, N), stats.gamma[None, :, :, None])
        # proj[t, m, l, k] = a(theta_ml)^H ghat_mk
        proj = np.einsum("mln,tmkn->tmlk", steer.conj(), g_hat)
        ds_terms = sq_zeta[None, :, :, None] * proj * amp_c[None, :, None, :]
        ds_power = (np.abs(ds_terms.sum(axis=1)) ** 2).sum(axis=-1)  # symbols independent over k
        phases = np.exp(2j * np.pi * rng.random((n, M, L)))
        is_terms = np.einsum("mlj,tmj->tlj", cross, phases)
        is_power = (np.abs(is_terms) ** 2).sum(axis=-1)
        for l in range(L):
            moments[l].add(np.column_stack([ds_power[:, l], is_power[:, l]]))
    est, se = np.empty(L), np.empty(L)
    for l, mom in enumerate(moments):
        mu, cov = mom.mean_cov()
        u, v = mu
        est[l] = u / (v + 1.0)
        grad = np.array([1.0 / (v + 1.0), -u / (v + 1.0) ** 2])
        se[l] = _ratio_stderr(mu, cov, grad, mom.n)
    return est, se


def mc_sinr_user(stats, alloc, k: int, config, trials: int, seed):
    est, se = mc_user_sinrs(stats, alloc, config, trials, seed)
    return float(est[k]), float(se[k])


def mc_sinr_eav(stats, alloc, l: int, config, trials: int, seed):
    est, se = mc_eav_sinrs(stats, alloc, config, trials, seed)
    return float(est[l]), float(se[l])
