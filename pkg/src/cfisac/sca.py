"""Successive convex approximation for joint AP-mode selection and power allocation.

Two strategies share one machinery:

* ``CP`` (communication-prioritized): maximize the worst user SINR subject to
  an eavesdropper SINR cap ``nu`` and a MASR floor ``kappa``.
* ``SP`` (security-prioritized): minimize the worst eavesdropper SINR subject
  to a user SINR floor ``varsigma`` and the same MASR floor.

Binary modes are relaxed to [0, 1] with the concave penalty
``lambda * sum(a - a^2)``.  Every non-convex constraint is written as a
difference of squares and the subtracted square is replaced by its tangent
(``lower_bound_sq``), or ``x^2/y`` by ``lower_bound_quad_over_lin``.  The
optimizer works on per-AP power fractions ``p = N eta_c gamma`` and
``r = N eta_s``; bilinear terms ``zeta * a * P`` are split as
``zeta/4 [(a+P)^2 - (a-P)^2]`` so every square stays O(1).
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .conic import Affine, ConicProgram, SolveStatus, StatusKind, add_quadratic_upper, add_sqrt_product, asum, solve
from .metrics import Allocation, RateReport
from .scenario import ChannelStats, SystemConfig


class Kind(str, enum.Enum):
    CP = "CP"
    SP = "SP"


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    SUBPROBLEM_INFEASIBLE = "SubproblemInfeasible"


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    nu: float
    kappa: float
    varsigma: float

    @classmethod
    def from_config(cls, config: SystemConfig, **overrides) -> "Thresholds":
        base = dict(nu=config.nu, kappa=config.kappa, varsigma=config.varsigma)
        base.update(overrides)
        return cls(**base)


@dataclass
class SCAConfig:
    lambda_penalty: float = 1.0
    max_outer_iters: int = 100
    obj_tol: float = 1e-4
    binary_tol: float = 0.01
    init_strategy: str = "half"  # "half" | "random"
    penalty_escalation: float = 2.0
    max_escalations: int = 5
    solver_tol: float = 1e-8
    phase1_max_iters: int = 50
    polish_max_iters: int = 20
    sp_eav_surrogate: str = "bound"  # "bound" | "taylor"
    max_polish_patterns: int = 64
    max_flip_candidates: int = 3  # fractional APs whose flipped rounding is also polished
    polish_screen_iters: int = 3  # power-only iterations per competing rounding pattern
    snap_tol: float = 1e-3  # modes below this are linearized at 0 in the power rows

    def __post_init__(self):
        if self.lambda_penalty < 0:
            raise ValueError("lambda_penalty must be >= 0")
        if self.obj_tol <= 0 or self.binary_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.init_strategy not in ("half", "random"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if self.sp_eav_surrogate not in ("bound", "taylor"):
            raise ValueError(f"unknown surrogate {self.sp_eav_surrogate!r}")
        if self.max_flip_candidates < 0 or self.max_polish_patterns < 1 or self.polish_screen_iters < 1:
            raise ValueError("polish pattern limits must be non-negative")


@dataclass(frozen=True)
class SCAPoint:
    """Iterate in power-fraction coordinates plus the slack ``t``."""

    a: np.ndarray
    p: np.ndarray
    r: np.ndarray
    t: float

    def allocation(self, stats: ChannelStats) -> Allocation:
        return Allocation.from_fractions(stats, self.a, self.p, self.r)

    def eta(self, stats: ChannelStats):
        alloc = self.allocation(stats)
        return alloc.eta_c, alloc.eta_s

    @classmethod
    def from_allocation(cls, stats: ChannelStats, alloc: Allocation, t: float = 0.0) -> "SCAPoint":
        p, r = alloc.fractions(stats)
        return cls(alloc.a.copy(), p, r, t)


@dataclass
class SurrogateCoeffs:
    """Linearization coefficients in the original (eta) units."""

    q: np.ndarray  # (K,)
    mu: np.ndarray  # (M, K)
    varrho: np.ndarray  # (M, L)
    omega: np.ndarray  # (M, L)
    delta: np.ndarray  # (M, L)
    eps: np.ndarray  # (M, L)


@dataclass
class TrajectoryEntry:
    iter: int
    phase: str
    lam: float
    penalized: float
    raw: float
    binary_residual: float
    min_user_sinr: float
    max_eav_sinr: float
    min_masr: float
    allocation: Allocation
    segment: int = 0  # constant-lambda stretch of one continuous SCA run


@dataclass
class SCAResult:
    kind: Kind
    status: Status
    trajectory: list[TrajectoryEntry]
    final: Allocation | None
    report: RateReport | None
    objective: float = math.nan
    relaxed: Allocation | None = None
    message: str = ""
    main_iters: int = 0

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["iter", "objective", "penalized_objective", "binary_residual",
                    "min_user_sinr", "max_eav_sinr", "min_masr"])
        for e in self.trajectory:
            w.writerow([e.iter, repr(e.raw), repr(e.penalized), repr(e.binary_residual),
                        repr(e.min_user_sinr), repr(e.max_eav_sinr), repr(e.min_masr)])
        return buf.getvalue()


# -- scalar bounds ----------------------------------------------------------

def lower_bound_sq(x, x0):
    """Tangent of x^2 at x0: ``x0 (2x - x0) <= x^2``."""
    return x0 * (2.0 * x - x0)


def lower_bound_quad_over_lin(x, y, x0, y0):
    """Tangent plane of x^2/y at (x0, y0), valid for y > 0."""
    if np.any(np.asarray(y) <= 0) or np.any(np.asarray(y0) <= 0):
        raise ValueError("y and y0 must be positive")
    c = x0 / y0
    return c * (2.0 * x - c * y)


def taylor_f(t, a, eps, t0, a0, eps0):
    """First-order expansion of ``t * sum_m a_m eps_m`` around (t0, a0, eps0)."""
    a, eps, a0, eps0 = (np.asarray(v, float) for v in (a, eps, a0, eps0))
    return float(np.sum(a0 * eps0 * t + a0 * t0 * eps + eps0 * t0 * a - 2.0 * a0 * eps0 * t0))


def _lin_sq(expr: Affine, x0: float) -> Affine:
    return (2.0 * x0) * expr - x0 * x0


# -- problem context --------------------------------------------------------

class _Problem:
    def __init__(self, stats: ChannelStats, config: SystemConfig, kind: Kind,
                 thresholds: Thresholds, opts: SCAConfig):
        self.stats, self.config, self.kind, self.thr, self.opts = stats, config, Kind(kind), thresholds, opts
        self.rho = config.rho
        self.N = stats.N
        self.Gn = stats.array_gain / stats.N  # (M, L, L)
        L = stats.L
        self.Gx = self.Gn * (1.0 - np.eye(L))
        self.last_failure = ""
        self.obj_scale = 1.0  # objective unit so that lambda is dimensionless

    # exact quantities in fraction coordinates
    def user(self, a, p, r):
        return metrics.user_sinr_core(self.stats, self.rho, a, p, r)

    def eav(self, a, p, r):
        return metrics.eav_sinr_core(self.stats, self.rho, a, p, r)

    def masr(self, a, p, r):
        return metrics.masr_core(self.stats, a, p, r)

    def raw_objective(self, a, p, r) -> float:
        if self.kind is Kind.CP:
            return float(np.min(self.user(a, p, r)))
        return float(np.max(self.eav(a, p, r)))

    def penalized(self, a, p, r, lam) -> float:
        pen = lam * float(np.sum(a - a * a))
        raw = self.raw_objective(a, p, r) / self.obj_scale
        return raw - pen if self.kind is Kind.CP else raw + pen

    def constraint_gap(self, a, p, r) -> float:
        """Largest violation of the non-convex threshold constraints (0 if feasible)."""
        gaps = [self.thr.kappa - self.masr(a, p, r)]
        if self.kind is Kind.CP:
            gaps.append(self.eav(a, p, r) - self.thr.nu)
        else:
            gaps.append(self.thr.varsigma - self.user(a, p, r))
        return float(max(0.0, max(np.max(g) for g in gaps)))

    def t_upper(self) -> float:
        s = self.stats
        if self.kind is Kind.CP:
            return float(1.01 * self.rho * self.N * np.max(np.sum(np.sqrt(s.gamma), axis=0) ** 2)) + 1.0
        return float(1.01 * self.rho * np.max(np.sum(s.zeta, axis=0))) + 1.0


@dataclass
class _Vars:
    a: np.ndarray
    p: np.ndarray
    r: np.ndarray
    s: np.ndarray
    t: int
    j: np.ndarray | None = None
    sigma: int | None = None


@dataclass
class _Lin:
    """Quantities evaluated at the linearization point."""

    a: np.ndarray
    p: np.ndarray
    r: np.ndarray
    t: float
    P: np.ndarray
    R: np.ndarray
    E: np.ndarray
    Ex: np.ndarray
    x: np.ndarray  # (K,) sum_m sqrt(gamma) sqrt(a p)
    J: np.ndarray  # (L,)


def _linearize(prob: _Problem, pt: SCAPoint) -> _Lin:
    s = prob.stats
    P = pt.p.sum(axis=1)
    R = pt.r.sum(axis=1)
    E = np.einsum("mj,mlj->ml", pt.r, prob.Gn)
    Ex = np.einsum("mj,mlj->ml", pt.r, prob.Gx)
    x = np.sum(np.sqrt(s.gamma) * np.sqrt(np.clip(pt.a[:, None] * pt.p, 0.0, None)), axis=0)
    J = np.sum(s.zeta * (1.0 - pt.a)[:, None] * E, axis=0) + 1.0 / prob.rho
    return _Lin(pt.a, pt.p, pt.r, pt.t, P, R, E, Ex, x, J)


def coeffs(stats: ChannelStats, point: SCAPoint, config: SystemConfig, kind: Kind,
           thresholds: Thresholds | None = None) -> SurrogateCoeffs:
    """Surrogate coefficients at ``point`` (mu, q, varrho, omega, delta, eps)."""
    thr = thresholds or Thresholds.from_config(config)
    prob = _Problem(stats, config, kind, thr, SCAConfig())
    lin = _linearize(prob, point)
    if Kind(kind) is Kind.CP:
        if not point.t > 0:
            raise InitializationError("q is undefined for t = 0; initialization must give t > 0")
        q = 2.0 * math.sqrt(stats.N) * lin.x / point.t
    else:
        q = 2.0 * math.sqrt(stats.N) * lin.x / thr.varsigma
    mu = stats.beta * (lin.P - lin.R)[:, None]
    delta = stats.zeta * lin.P[:, None]
    eps = stats.zeta * lin.E
    varrho = delta + thr.nu * eps
    omega = stats.zeta * (stats.N * lin.r + thr.kappa * lin.P[:, None] - thr.kappa * lin.Ex)
    return SurrogateCoeffs(q, mu, varrho, omega, delta, eps)


# -- subproblem construction ------------------------------------------------

def _expr_P(prog, V, m):
    return asum(prog.x(i) for i in V.p[m])


def _expr_R(prog, V, m):
    return asum(prog.x(i) for i in V.r[m])


def _expr_E(prog, V, G, m, l):
    return asum(prog.x(V.r[m, j], G[m, l, j]) for j in range(G.shape[-1]) if G[m, l, j] != 0.0)


def _add_user_rows(prob, prog, V, lin, slack: Affine | None):
    """User SINR >= t (CP) or >= varsigma (SP)."""
    s = prob.stats
    N, rho = prob.N, prob.rho
    for k in range(s.K):
        beta = s.beta[:, k]
        scale = float(beta.sum()) + 1.0 / rho
        xk = asum(prog.x(V.s[m, k], math.sqrt(s.gamma[m, k])) for m in range(s.M))
        if prob.kind is Kind.CP:
            q = lin.x[k] / lin.t
            gain = (N * q) * (2.0 * xk - q * prog.x(V.t))
        else:
            gain = (N / prob.thr.varsigma) * _lin_sq(xk, lin.x[k])
        squares, rhs = [], gain - 1.0 / rho
        for m in range(s.M):
            if beta[m] == 0.0:
                continue
            u = _expr_P(prog, V, m) - _expr_R(prog, V, m)
            am = prog.x(V.a[m])
            w = beta[m] / 4.0
            squares.append(math.sqrt(w) * (am + u))
            u0 = lin.P[m] - lin.R[m]
            rhs = rhs - beta[m] * _expr_R(prog, V, m) + w * _lin_sq(am - u, lin.a[m] - u0)
        squares = [e / math.sqrt(scale) for e in squares]
        rhs = rhs / scale
        if slack is not None:
            rhs = rhs + slack
        add_quadratic_upper(prog, squares, rhs, tag=f"user[{k}]")


def _add_cp_eav_rows(prob, prog, V, lin, slack):
    s = prob.stats
    nu = prob.thr.nu
    for l in range(s.L):
        z = s.zeta[:, l]
        scale = float(z.sum()) + 1.0 / prob.rho
        squares, rhs = [], Affine(const=nu / prob.rho)
        for m in range(s.M):
            am = prog.x(V.a[m])
            E = _expr_E(prog, V, prob.Gn, m, l)
            v = _expr_P(prog, V, m) + nu * E
            v0 = lin.P[m] + nu * lin.E[m, l]
            w = z[m] / 4.0
            squares.append(math.sqrt(w) * (am + v))
            rhs = rhs + (nu * z[m]) * E + w * _lin_sq(am - v, lin.a[m] - v0)
        squares = [e / math.sqrt(scale) for e in squares]
        rhs = rhs / scale
        if slack is not None:
            rhs = rhs + slack
        add_quadratic_upper(prog, squares, rhs, tag=f"eav[{l}]")


def _add_masr_rows(prob, prog, V, lin, slack):
    s = prob.stats
    N, kappa = prob.N, prob.thr.kappa
    for l in range(s.L):
        z = s.zeta[:, l]
        scale = float(z.sum())
        squares, rhs = [], Affine()
        for m in range(s.M):
            am = prog.x(V.a[m])
            Ex = _expr_E(prog, V, prob.Gx, m, l)
            w_expr = N * prog.x(V.r[m, l]) + kappa * _expr_P(prog, V, m) - kappa * Ex
            w0 = N * lin.r[m, l] + kappa * lin.P[m] - kappa * lin.Ex[m, l]
            w = z[m] / 4.0
            squares.append(math.sqrt(w) * (am + w_expr))
            rhs = rhs + z[m] * (N * prog.x(V.r[m, l]) - kappa * Ex) + w * _lin_sq(am - w_expr, lin.a[m] - w0)
        squares = [e / math.sqrt(scale) for e in squares]
        rhs = rhs / scale
        if slack is not None:
            rhs = rhs + slack
        add_quadratic_upper(prog, squares, rhs, tag=f"masr[{l}]")


def _add_sp_eav_rows(prob, prog, V, lin):
    """Eavesdropper SINR <= t for the security-prioritized problem."""
    s = prob.stats
    rho = prob.rho
    t = prog.x(V.t)
    for l in range(s.L):
        z = s.zeta[:, l]
        scale = float(z.sum()) + 1.0 / rho
        if prob.opts.sp_eav_surrogate == "taylor":
            _add_sp_eav_taylor(prob, prog, V, lin, l, scale)
            continue
        # j_l <= sum_m zeta (1 - a) E + 1/rho   (concave minorant of the jamming power)
        jl = prog.x(V.j[l])
        squares, rhs = [], 1.0 / rho - jl
        for m in range(s.M):
            am = prog.x(V.a[m])
            E = _expr_E(prog, V, prob.Gn, m, l)
            w = z[m] / 4.0
            squares.append(math.sqrt(w) * ((1.0 - am) - E))
            rhs = rhs + w * _lin_sq((1.0 - am) + E, (1.0 - lin.a[m]) + lin.E[m, l])
        add_quadratic_upper(prog, [e / math.sqrt(scale) for e in squares], rhs / scale, tag=f"jam[{l}]")
        # sum_m zeta a P <= t * j_l
        t0 = max(lin.t, 1e-12)
        c = math.sqrt(lin.J[l] / t0)
        squares, rhs = [], Affine()
        for m in range(s.M):
            am = prog.x(V.a[m])
            P = _expr_P(prog, V, m)
            w = z[m] / 4.0
            squares.append(math.sqrt(w) * (am + P))
            rhs = rhs + w * _lin_sq(am - P, lin.a[m] - lin.P[m])
        squares.append(0.5 * (c * t - jl / c))
        rhs = rhs + 0.25 * _lin_sq(c * t + jl / c, c * lin.t + lin.J[l] / c)
        add_quadratic_upper(prog, [e / math.sqrt(scale) for e in squares], rhs / scale, tag=f"eav[{l}]")


def _add_sp_eav_taylor(prob, prog, V, lin, l, scale):
    # sum zeta a P + sum zeta t a E <= sum zeta t E + t / rho, with the
    # trilinear t*a*E replaced by its tangent plane (not an upper bound)
    s = prob.stats
    t = prog.x(V.t)
    z = s.zeta[:, l]
    squares, rhs = [], t / prob.rho
    for m in range(s.M):
        am = prog.x(V.a[m])
        P = _expr_P(prog, V, m)
        E = _expr_E(prog, V, prob.Gn, m, l)
        w = z[m] / 4.0
        squares.append(math.sqrt(w) * (am + P))
        squares.append(math.sqrt(w) * (t - E))
        a0, e0, t0 = lin.a[m], lin.E[m, l], lin.t
        tay = (a0 * e0) * t + (a0 * t0) * E + (e0 * t0) * am - 2.0 * a0 * e0 * t0
        rhs = rhs + w * _lin_sq(am - P, a0 - lin.P[m]) + w * _lin_sq(t + E, t0 + e0) - z[m] * tay
    add_quadratic_upper(prog, [e / math.sqrt(scale) for e in squares], rhs / scale, tag=f"eav[{l}]")


def _add_power_rows(prob, prog, V, lin, snap: bool = False):
    for m in range(prob.stats.M):
        am = prog.x(V.a[m])
        a0 = lin.a[m]
        if snap and a0 < prob.opts.snap_tol:
            # a nearly sensing AP: drop its residual comm power so the mode can reach 0
            a0 = 0.0
        prog.add_linear(_expr_P(prog, V, m) - _lin_sq(am, a0), "<=", 0.0, tag=f"comm_power[{m}]")
        add_quadratic_upper(prog, [am], 1.0 - _expr_R(prog, V, m), tag=f"sense_power[{m}]")


def _build(prob: _Problem, pt: SCAPoint, lam: float, *, phase1: bool = False,
           fixed_a: np.ndarray | None = None, snap: bool = False):
    s = prob.stats
    M, K, L = s.M, s.K, s.L
    lin = _linearize(prob, pt)
    prog = ConicProgram()
    if fixed_a is None:
        a = prog.add_vars(M, 0.0, 1.0, "a")
    else:
        a = np.array([prog.add_var(v, v, f"a[{m}]") for m, v in enumerate(fixed_a)])
    p = prog.add_vars((M, K), 0.0, 1.0, "p")
    r = prog.add_vars((M, L), 0.0, 1.0, "r")
    sv = np.empty((M, K), dtype=int)
    for m in range(M):
        for k in range(K):
            sv[m, k] = add_sqrt_product(prog, a[m], p[m, k], hi=1.0, tag=f"s[{m},{k}]")
    t = prog.add_var(0.0, prob.t_upper(), "t")
    V = _Vars(a, p, r, sv, t)
    if prob.kind is Kind.SP and prob.opts.sp_eav_surrogate == "bound":
        j_hi = prob.N * float(np.max(s.zeta.sum(axis=0))) + 1.0 / prob.rho + 1.0
        V.j = prog.add_vars(L, 0.0, j_hi, "j")
    slack = None
    if phase1:
        V.sigma = prog.add_var(-0.05, 1e6, "sigma")
        slack = prog.x(V.sigma)

    if prob.kind is Kind.CP:
        _add_user_rows(prob, prog, V, lin, None)
        _add_cp_eav_rows(prob, prog, V, lin, slack)
    else:
        _add_sp_eav_rows(prob, prog, V, lin)
        _add_user_rows(prob, prog, V, lin, slack)
    _add_masr_rows(prob, prog, V, lin, slack)
    _add_power_rows(prob, prog, V, lin, snap)

    if phase1:
        prog.set_objective(prog.x(V.sigma), "min")
    else:
        penalty = asum(prog.x(a[m]) - _lin_sq(prog.x(a[m]), lin.a[m]) for m in range(M))
        if prob.kind is Kind.CP:
            prog.set_objective(prog.x(t, 1.0 / prob.obj_scale) - lam * penalty, "max")
        else:
            prog.set_objective(prog.x(t, 1.0 / prob.obj_scale) + lam * penalty, "min")
    return prog, V


def _check_finite(prob: _Problem, pt: SCAPoint):
    c = coeffs(prob.stats, pt, prob.config, prob.kind, prob.thr) if pt.t > 0 or prob.kind is Kind.SP else None
    if c is not None:
        for name in ("q", "mu", "varrho", "omega", "delta", "eps"):
            if not np.all(np.isfinite(getattr(c, name))):
                raise ValueError(f"non-finite linearization coefficient {name}")


def build_cp_subproblem(stats: ChannelStats, point: SCAPoint, config: SystemConfig,
                        thresholds: Thresholds | None = None, lam: float = 1.0,
                        opts: SCAConfig | None = None) -> ConicProgram:
    thr = thresholds or Thresholds.from_config(config)
    prob = _Problem(stats, config, Kind.CP, thr, opts or SCAConfig())
    _check_finite(prob, point)
    return _build(prob, point, lam)[0]


def build_sp_subproblem(stats: ChannelStats, point: SCAPoint, config: SystemConfig,
                        thresholds: Thresholds | None = None, lam: float = 1.0,
                        opts: SCAConfig | None = None) -> ConicProgram:
    thr = thresholds or Thresholds.from_config(config)
    prob = _Problem(stats, config, Kind.SP, thr, opts or SCAConfig())
    _check_finite(prob, point)
    return _build(prob, point, lam)[0]


# -- initialization ---------------------------------------------------------

def _half_split(stats: ChannelStats):
    M, K, L = stats.M, stats.K, stats.L
    a = np.full(M, 0.5)
    p = np.where(stats.gamma > 0, a[:, None] / (2.0 * K), 0.0)
    r = np.broadcast_to((1.0 - a)[:, None] / (2.0 * L), (M, L)).copy()
    return a, p, r


def _with_t(prob: _Problem, a, p, r) -> SCAPoint:
    return SCAPoint(a, p, r, prob.raw_objective(a, p, r))


def initialize(stats: ChannelStats, kind: Kind, config: SystemConfig,
               thresholds: Thresholds | None = None, seed: int = 0,
               strategy: str = "half") -> SCAPoint:
    """Starting point with a = 1/2 and half of every power budget in use.

    ``strategy="random"`` perturbs that point by up to +-20% per entry and
    keeps the first of 50 draws meeting the threshold constraints (or the
    least violating draw).
    """
    thr = thresholds or Thresholds.from_config(config)
    prob = _Problem(stats, config, kind, thr, SCAConfig())
    a, p, r = _half_split(stats)
    if strategy == "half":
        return _with_t(prob, a, p, r)
    if strategy != "random":
        raise ValueError(f"unknown init strategy {strategy!r}")
    best, best_gap = None, math.inf
    for ss in np.random.SeedSequence(seed).spawn(50):
        rng = np.random.default_rng(ss)
        a1 = np.clip(a * rng.uniform(0.8, 1.2, a.shape), 0.0, 1.0)
        p1 = p * rng.uniform(0.8, 1.2, p.shape)
        r1 = r * rng.uniform(0.8, 1.2, r.shape)
        p1 *= np.minimum(1.0, a1**2 / np.maximum(p1.sum(axis=1), 1e-300))[:, None]
        r1 *= np.minimum(1.0, (1.0 - a1**2) / np.maximum(r1.sum(axis=1), 1e-300))[:, None]
        gap = prob.constraint_gap(a1, p1, r1)
        if gap < best_gap:
            best, best_gap = (a1, p1, r1), gap
        if gap == 0.0:
            break
    return _with_t(prob, *best)


# -- outer loop -------------------------------------------------------------

def _entry(prob: _Problem, it: int, phase: str, lam: float, pt: SCAPoint, segment: int = 0) -> TrajectoryEntry:
    a, p, r = pt.a, pt.p, pt.r
    return TrajectoryEntry(
        iter=it, phase=phase, lam=lam, segment=segment,
        penalized=prob.penalized(a, p, r, lam), raw=prob.raw_objective(a, p, r),
        binary_residual=float(np.max(np.minimum(a, 1.0 - a))),
        min_user_sinr=float(np.min(prob.user(a, p, r))),
        max_eav_sinr=float(np.max(prob.eav(a, p, r))),
        min_masr=float(np.min(prob.masr(a, p, r))),
        allocation=pt.allocation(prob.stats),
    )


def _solve_at(prob: _Problem, pt: SCAPoint, lam: float, **kw):
    if kw.get("fixed_a") is None and not kw.get("phase1") and np.any(pt.a < prob.opts.snap_tol):
        prog, V = _build(prob, pt, lam, snap=True, **kw)
        st = solve(prog, prob.opts.solver_tol)
        if st.ok:
            return prog, V, st
    prog, V = _build(prob, pt, lam, **kw)
    st = solve(prog, prob.opts.solver_tol)
    return prog, V, st


def _next_point(prob: _Problem, st: SolveStatus, V: _Vars) -> SCAPoint:
    x = st.primal
    a = np.clip(x[V.a], 0.0, 1.0)
    p = np.clip(x[V.p], 0.0, 1.0)
    r = np.clip(x[V.r], 0.0, 1.0)
    return _with_t(prob, a, p, r)


def _phase_one(prob: _Problem, pt: SCAPoint, fixed_a=None):
    """Drive the threshold constraints to feasibility by minimizing a common slack."""
    if prob.constraint_gap(pt.a, pt.p, pt.r) == 0.0:
        return pt, 0, ""
    prev_sigma = math.inf
    for it in range(1, prob.opts.phase1_max_iters + 1):
        if prob.kind is Kind.CP and not pt.t > 0:
            return None, it, "user SINR collapsed to zero during phase 1"
        _, V, st = _solve_at(prob, pt, 0.0, phase1=True, fixed_a=fixed_a)
        if not st.ok:
            return None, it, f"phase-1 subproblem {st.kind.value}: {st.message}"
        sigma = float(st.primal[V.sigma])
        pt = _next_point(prob, st, V)
        if prob.constraint_gap(pt.a, pt.p, pt.r) == 0.0:
            return pt, it, ""
        if sigma > 0 and prev_sigma - sigma < 1e-7:
            return None, it, f"phase 1 stalled with slack {sigma:.3g}"
        prev_sigma = sigma
    return None, prob.opts.phase1_max_iters, "phase 1 iteration limit"


def _iterate(prob: _Problem, pt: SCAPoint, lam: float, fixed_a, traj, phase: str,
             it0: int, max_iters: int, segment: int = 0):
    """SCA loop at fixed penalty weight; returns (point, iterations, reason)."""
    opts = prob.opts
    it = 0
    noise = 10.0 * opts.solver_tol
    while it < max_iters:
        if prob.kind is Kind.CP and not pt.t > 0:
            return pt, it, "infeasible"
        _, V, st = _solve_at(prob, pt, lam, fixed_a=fixed_a)
        if not st.ok:
            prob.last_failure = f"{st.kind.value}: {st.message}"
            if st.kind is StatusKind.INFEASIBLE:
                return pt, it, "infeasible"
            return pt, it, "numerical"
        it += 1
        new = _next_point(prob, st, V)
        old_val = prob.penalized(pt.a, pt.p, pt.r, lam)
        new_val = prob.penalized(new.a, new.p, new.r, lam)
        gain = new_val - old_val if prob.kind is Kind.CP else old_val - new_val
        if gain < -noise:
            # the solver returned a worse point; keep the current one and
            # count it as settled if the loss is below the objective tolerance
            return pt, it, "converged" if -gain <= opts.obj_tol else "stalled"
        pt = new
        traj.append(_entry(prob, it0 + it, phase, lam, pt, segment))
        if abs(gain) <= opts.obj_tol:
            return pt, it, "converged"
    return pt, it, "iter_limit"


def _rounding_patterns(relaxed_points, limit: int):
    """Binary mode patterns worth polishing, most plausible first.

    Nearest rounding of each relaxed point, every threshold cut of its sorted
    modes, then single and double flips of the nearest rounding, the least
    decided APs first.
    """
    out, seen = [], set()

    def push(b):
        key = tuple(int(v) for v in b)
        if key not in seen:
            seen.add(key)
            out.append(np.array(key, dtype=float))

    for pt in relaxed_points:
        push(pt.a >= 0.5)
    for pt in relaxed_points:
        order = np.argsort(pt.a, kind="stable")
        n_near = int(np.sum(pt.a < 0.5))
        for j in sorted(range(len(order) + 1), key=lambda j: (abs(j - n_near), j)):
            b = np.ones(len(order))
            b[order[:j]] = 0.0
            push(b)
    for pt in relaxed_points:
        near = (pt.a >= 0.5).astype(float)
        order = np.argsort(np.abs(pt.a - 0.5), kind="stable")
        for m in order:
            b = near.copy()
            b[m] = 1.0 - b[m]
            push(b)
        for x, y in itertools.combinations(order, 2):
            b = near.copy()
            b[[x, y]] = 1.0 - b[[x, y]]
            push(b)
            if len(out) >= limit:
                break
    return out[:limit]


def _polish_pattern(prob: _Problem, relaxed: SCAPoint, a_bin: np.ndarray, it0: int,
                    max_iters: int) -> "_Polished | None":
    K, L = prob.stats.K, prob.stats.L
    p = relaxed.p * a_bin[:, None]
    r = relaxed.r * (1.0 - a_bin)[:, None]
    # APs that changed side start from half of their new budget
    for m in range(len(a_bin)):
        if a_bin[m] == 1.0 and p[m].sum() < 1e-3:
            p[m] = np.where(prob.stats.gamma[m] > 0, 0.5 / K, 0.0)
        if a_bin[m] == 0.0 and r[m].sum() < 1e-3:
            r[m] = 0.5 / L
    p *= np.minimum(1.0, 1.0 / np.maximum(p.sum(axis=1), 1e-300))[:, None]
    r *= np.minimum(1.0, 1.0 / np.maximum(r.sum(axis=1), 1e-300))[:, None]
    pt = _with_t(prob, a_bin, p, r)
    if prob.kind is Kind.CP and not pt.t > 0:
        return None
    pt, n1, _ = _phase_one(prob, pt, fixed_a=a_bin)
    if pt is None:
        return None
    local: list[TrajectoryEntry] = []
    pt, used, reason = _iterate(prob, pt, 0.0, a_bin, local, "polish", it0 + n1, max_iters, segment=-1)
    if prob.constraint_gap(pt.a, pt.p, pt.r) > 0:
        return None
    return _Polished(pt, a_bin, local, it0 + n1 + used, used, reason == "iter_limit")


@dataclass
class _Polished:
    pt: SCAPoint
    a_bin: np.ndarray
    local: list[TrajectoryEntry]
    next_iter: int
    used: int
    unfinished: bool


def _finish_polish(prob: _Problem, cand: _Polished) -> _Polished:
    """Continue the power-only SCA of a screened pattern to the full budget."""
    left = prob.opts.polish_max_iters - cand.used
    if not cand.unfinished or left <= 0:
        return cand
    local = list(cand.local)
    pt, used, _ = _iterate(prob, cand.pt, 0.0, cand.a_bin, local, "polish", cand.next_iter, left, segment=-1)
    if prob.constraint_gap(pt.a, pt.p, pt.r) > 0:
        return cand
    return _Polished(pt, cand.a_bin, local, cand.next_iter + used, cand.used + used, False)


def _better(prob: _Problem, x: float, y: float) -> bool:
    return x > y if prob.kind is Kind.CP else x < y


def _undecided_flips(prob: _Problem, relaxed: SCAPoint) -> list[np.ndarray]:
    """Nearest rounding plus single flips of the APs that are still fractional."""
    near = (relaxed.a >= 0.5).astype(float)
    out = [near]
    frac = np.minimum(relaxed.a, 1.0 - relaxed.a)
    for m in np.argsort(-frac, kind="stable")[:prob.opts.max_flip_candidates]:
        if frac[m] <= prob.opts.binary_tol:
            break
        b = near.copy()
        b[m] = 1.0 - b[m]
        out.append(b)
    return out


def _polish(prob: _Problem, relaxed_points, traj, it0: int):
    """Round the relaxed modes and re-optimize powers with the modes fixed.

    If nearest rounding can be made feasible, only its single flips at
    still-fractional APs compete with it.  Otherwise threshold cuts and
    further flips of the relaxed modes are all tried.  Among the feasible
    patterns examined the best exact objective wins.
    """
    opts = prob.opts
    first = _undecided_flips(prob, relaxed_points[0])
    tried = {tuple(b) for b in first}
    rest = [b for b in _rounding_patterns(relaxed_points, opts.max_polish_patterns)
            if tuple(b) not in tried]
    patterns = first + rest
    # a lone nearest rounding is polished in full; competing patterns are
    # screened with a few iterations and only the winner is finished
    alone = len(first) == 1
    best, best_val, near_ok = None, None, False
    for i, b in enumerate(patterns):
        if i == len(first) and near_ok:
            break
        budget = opts.polish_max_iters if alone and i == 0 else opts.polish_screen_iters
        cand = _polish_pattern(prob, relaxed_points[-1], b, it0, budget)
        if cand is None:
            continue
        near_ok |= i == 0
        val = prob.raw_objective(cand.pt.a, cand.pt.p, cand.pt.r)
        if best is None or _better(prob, val, best_val):
            best, best_val = cand, val
    if best is None:
        return None, f"polish: none of {len(patterns)} rounding patterns is feasible"
    best = _finish_polish(prob, best)
    traj.extend(best.local)
    return best.pt, ""


def _residual(pt: SCAPoint) -> float:
    return float(np.max(np.minimum(pt.a, 1.0 - pt.a)))


def sca_solve(stats: ChannelStats, kind: Kind, config: SystemConfig,
              thresholds: Thresholds | None = None, seed: int = 0,
              opts: SCAConfig | None = None) -> SCAResult:
    """Penalized SCA followed by rounding and a power-only re-solve.

    Whenever the objective settles with fractional modes, lambda is
    escalated and the loop restarts from the best feasible rounding of the
    iterates seen so far (or continues in place if no rounding is feasible).
    """
    opts = opts or SCAConfig()
    kind = Kind(kind)
    thr = thresholds or Thresholds.from_config(config)
    prob = _Problem(stats, config, kind, thr, opts)
    traj: list[TrajectoryEntry] = []
    pt = initialize(stats, kind, config, thr, seed, opts.init_strategy)
    lam = opts.lambda_penalty
    prob.obj_scale = max(pt.t, 1e-9)
    traj.append(_entry(prob, 0, "init", lam, pt))

    def fail(msg, relaxed=None, main_iters=0):
        return SCAResult(kind, Status.SUBPROBLEM_INFEASIBLE, traj, None, None,
                         relaxed=relaxed.allocation(stats) if relaxed is not None else None,
                         message=msg, main_iters=main_iters)

    if kind is Kind.CP and not pt.t > 0:
        return fail("initial point has zero user SINR")
    start, n1, msg = _phase_one(prob, pt)
    if start is None:
        return fail(msg)
    pt = start
    if n1:
        traj.append(_entry(prob, n1, "phase1", lam, pt))

    checkpoints: list[SCAPoint] = []
    used, segment, escalations = 0, 0, 0
    while True:
        pt, n, reason = _iterate(prob, pt, lam, None, traj, "main", n1 + used,
                                 opts.max_outer_iters - used, segment)
        used += n
        if reason != "converged":
            break
        checkpoints.append(pt)
        if _residual(pt) <= opts.binary_tol:
            break
        if escalations >= opts.max_escalations:
            reason = "binary_limit"
            break
        if used >= opts.max_outer_iters:
            reason = "iter_limit"
            break
        lam *= opts.penalty_escalation
        escalations += 1
        segment += 1
        rounded, _ = _polish(prob, checkpoints[:1] + [pt], [], 0)
        if rounded is not None:
            pt = rounded
            traj.append(_entry(prob, n1 + used, "restart", lam, pt, segment))
    if reason == "infeasible":
        return fail(f"subproblem failed mid-run ({prob.last_failure})", pt, used)
    relaxed = pt
    residual = _residual(relaxed)
    polished, msg = _polish(prob, [relaxed] + checkpoints[:1], traj, n1 + used)
    if polished is None:
        return fail(msg, relaxed, used)
    final = polished.allocation(stats)
    qos = kind is Kind.SP
    nu = thr.nu if kind is Kind.CP else math.inf
    report = metrics.rates_and_secrecy(stats, final, config, check_qos=qos,
                                       nu=nu, kappa=thr.kappa, varsigma=thr.varsigma)
    ok = reason == "converged" and residual <= opts.binary_tol and not report.violations
    status = Status.CONVERGED if ok else Status.ITER_LIMIT
    return SCAResult(kind, status, traj, final, report,
                     objective=prob.raw_objective(polished.a, polished.p, polished.r),
                     relaxed=relaxed.allocation(stats), message=reason, main_iters=used)
