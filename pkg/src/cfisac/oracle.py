"""Independent references for the optimizer.

``brute_force`` enumerates binary modes and gridded power simplices on tiny
instances.  ``surrogate_audit`` samples (point, linearization point) pairs and
checks that every convexified constraint built by :mod:`cfisac.sca` implies
the exact constraint it replaces, and coincides with it at the linearization
point.  The exact slacks used here are written out from the closed forms and
do not go through the subproblem builder.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, sca
from .conic import ConicProgram
from .metrics import Allocation
from .scenario import ChannelStats, SystemConfig, make_scenario

MAX_M, MAX_K, MAX_L = 6, 2, 2


@dataclass(frozen=True)
class GridSpec:
    grid_step: float = 0.05
    max_points: int = 5_000_000

    def __post_init__(self):
        if not 0.0 < self.grid_step <= 1.0:
            raise ValueError("grid_step must lie in (0, 1]")
        if self.max_points < 1:
            raise ValueError("max_points must be positive")


@dataclass
class BruteForceResult:
    objective: float
    allocation: Allocation | None
    evaluated: int
    feasible: bool

    @property
    def infeasible_at_resolution(self) -> bool:
        return not self.feasible


def simplex_grid(dim: int, step: float) -> np.ndarray:
    """All points ``i * step`` with non-negative integer ``i`` and sum <= 1."""
    n = int(math.floor(1.0 / step + 1e-9))
    pts = [c for c in itertools.product(range(n + 1), repeat=dim) if sum(c) <= n]
    return np.array(pts, dtype=float) * step


def _objective(kind: sca.Kind, user, eav):
    return user.min(axis=-1) if kind is sca.Kind.CP else eav.max(axis=-1)


def brute_force(stats: ChannelStats, kind, thresholds: sca.Thresholds, spec: GridSpec,
                config: SystemConfig) -> BruteForceResult:
    """Best grid point of the binary problem (CP: max min user SINR, SP: min max eav SINR).

    Power fractions are enumerated on per-AP simplices; communication APs
    grid ``p[m, :]`` and sensing APs grid ``r[m, :]``.  Ties keep the first
    point in enumeration order, which is lexicographic in (modes, powers).
    """
    kind = sca.Kind(kind)
    M, K, L = stats.M, stats.K, stats.L
    if M > MAX_M or K > MAX_K or L > MAX_L:
        raise ValueError(f"brute force limited to M<={MAX_M}, K<={MAX_K}, L<={MAX_L}")
    comm_grid = simplex_grid(K, spec.grid_step)
    sense_grid = simplex_grid(L, spec.grid_step)
    total = sum(
        math.prod(len(comm_grid) if b else len(sense_grid) for b in bits)
        for bits in itertools.product((0, 1), repeat=M)
    )
    if total > spec.max_points:
        raise ValueError(f"grid has {total} points, above max_points={spec.max_points}")

    rho = config.rho
    sign = 1.0 if kind is sca.Kind.CP else -1.0
    best_val, best = -math.inf, None
    evaluated = 0
    chunk = 200_000
    for bits in itertools.product((0, 1), repeat=M):
        a = np.array(bits, dtype=float)
        sizes = [len(comm_grid) if b else len(sense_grid) for b in bits]
        n_total = math.prod(sizes)
        for start in range(0, n_total, chunk):
            flat = np.arange(start, min(n_total, start + chunk))
            idx = np.unravel_index(flat, sizes)
            n = flat.size
            p = np.zeros((n, M, K))
            r = np.zeros((n, M, L))
            for m, b in enumerate(bits):
                if b:
                    p[:, m, :] = comm_grid[idx[m]]
                else:
                    r[:, m, :] = sense_grid[idx[m]]
            user = metrics.user_sinr_core(stats, rho, a, p, r)
            eav = metrics.eav_sinr_core(stats, rho, a, p, r)
            masr = metrics.masr_core(stats, a, p, r)
            ok = np.all(masr >= thresholds.kappa, axis=-1)
            if kind is sca.Kind.CP:
                ok &= np.all(eav <= thresholds.nu, axis=-1)
            else:
                ok &= np.all(user >= thresholds.varsigma, axis=-1)
            evaluated += n
            if not ok.any():
                continue
            val = np.where(ok, sign * _objective(kind, user, eav), -np.inf)
            i = int(np.argmax(val))
            if val[i] > best_val:
                best_val = float(val[i])
                best = Allocation.from_fractions(stats, a, p[i], r[i])
    if best is None:
        return BruteForceResult(math.nan, None, evaluated, False)
    return BruteForceResult(sign * best_val, best, evaluated, True)


# -- surrogate audit --------------------------------------------------------

@dataclass
class FamilyAudit:
    samples: int = 0
    surrogate_feasible: int = 0
    violations: int = 0
    max_violation: float = 0.0
    tightness_gap: float = 0.0


@dataclass
class AuditReport:
    kind: sca.Kind
    families: dict[str, FamilyAudit] = field(default_factory=dict)
    taylor_ratio: float = math.nan

    @property
    def total_violations(self) -> int:
        return sum(f.violations for f in self.families.values())

    @property
    def max_tightness_gap(self) -> float:
        return max((f.tightness_gap for f in self.families.values()), default=0.0)


def _exact_slacks(stats, config, kind, thr, a, p, r, t):
    """Normalized slack of every exact constraint (>= 0 means satisfied).

    The normalizations match the ones used by the subproblem builder so that
    tightness can be compared number for number.
    """
    rho, N = config.rho, stats.N
    P = p.sum(axis=1)
    R = r.sum(axis=1)
    G = stats.array_gain / N
    E = np.einsum("mj,mlj->ml", r, G)
    Ex = np.einsum("mj,mlj->ml", r, G * (1.0 - np.eye(stats.L)))
    x = np.sum(np.sqrt(stats.gamma * np.clip(a[:, None] * p, 0.0, None)), axis=0)
    out = {}
    # user SINR >= t (CP) or >= varsigma (SP), as N x^2 / target >= interference + 1/rho
    target = t if kind is sca.Kind.CP else thr.varsigma
    interf = np.sum(stats.beta * (a * P + (1.0 - a) * R)[:, None], axis=0) + 1.0 / rho
    S = stats.beta.sum(axis=0) + 1.0 / rho
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(target > 0, N * x**2 / max(target, 1e-300), np.inf)
    out["user"] = (gain - interf) / S
    zs = stats.zeta.sum(axis=0)
    leak = np.sum(stats.zeta * (a * P)[:, None], axis=0)
    jam = np.sum(stats.zeta * (1.0 - a)[:, None] * E, axis=0)
    if kind is sca.Kind.CP:
        out["eav"] = (thr.nu * jam + thr.nu / rho - leak) / (zs + 1.0 / rho)
    else:
        out["eav"] = (t * (jam + 1.0 / rho) - leak) / (zs + 1.0 / rho)
    num = N * np.sum(stats.zeta * (1.0 - a)[:, None] * r, axis=0)
    den = leak + np.sum(stats.zeta * (1.0 - a)[:, None] * Ex, axis=0)
    out["masr"] = (num - thr.kappa * den) / zs
    out["comm_power"] = a**2 - P
    out["sense_power"] = 1.0 - a**2 - R
    return out


def _surrogate_slacks(prog: ConicProgram, x: np.ndarray, stats: ChannelStats):
    out = {"user": [], "eav": [], "jam": [], "masr": [], "comm_power": [], "sense_power": []}
    for con in prog.soc_cons:
        fam = con.tag.split("[")[0]
        if fam not in out or con.quad_rhs is None:
            continue
        sq = sum((row.value(x) / 2.0) ** 2 for row in con.rows[:-1])
        out[fam].append(con.quad_rhs.value(x) - sq)
    for con in prog.linear_cons:
        fam = con.tag.split("[")[0]
        if fam in out:
            out[fam].append(con.bound - con.expr.value(x))
    return {k: np.array(v) for k, v in out.items()}


def _embed(prog: ConicProgram, V, a, p, r, t, j=None, s=None) -> np.ndarray:
    x = np.zeros(prog.num_vars)
    x[V.a] = a
    x[V.p] = p
    x[V.r] = r
    x[V.s] = np.sqrt(np.clip(a[:, None] * p, 0.0, None)) if s is None else s
    x[V.t] = t
    if V.j is not None:
        x[V.j] = j
    return x


def _random_point(rng, stats: ChannelStats):
    M, K, L = stats.M, stats.K, stats.L
    a = rng.uniform(0.0, 1.0, M)
    p = rng.dirichlet(np.ones(K), M) * (a**2 * rng.uniform(0.2, 1.0, M))[:, None]
    r = rng.dirichlet(np.ones(L), M) * ((1.0 - a**2) * rng.uniform(0.2, 1.0, M))[:, None]
    return a, p, r


def _perturb(rng, a0, p0, r0, scale):
    a = np.clip(a0 + scale * rng.standard_normal(a0.shape), 0.0, 1.0)
    p = np.clip(p0 + scale * rng.standard_normal(p0.shape), 0.0, 1.0)
    r = np.clip(r0 + scale * rng.standard_normal(r0.shape), 0.0, 1.0)
    return a, p, r


def taylor_order_ratio(rng, stats: ChannelStats, config: SystemConfig, step: float = 0.05) -> float:
    """Error ratio of the trilinear expansion when the step is halved (2nd order -> 4)."""
    M, L = stats.M, stats.L
    ratios = []
    for _ in range(20):
        a0, _, r0 = _random_point(rng, stats)
        t0 = rng.uniform(0.1, 2.0)
        eps0 = stats.zeta * np.einsum("mj,mlj->ml", r0, stats.array_gain / stats.N)
        da, de, dt = rng.standard_normal(M), rng.standard_normal((M, L)), rng.standard_normal()
        errs = []
        for h in (step, step / 2):
            a, e, t = a0 + h * da, eps0 + h * de * (1.0 + eps0), t0 + h * dt
            exact = t * float(np.sum(a[:, None] * e))
            approx = sum(sca.taylor_f(t, a, e[:, l], t0, a0, eps0[:, l]) for l in range(L))
            errs.append(abs(exact - approx))
        if errs[1] > 0:
            ratios.append(errs[0] / errs[1])
    return float(np.median(ratios))


def surrogate_audit(stats: ChannelStats | None, kind, trials: int, seed: int,
                    config: SystemConfig | None = None, *, lin_points: int = 200,
                    sp_eav_surrogate: str = "bound", tol: float = 1e-9) -> AuditReport:
    """Sample ``trials`` (point, linearization point) pairs per constraint family.

    With ``stats=None`` a fresh desk scenario is drawn for every linearization
    point.  Thresholds and the slack ``t`` are drawn around the values at the
    linearization point so that both sides of every constraint get sampled.
    """
    kind = sca.Kind(kind)
    config = config or SystemConfig()
    rng = np.random.default_rng(seed)
    opts = sca.SCAConfig(sp_eav_surrogate=sp_eav_surrogate)
    families = ["user", "eav", "masr", "comm_power", "sense_power"]
    report = AuditReport(kind, {f: FamilyAudit() for f in families})
    per_lin = max(1, math.ceil(trials / lin_points))
    n_lin = math.ceil(trials / per_lin)
    for i in range(n_lin):
        st = stats if stats is not None else make_scenario(config, int(rng.integers(2**31)))[1]
        a0, p0, r0 = _random_point(rng, st)
        rho = config.rho
        user0 = metrics.user_sinr_core(st, rho, a0, p0, r0)
        eav0 = metrics.eav_sinr_core(st, rho, a0, p0, r0)
        masr0 = metrics.masr_core(st, a0, p0, r0)
        kappa = float(np.min(masr0)) * rng.uniform(0.7, 1.0) + 1e-6
        if kind is sca.Kind.CP:
            t0 = max(float(np.min(user0)) * rng.uniform(0.5, 1.0), 1e-6)
            thr = sca.Thresholds(nu=float(np.max(eav0)) * rng.uniform(1.0, 1.5) + 1e-6,
                                 kappa=kappa, varsigma=config.varsigma)
        else:
            t0 = float(np.max(eav0)) * rng.uniform(1.0, 1.5) + 1e-6
            thr = sca.Thresholds(nu=config.nu, kappa=kappa,
                                 varsigma=max(float(np.min(user0)) * rng.uniform(0.5, 1.0), 1e-6))
        prob = sca._Problem(st, config, kind, thr, opts)
        pt0 = sca.SCAPoint(a0, p0, r0, t0)
        prog, V = sca._build(prob, pt0, opts.lambda_penalty)
        J0 = sca._linearize(prob, pt0).J

        # tightness at the linearization point
        x0 = _embed(prog, V, a0, p0, r0, t0, J0)
        sur0 = _surrogate_slacks(prog, x0, st)
        ex0 = _exact_slacks(st, config, kind, thr, a0, p0, r0, t0)
        for fam in families:
            gap = float(np.max(np.abs(sur0[fam] - ex0[fam])))
            report.families[fam].tightness_gap = max(report.families[fam].tightness_gap, gap)

        for _ in range(per_lin):
            scale = 10.0 ** rng.uniform(-4, -0.5)
            a, p, r = _perturb(rng, a0, p0, r0, scale)
            t = max(t0 * (1.0 + scale * rng.standard_normal()), 0.0)
            J = np.sum(st.zeta * (1.0 - a)[:, None] * np.einsum("mj,mlj->ml", r, st.array_gain / st.N),
                       axis=0) + 1.0 / rho
            j = J * rng.uniform(0.9, 1.1, J.shape)
            s = np.sqrt(np.clip(a[:, None] * p, 0.0, None)) * rng.uniform(0.95, 1.0, p.shape)
            x = _embed(prog, V, a, p, r, t, j, s)
            box_ok = _boxes_ok(prog, x)
            sur = _surrogate_slacks(prog, x, st)
            ex = _exact_slacks(st, config, kind, thr, a, p, r, t)
            for fam in families:
                fa = report.families[fam]
                fa.samples += 1
                if not box_ok:
                    continue
                held = sur[fam] >= 0.0
                if fam == "eav" and kind is sca.Kind.SP and sp_eav_surrogate == "bound":
                    held &= sur["jam"] >= 0.0
                if not held.any():
                    continue
                fa.surrogate_feasible += int(held.sum())
                bad = held & (ex[fam] < -tol)
                if bad.any():
                    fa.violations += int(bad.sum())
                    fa.max_violation = max(fa.max_violation, float(np.max(-ex[fam][bad])))
    report.taylor_ratio = taylor_order_ratio(rng, stats if stats is not None else make_scenario(config, seed)[1],
                                             config)
    return report


def _boxes_ok(prog: ConicProgram, x: np.ndarray) -> bool:
    lo, hi = np.asarray(prog.lo), np.asarray(prog.hi)
    if np.any(x < lo) or np.any(x > hi):
        return False
    return all(x[g.w] <= math.sqrt(max(x[g.u] * x[g.v], 0.0)) + 1e-15 for g in prog.geomean_cons)
