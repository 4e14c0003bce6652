"""Batch experiments: convergence traces, kappa sweeps, secrecy CDFs, validation."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, oracle, sca
from .conic import ConicProgram, solve
from .scenario import ChannelStats, PathLossModel, ScenarioDocument, SystemConfig, db2lin, make_scenario

STRATEGIES = ("CP", "SP", "AVG")


@dataclass
class ExperimentSpec:
    kind: str  # convergence | kappa_sweep | cdf | validate | solve
    trials: int = 20
    seed: int = 0
    strategies: tuple[str, ...] = STRATEGIES
    kappa_db: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)
    out: str | None = None
    prelog: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        self.strategies = tuple(s.upper() for s in self.strategies)
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise ValueError(f"unknown strategies {sorted(bad)}")
        if self.kind == "kappa_sweep" and not self.kappa_db:
            raise ValueError("kappa sweep needs at least one value")


@dataclass
class TrialOutcome:
    seed: int
    strategy: str
    status: str
    report: metrics.RateReport | None
    iterations: int = 0
    trajectory: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.report is not None and self.status in ("Converged", "Baseline")


def config_hash(doc: ScenarioDocument, spec: ExperimentSpec | None = None) -> str:
    payload = {"scenario": doc.to_dict()}
    if spec is not None:
        payload["experiment"] = dataclasses.asdict(spec) | {"out": None, "jobs": None}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance_line(doc: ScenarioDocument, spec: ExperimentSpec | None = None) -> str:
    s = doc.system
    return (f"# config-hash: {config_hash(doc, spec)} M={s.M} N={s.N} K={s.K} L={s.L} "
            f"nu={s.nu!r} kappa={s.kappa!r} varsigma={s.varsigma!r}")


def write_csv(path, rows: list[dict], columns: list[str], header_line: str) -> str:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# -- single trials ----------------------------------------------------------

def run_strategy(stats: ChannelStats, config: SystemConfig, strategy: str, seed: int,
                 thresholds: sca.Thresholds | None = None, opts: sca.SCAConfig | None = None,
                 prelog: bool = False) -> TrialOutcome:
    thr = thresholds or sca.Thresholds.from_config(config)
    t0 = time.perf_counter()
    if strategy == "AVG":
        alloc = metrics.average_baseline(stats, config)
        rep = metrics.rates_and_secrecy(stats, alloc, config, prelog=prelog, nu=thr.nu, kappa=thr.kappa)
        return TrialOutcome(seed, strategy, "Baseline", rep, 0, [], time.perf_counter() - t0)
    res = sca.sca_solve(stats, strategy, config, thr, seed, opts)
    rep = None
    if res.final is not None:
        kw = dict(nu=thr.nu, kappa=thr.kappa, varsigma=thr.varsigma)
        if strategy == "SP":
            kw["nu"] = math.inf
        rep = metrics.rates_and_secrecy(stats, res.final, config, check_qos=strategy == "SP",
                                        prelog=prelog, **kw)
    return TrialOutcome(seed, strategy, res.status.value, rep, res.main_iters, res.trajectory,
                        time.perf_counter() - t0)


def _trial_job(args):
    doc_dict, seed, strategies, thr, prelog, keep_traj = args
    doc = ScenarioDocument.from_dict(doc_dict)
    _, stats = make_scenario(doc.system, seed, doc.pathloss)
    out = []
    for s in strategies:
        o = run_strategy(stats, doc.system, s, seed, thr, prelog=prelog)
        if not keep_traj:
            o.trajectory = []
        out.append(o)
    return out


def solve_trials(doc: ScenarioDocument, seeds, strategies, thresholds: sca.Thresholds | None = None,
                 prelog: bool = False, jobs: int = 1, keep_trajectory: bool = False) -> list[TrialOutcome]:
    """Run every strategy on the scenario drawn from each seed."""
    thr = thresholds or sca.Thresholds.from_config(doc.system)
    tasks = [(doc.to_dict(), int(s), tuple(strategies), thr, prelog, keep_trajectory) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            chunks = list(ex.map(_trial_job, tasks))
    else:
        chunks = [_trial_job(t) for t in tasks]
    outcomes = [o for c in chunks for o in c]
    outcomes.sort(key=lambda o: (STRATEGIES.index(o.strategy), o.seed))
    return outcomes


def _trial_seeds(spec: ExperimentSpec):
    return [spec.seed + i for i in range(spec.trials)]


# -- figure-level experiments ----------------------------------------------

CONVERGENCE_COLUMNS = ["strategy", "seed", "iter", "phase", "rate_comm_min", "rate_comm_mean",
                       "rate_eav_max", "rate_secrecy_mean", "status"]


def _rates(entry_alloc, stats, config, prelog):
    rep = metrics.rates_and_secrecy(stats, entry_alloc, config, prelog=prelog)
    return rep


def run_convergence(spec: ExperimentSpec, doc: ScenarioDocument) -> tuple[list[dict], list[TrialOutcome]]:
    outcomes = solve_trials(doc, _trial_seeds(spec), spec.strategies, prelog=spec.prelog,
                            jobs=spec.jobs, keep_trajectory=True)
    rows = []
    stats_cache = {}
    for o in outcomes:
        if o.seed not in stats_cache:
            stats_cache[o.seed] = make_scenario(doc.system, o.seed, doc.pathloss)[1]
        stats = stats_cache[o.seed]
        if o.strategy == "AVG":
            entries = [(0, "baseline", o.report)] if o.report is not None else []
        else:
            entries = [(i, e.phase, _rates(e.allocation, stats, doc.system, spec.prelog))
                       for i, e in enumerate(o.trajectory)]
        for i, phase, rep in entries:
            rows.append(dict(strategy=o.strategy, seed=o.seed, iter=i, phase=phase,
                             rate_comm_min=float(rep.rate_user.min()),
                             rate_comm_mean=float(rep.rate_user.mean()),
                             rate_eav_max=float(rep.rate_eav.max()),
                             rate_secrecy_mean=rep.secrecy_mean, status=o.status))
        if not entries:
            rows.append(dict(strategy=o.strategy, seed=o.seed, iter=0, phase="failed",
                             rate_comm_min=math.nan, rate_comm_mean=math.nan, rate_eav_max=math.nan,
                             rate_secrecy_mean=math.nan, status=o.status))
    return rows, outcomes


SWEEP_COLUMNS = ["kappa_db", "strategy", "secrecy_mean", "secrecy_std", "rate_eav_mean",
                 "trials", "infeasible_count"]


def summarize(outcomes: list[TrialOutcome], strategy: str) -> dict:
    ok = [o for o in outcomes if o.strategy == strategy and o.ok]
    sec = np.array([o.report.secrecy_mean for o in ok])
    eav = np.array([float(o.report.rate_eav.max()) for o in ok])
    n_all = sum(1 for o in outcomes if o.strategy == strategy)
    return dict(strategy=strategy,
                secrecy_mean=float(sec.mean()) if sec.size else math.nan,
                secrecy_std=float(sec.std(ddof=1)) if sec.size > 1 else math.nan,
                rate_eav_mean=float(eav.mean()) if eav.size else math.nan,
                trials=n_all, infeasible_count=n_all - len(ok))


def run_kappa_sweep(spec: ExperimentSpec, doc: ScenarioDocument,
                    cache: dict | None = None) -> tuple[list[dict], dict]:
    """Mean per-UE secrecy for every kappa; failed runs are counted and excluded."""
    rows, per_kappa = [], {}
    for kdb in spec.kappa_db:
        thr = sca.Thresholds.from_config(doc.system, kappa=db2lin(kdb))
        key = (float(kdb), spec.seed, spec.trials, tuple(spec.strategies))
        if cache is not None and key in cache:
            outcomes = cache[key]
        else:
            outcomes = solve_trials(doc, _trial_seeds(spec), spec.strategies, thr,
                                    prelog=spec.prelog, jobs=spec.jobs)
            if cache is not None:
                cache[key] = outcomes
        per_kappa[float(kdb)] = outcomes
        for s in spec.strategies:
            rows.append(dict(kappa_db=float(kdb), **summarize(outcomes, s)))
    return rows, per_kappa


CDF_COLUMNS = ["strategy", "secrecy", "cdf"]


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(np.asarray(values, float))
    return v, np.arange(1, v.size + 1) / v.size


def run_cdf(spec: ExperimentSpec, doc: ScenarioDocument,
            outcomes: list[TrialOutcome] | None = None) -> tuple[list[dict], list[TrialOutcome]]:
    if outcomes is None:
        outcomes = solve_trials(doc, _trial_seeds(spec), spec.strategies, prelog=spec.prelog, jobs=spec.jobs)
    rows = []
    for s in spec.strategies:
        vals = [o.report.secrecy_mean for o in outcomes if o.strategy == s and o.ok]
        x, f = empirical_cdf(vals)
        rows.extend(dict(strategy=s, secrecy=float(a), cdf=float(b)) for a, b in zip(x, f))
    return rows, outcomes


def dominates(better, worse, tol: float = 0.0) -> bool:
    """First-order stochastic dominance: every quantile of ``better`` >= that of ``worse``.

    Samples of unequal size are compared on the union of probability levels.
    """
    b, w = np.sort(np.asarray(better, float)), np.sort(np.asarray(worse, float))
    if b.size == 0 or w.size == 0:
        return False
    levels = np.union1d(np.arange(1, b.size + 1) / b.size, np.arange(1, w.size + 1) / w.size)
    qb = b[np.minimum(np.ceil(levels * b.size).astype(int) - 1, b.size - 1)]
    qw = w[np.minimum(np.ceil(levels * w.size).astype(int) - 1, w.size - 1)]
    return bool(np.all(qb >= qw - tol))


# -- validation -------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    passed: bool
    samples: int
    max_deviation: float
    detail: str = ""


@dataclass
class ValidateReport:
    suites: list[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "suites": [dataclasses.asdict(s) for s in self.suites]}

    def text(self) -> str:
        lines = [f"{'PASS' if s.passed else 'FAIL'} {s.name}: samples={s.samples} "
                 f"max_deviation={s.max_deviation:.3g} {s.detail}" for s in self.suites]
        return "\n".join(lines)


def random_allocation(stats: ChannelStats, rng) -> metrics.Allocation:
    """Random fractional allocation that uses part of every AP's budget."""
    M, K, L = stats.M, stats.K, stats.L
    a = rng.uniform(0.0, 1.0, M)
    p = rng.dirichlet(np.ones(K), M) * rng.uniform(0.2, 1.0, (M, 1))
    r = rng.dirichlet(np.ones(L), M) * rng.uniform(0.2, 1.0, (M, 1))
    return metrics.Allocation.from_fractions(stats, a, p, r)


def mc_fidelity(config: SystemConfig, pathloss: PathLossModel, scenarios: int, trials: int,
                seed: int, corrupt_gamma: bool = False) -> SuiteResult:
    """Closed-form SINRs against Monte Carlo on random scenarios and allocations.

    ``corrupt_gamma`` replaces the estimate variance by the channel gain in the
    closed form only (negative control: the suite must then fail).
    """
    rng = np.random.default_rng(seed)
    worst, n, fails = 0.0, 0, 0
    for i in range(scenarios):
        _, stats = make_scenario(config, seed + i, pathloss)
        alloc = random_allocation(stats, rng)
        cf_stats = dataclasses.replace(stats, gamma=stats.beta.copy()) if corrupt_gamma else stats
        cu = metrics.user_sinrs(cf_stats, alloc, config)
        ce = metrics.eav_sinrs(cf_stats, alloc, config)
        mu, su = metrics.mc_user_sinrs(stats, alloc, config, trials, seed + 1000 + i)
        me, se = metrics.mc_eav_sinrs(stats, alloc, config, trials, seed + 2000 + i)
        z = np.concatenate([np.abs(cu - mu) / su, np.abs(ce - me) / se])
        worst = max(worst, float(z.max()))
        fails += int(np.sum(z > 3.0))
        n += z.size
    return SuiteResult("mc_fidelity", fails == 0, n, worst,
                       f"comparisons beyond 3 stderr: {fails}")


def audit_suite(config: SystemConfig, trials: int, seed: int) -> SuiteResult:
    total, worst_gap, n = 0, 0.0, 0
    feasible = []
    for kind in ("CP", "SP"):
        rep = oracle.surrogate_audit(None, kind, trials, seed, config)
        total += rep.total_violations
        worst_gap = max(worst_gap, rep.max_tightness_gap)
        n += sum(f.samples for f in rep.families.values())
        feasible.append(min(f.surrogate_feasible for f in rep.families.values()))
    ok = total == 0 and worst_gap <= 1e-9 and min(feasible) > 0
    return SuiteResult("surrogate_audit", ok, n, worst_gap,
                       f"soundness violations: {total}; min surrogate-feasible per family: {min(feasible)}")


def cross_check_suite(instances: int, seed: int, grid_step: float = 0.05,
                      rate: float = 0.7, rel: float = 0.05) -> SuiteResult:
    """Polished SCA against grid search on tiny instances."""
    cfg = SystemConfig(M=3, N=2, K=1, L=1)
    results = oracle_cross_check(cfg, PathLossModel(), instances, seed, grid_step, rel)
    comparable = [r for r in results if r["grid_feasible"]]
    hits = sum(r["within"] for r in comparable)
    frac = hits / len(comparable) if comparable else 0.0
    infeasible_final = sum(1 for r in results if r["sca_final"] and not r["sca_exact_feasible"])
    ok = frac >= rate and infeasible_final == 0
    return SuiteResult("oracle_cross_check", ok, len(results), 1.0 - frac,
                       f"within {rel:.0%} of grid best: {hits}/{len(comparable)}; "
                       f"infeasible polished points: {infeasible_final}")


def oracle_cross_check(cfg: SystemConfig, pathloss: PathLossModel, instances: int, seed: int,
                       grid_step: float = 0.05, rel: float = 0.05, kind: str = "CP") -> list[dict]:
    thr = sca.Thresholds.from_config(cfg)
    out = []
    for i in range(instances):
        _, stats = make_scenario(cfg, seed + i, pathloss)
        bf = oracle.brute_force(stats, kind, thr, oracle.GridSpec(grid_step), cfg)
        res = sca.sca_solve(stats, kind, cfg, thr, seed + i)
        row = dict(seed=seed + i, grid_feasible=bf.feasible, grid_best=bf.objective,
                   sca_status=res.status.value, sca_objective=res.objective,
                   sca_final=res.final is not None, sca_exact_feasible=False, within=False)
        if res.final is not None:
            viol = metrics.feasibility_check(stats, res.final, cfg, nu=thr.nu if kind == "CP" else math.inf,
                                             kappa=thr.kappa, varsigma=thr.varsigma,
                                             check_qos=kind == "SP")
            row["sca_exact_feasible"] = not viol
        if bf.feasible and res.final is not None:
            if kind == "CP":
                row["within"] = res.objective >= bf.objective * (1.0 - rel)
            else:
                row["within"] = res.objective <= bf.objective * (1.0 + rel)
        out.append(row)
    return out


def conic_suite() -> SuiteResult:
    """Textbook conic fixtures with known optima (1, 5, 6 and the AM-GM point 1)."""
    cases = []
    p = ConicProgram()
    x = p.add_var(-10, 10)
    p.add_linear(p.x(x), ">=", 1.0)
    p.set_objective(p.x(x), "min")
    cases.append((p, 1.0))
    p = ConicProgram()
    t = p.add_var(0, 100)
    p.add_soc([3.0, 4.0], p.x(t))
    p.set_objective(p.x(t), "min")
    cases.append((p, 5.0))
    p = ConicProgram()
    u, v = p.add_var(4, 4), p.add_var(9, 9)
    w = p.add_sqrt_product(u, v)
    p.set_objective(p.x(w), "max")
    cases.append((p, 6.0))
    p = ConicProgram()
    u, v = p.add_var(0, 10), p.add_var(0, 10)
    w = p.add_sqrt_product(u, v)
    p.add_linear(p.x(u) + p.x(v), "==", 2.0)
    p.set_objective(p.x(w), "max")
    cases.append((p, 1.0))
    worst = 0.0
    ok = True
    for prog, expected in cases:
        st = solve(prog)
        dev = abs(st.objective - expected) if st.ok else math.inf
        worst = max(worst, dev, st.max_violation if st.ok else math.inf)
        ok &= st.ok and dev <= 1e-6 and st.max_violation <= 1e-7
    return SuiteResult("conic_fixtures", ok, len(cases), float(worst))


def run_validate(doc: ScenarioDocument, *, seed: int = 0, mc_scenarios: int = 30,
                 mc_trials: int = 100_000, audit_trials: int = 10_000, cross_instances: int = 50,
                 corrupt_gamma: bool = False) -> ValidateReport:
    desk = doc.system
    suites = [
        mc_fidelity(desk, doc.pathloss, mc_scenarios, mc_trials, seed, corrupt_gamma),
        audit_suite(desk, audit_trials, seed),
        cross_check_suite(cross_instances, seed),
        conic_suite(),
    ]
    return ValidateReport(suites)
