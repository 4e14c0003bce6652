"""Canonical second-order-cone programs and the solver contract.

A :class:`ConicProgram` holds a linear objective, linear constraints,
second-order cones ``||A x + b|| <= c^T x + d`` and geometric-mean cones
``w <= sqrt(u v)``.  :func:`solve` hands it to Clarabel and re-checks the
returned point against the raw constraint list before calling it optimal.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8


class ConicModelError(ValueError):
    """Raised for malformed programs (bad indices, unsound cone usage...)."""


class Affine:
    """Sparse affine expression ``sum_i coef_i x_i + const``."""

    __slots__ = ("terms", "const")
    __array_ufunc__ = None  # let numpy scalars defer to the reflected operators

    def __init__(self, terms=None, const=0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def var(cls, index: int, coef: float = 1.0) -> "Affine":
        return cls({int(index): float(coef)})

    @classmethod
    def lift(cls, x) -> "Affine":
        return x if isinstance(x, Affine) else cls(const=float(x))

    def copy(self) -> "Affine":
        return Affine(self.terms, self.const)

    def __add__(self, other):
        other = Affine.lift(other)
        out = self.copy()
        for i, c in other.terms.items():
            out.terms[i] = out.terms.get(i, 0.0) + c
        out.const += other.const
        return out

    __radd__ = __add__

    def __neg__(self):
        return Affine({i: -c for i, c in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Affine.lift(other))

    def __rsub__(self, other):
        return Affine.lift(other) - self

    def __mul__(self, scalar):
        s = float(scalar)
        return Affine({i: s * c for i, c in self.terms.items()}, s * self.const)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def __repr__(self):
        parts = [f"{c:+.6g}*x{i}" for i, c in sorted(self.terms.items())]
        return " ".join(parts + [f"{self.const:+.6g}"])


def asum(exprs) -> Affine:
    out = Affine()
    for e in exprs:
        out = out + e
    return out


@dataclass
class LinearCon:
    expr: Affine  # expr (direction) bound, constant folded into bound
    direction: str  # "<=", ">=", "=="
    bound: float
    tag: str = ""


@dataclass
class SocCon:
    rows: list[Affine]
    rhs: Affine
    tag: str = ""
    quad_rhs: Affine | None = None  # set when built as sum of squares <= quad_rhs


@dataclass
class GeomeanCon:
    u: int
    v: int
    w: int
    tag: str = ""


class StatusKind(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class SolveStatus:
    kind: StatusKind
    objective: float = math.nan
    primal: np.ndarray | None = None
    max_violation: float = math.inf
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.kind is StatusKind.OPTIMAL


@dataclass
class ConicProgram:
    num_vars: int = 0
    objective: Affine = field(default_factory=Affine)
    sense: str = "min"
    linear_cons: list[LinearCon] = field(default_factory=list)
    soc_cons: list[SocCon] = field(default_factory=list)
    geomean_cons: list[GeomeanCon] = field(default_factory=list)
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    # -- construction ------------------------------------------------------
    def add_var(self, lo: float = 0.0, hi: float = math.inf, name: str = "") -> int:
        self.lo.append(float(lo))
        self.hi.append(float(hi))
        self.names.append(name or f"x{self.num_vars}")
        self.num_vars += 1
        return self.num_vars - 1

    def add_vars(self, shape, lo=0.0, hi=math.inf, name: str = "x") -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        idx = np.empty(shape, dtype=int)
        for pos in np.ndindex(*shape):
            suffix = ",".join(map(str, pos))
            idx[pos] = self.add_var(lo, hi, f"{name}[{suffix}]")
        return idx

    def x(self, index: int, coef: float = 1.0) -> Affine:
        return Affine.var(int(index), coef)

    def set_objective(self, expr, sense: str = "min"):
        if sense not in ("min", "max"):
            raise ConicModelError(f"unknown sense {sense!r}")
        self.objective = Affine.lift(expr)
        self.sense = sense

    def add_linear(self, expr, direction: str, bound: float = 0.0, tag: str = "") -> int:
        if direction not in ("<=", ">=", "=="):
            raise ConicModelError(f"unknown direction {direction!r}")
        expr = Affine.lift(expr)
        folded = Affine(expr.terms)
        self.linear_cons.append(LinearCon(folded, direction, float(bound) - expr.const, tag))
        return len(self.linear_cons) - 1

    def add_soc(self, rows, rhs, tag: str = "") -> int:
        """Install ``||rows|| <= rhs``."""
        self.soc_cons.append(SocCon([Affine.lift(r) for r in rows], Affine.lift(rhs), tag))
        return len(self.soc_cons) - 1

    def add_quadratic_upper(self, exprs, rhs, tag: str = "") -> int:
        return add_quadratic_upper(self, exprs, rhs, tag)

    def add_sqrt_product(self, u: int, v: int, hi: float = math.inf, tag: str = "") -> int:
        return add_sqrt_product(self, u, v, hi, tag)

    # -- inspection --------------------------------------------------------
    def validate(self):
        n = self.num_vars
        for e in self._all_exprs():
            for i, c in e.terms.items():
                if not 0 <= i < n:
                    raise ConicModelError(f"variable index {i} out of range")
                if not math.isfinite(c):
                    raise ConicModelError("non-finite coefficient")
            if not math.isfinite(e.const):
                raise ConicModelError("non-finite constant")
        for con in self.linear_cons:
            if not math.isfinite(con.bound):
                raise ConicModelError("non-finite bound")
        for g in self.geomean_cons:
            for i in (g.u, g.v, g.w):
                if not 0 <= i < n:
                    raise ConicModelError(f"variable index {i} out of range")
            if self.lo[g.u] < 0 or self.lo[g.v] < 0:
                raise ConicModelError("geomean arguments need lower bound 0")
        self._check_hypograph_usage()

    def _all_exprs(self):
        yield self.objective
        for c in self.linear_cons:
            yield c.expr
        for s in self.soc_cons:
            yield from s.rows
            yield s.rhs

    def _check_hypograph_usage(self):
        # w <= sqrt(uv) may only be used where larger w is harder to satisfy
        hypo = {g.w for g in self.geomean_cons}
        if not hypo:
            return
        sign = 1.0 if self.sense == "max" else -1.0
        for w in hypo:
            c = self.objective.terms.get(w, 0.0)
            if sign * c < 0:
                raise ConicModelError(f"{self.names[w]} enters the objective with the wrong sign")
        for con in self.linear_cons:
            for w in hypo & con.expr.terms.keys():
                c = con.expr.terms[w]
                if con.direction == "==" or (con.direction == "<=" and c > 0) or (con.direction == ">=" and c < 0):
                    raise ConicModelError(f"{self.names[w]} used on the wrong side of a constraint")
        for s in self.soc_cons:
            rows, rhs = (s.rows[:-1], s.quad_rhs) if s.quad_rhs is not None else (s.rows, s.rhs)
            for w in hypo:
                if any(w in r.terms for r in rows) or rhs.terms.get(w, 0.0) < 0:
                    raise ConicModelError(f"{self.names[w]} used on the wrong side of a cone")

    def violations(self, x: np.ndarray) -> np.ndarray:
        """Raw constraint violations (positive = violated) at ``x``."""
        out = [np.maximum(np.asarray(self.lo) - x, 0.0), np.maximum(x - np.asarray(self.hi), 0.0)]
        lin = []
        for c in self.linear_cons:
            v = c.expr.value(x) - c.bound
            lin.append(abs(v) if c.direction == "==" else (v if c.direction == "<=" else -v))
        soc = [math.hypot(*[r.value(x) for r in s.rows]) - s.rhs.value(x) if s.rows else -s.rhs.value(x)
               for s in self.soc_cons]
        # cone residual of ||(2w, u - v)|| <= u + v, Lipschitz unlike w - sqrt(uv)
        geo = [math.hypot(2.0 * x[g.w], x[g.u] - x[g.v]) - x[g.u] - x[g.v] for g in self.geomean_cons]
        return np.concatenate([np.ravel(o) for o in out] + [np.asarray(lin), np.asarray(soc), np.asarray(geo)])

    def max_violation(self, x: np.ndarray) -> float:
        v = self.violations(np.asarray(x, float))
        return float(max(0.0, v.max())) if v.size else 0.0

    def objective_value(self, x) -> float:
        return self.objective.value(np.asarray(x, float))

    def dump(self) -> str:
        """Human readable listing, one constraint per line."""
        lines = [f"{self.sense} {self.objective!r}"]
        for i in range(self.num_vars):
            lines.append(f"var {self.names[i]} in [{self.lo[i]:.6g}, {self.hi[i]:.6g}]")
        for c in self.linear_cons:
            lines.append(f"lin[{c.tag}] {c.expr!r} {c.direction} {c.bound:.6g}")
        for s in self.soc_cons:
            rows = "; ".join(repr(r) for r in s.rows)
            lines.append(f"soc[{s.tag}] ||{rows}|| <= {s.rhs!r}")
        for g in self.geomean_cons:
            lines.append(f"geomean[{g.tag}] {self.names[g.w]} <= sqrt({self.names[g.u]} * {self.names[g.v]})")
        return "\n".join(lines)

    def constraint_count(self) -> int:
        return len(self.linear_cons) + len(self.soc_cons) + len(self.geomean_cons)


def add_quadratic_upper(program: ConicProgram, exprs, rhs, tag: str = "") -> int:
    """Install ``sum_i exprs_i^2 <= rhs`` as the rotated cone
    ``||(2 exprs, 1 - rhs)|| <= 1 + rhs``."""
    if isinstance(exprs, (Affine, int, float)):
        exprs = [exprs]
    rhs = Affine.lift(rhs)
    rows = [2.0 * Affine.lift(e) for e in exprs] + [1.0 - rhs]
    idx = program.add_soc(rows, 1.0 + rhs, tag)
    program.soc_cons[idx].quad_rhs = rhs
    return idx


def add_sqrt_product(program: ConicProgram, u: int, v: int, hi: float = math.inf, tag: str = "") -> int:
    """Create ``w`` with ``0 <= w <= sqrt(u v)``; returns its index."""
    if program.lo[u] < 0 or program.lo[v] < 0:
        raise ConicModelError("sqrt product needs u, v >= 0")
    w = program.add_var(0.0, hi, tag or f"sqrt({program.names[u]}*{program.names[v]})")
    program.geomean_cons.append(GeomeanCon(u, v, w, tag))
    return w


# -- backend ----------------------------------------------------------------

def _to_standard_form(program: ConicProgram):
    """Clarabel form: A x + s = b, s in (zero, nonneg, soc...).

    Also returns a mask of the rows whose slack can be backed off to pull
    the solution strictly inside a constraint (inequalities and cone heads,
    not variable bounds).
    """
    import clarabel

    n = program.num_vars
    rows, cols, vals, b, backoff = [], [], [], [], []
    cones = []
    r = 0

    def put(expr_terms, sign, rhs_value):
        nonlocal r
        for i, c in expr_terms.items():
            rows.append(r)
            cols.append(i)
            vals.append(sign * c)
        b.append(rhs_value)
        backoff.append(False)
        r += 1

    lo, hi = np.asarray(program.lo), np.asarray(program.hi)
    eq = [c for c in program.linear_cons if c.direction == "=="]
    fixed = [i for i in range(n) if lo[i] == hi[i]]
    for c in eq:
        put(c.expr.terms, 1.0, c.bound)
    for i in fixed:
        put({i: 1.0}, 1.0, lo[i])
    if eq or fixed:
        cones.append(clarabel.ZeroConeT(len(eq) + len(fixed)))
    n_ineq = 0
    for c in program.linear_cons:
        if c.direction == "<=":
            put(c.expr.terms, 1.0, c.bound)
            backoff[-1] = True
            n_ineq += 1
        elif c.direction == ">=":
            put(c.expr.terms, -1.0, -c.bound)
            backoff[-1] = True
            n_ineq += 1
    for i in range(n):
        if lo[i] == hi[i]:
            continue
        if math.isfinite(lo[i]):
            put({i: 1.0}, -1.0, -lo[i])
            n_ineq += 1
        if math.isfinite(hi[i]):
            put({i: 1.0}, 1.0, hi[i])
            n_ineq += 1
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    for s in program.soc_cons:
        # s = (rhs, rows) ; A x + s = b  =>  s = b - A x
        put(s.rhs.terms, -1.0, s.rhs.const)
        backoff[-1] = True
        for e in s.rows:
            put(e.terms, -1.0, e.const)
        cones.append(clarabel.SecondOrderConeT(1 + len(s.rows)))
    for g in program.geomean_cons:
        # ||(2w, u - v)|| <= u + v
        put({g.u: 1.0, g.v: 1.0}, -1.0, 0.0)
        backoff[-1] = True
        put({g.w: 2.0}, -1.0, 0.0)
        put({g.u: 1.0, g.v: -1.0}, -1.0, 0.0)
        cones.append(clarabel.SecondOrderConeT(3))
    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))
    return A, np.asarray(b, float), cones, np.asarray(backoff, bool)


def _presolve(program: ConicProgram) -> str | None:
    for i in range(program.num_vars):
        if program.lo[i] > program.hi[i]:
            return f"empty bounds on {program.names[i]}"
    for c in program.linear_cons:
        if not c.expr.terms:
            v = -c.bound
            bad = abs(v) > DEFAULT_TOL if c.direction == "==" else (v > DEFAULT_TOL if c.direction == "<=" else -v > DEFAULT_TOL)
            if bad:
                return f"constant linear constraint {c.tag!r} is violated"
    return None


def solve(program: ConicProgram, solver_tol: float = DEFAULT_TOL, max_iter: int = 200,
          accept_tol: float | None = None) -> SolveStatus:
    """Solve with Clarabel at interior-point tolerance ``solver_tol``.

    A solution is reported Optimal when the clipped primal point violates no
    constraint by more than ``accept_tol`` (default ``10 * solver_tol``).
    """
    import clarabel

    program.validate()
    msg = _presolve(program)
    if msg:
        return SolveStatus(StatusKind.INFEASIBLE, message=msg)
    n = program.num_vars
    A, b, cones, backoff = _to_standard_form(program)
    q = np.zeros(n)
    for i, c in program.objective.terms.items():
        q[i] = c
    if program.sense == "max":
        q = -q
    P = sp.csc_matrix((n, n))
    inner = min(solver_tol, 1e-8) * 0.1
    limit = 10.0 * solver_tol if accept_tol is None else accept_tol
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = inner
    settings.tol_gap_abs = inner
    settings.tol_gap_rel = inner
    settings.tol_ktratio = 1e-7

    def run(rhs):
        sol = clarabel.DefaultSolver(P, q, A, rhs, cones, settings).solve()
        x = np.asarray(sol.x, float)
        if x.size == n and np.all(np.isfinite(x)):
            x = np.clip(x, program.lo, program.hi)
        return str(sol.status), x

    status, x = run(b)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SolveStatus(StatusKind.INFEASIBLE, message=status)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return SolveStatus(StatusKind.UNBOUNDED, message=status)
    if x.size != n or not np.all(np.isfinite(x)):
        return SolveStatus(StatusKind.NUMERICAL_FAILURE, message=status)
    viol = program.max_violation(x)
    if status in ("Solved", "AlmostSolved") and viol > limit:
        # interior-point tolerances are relative; back the inequality rows
        # off by twice the observed violation and keep the better answer
        st2, x2 = run(b - 2.0 * viol * backoff)
        if st2 in ("Solved", "AlmostSolved") and x2.size == n and np.all(np.isfinite(x2)):
            v2 = program.max_violation(x2)
            if v2 < viol:
                status, x, viol = st2, x2, v2
    obj = program.objective_value(x)
    if status == "Solved" or status == "AlmostSolved":
        if viol <= limit:
            return SolveStatus(StatusKind.OPTIMAL, obj, x, viol, status)
        return SolveStatus(StatusKind.NUMERICAL_FAILURE, obj, x, viol,
                           f"{status} but max violation {viol:.3g} > {limit:.1g}")
    if status in ("MaxIterations", "MaxTime"):
        return SolveStatus(StatusKind.ITERATION_LIMIT, obj, x, viol, status)
    return SolveStatus(StatusKind.NUMERICAL_FAILURE, obj, x, viol, status)
