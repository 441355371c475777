"""Dense linear programs and a bounded-variable primal simplex solver.

Problems are stated as

    maximize    c·v + constant
    subject to  a_i·v (<= | = | >=) b_i      for every row i
                lo_j <= v_j <= hi_j          (infinite bounds allowed)

Each row gets a slack s_i with a_i·v + s_i = b_i, bounded to [0, inf) for
``<=``, (-inf, 0] for ``>=`` and [0, 0] for ``=``. Phase one starts from the
slack basis where that is feasible and adds an artificial column elsewhere;
phase two keeps the artificials in the problem fixed at zero.

Text dump format (``LinearProgram.to_text``), one item per line::

    maximize <coef> v<j> + ... + <constant>
    r<i> [<tag>]: <coef> v<j> + ... <sense> <rhs>
    bounds v<j> [<name>]: <lo> <hi>
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from softbound.config import (
    BLAND_FACTOR,
    FEASIBILITY_TOL,
    MAX_ITER_FACTOR,
    OPTIMALITY_TOL,
    PIVOT_TOL,
    RATIO_TOL,
)
from softbound.exceptions import LpConstructionError

logger = logging.getLogger(__name__)

Terms = Union[Dict[int, float], Iterable[Tuple[int, float]]]


class Sense(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


@dataclass(frozen=True, eq=False)
class Row:
    """One linear constraint coeffs·v (sense) rhs."""

    coeffs: np.ndarray
    sense: Sense
    rhs: float
    tag: str = ""


@dataclass(eq=False)
class LinearProgram:
    """Dense LP in maximization form."""

    objective: np.ndarray
    rows: List[Row]
    lower: np.ndarray
    upper: np.ndarray
    objective_constant: float = 0.0
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).reshape(-1)
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        n = self.objective.size
        if self.lower.size != n or self.upper.size != n:
            raise LpConstructionError("variable bounds do not match the objective length")
        if not np.all(np.isfinite(self.objective)):
            raise LpConstructionError("objective has non-finite coefficients")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise LpConstructionError("variable bounds contain nan")
        for i, row in enumerate(self.rows):
            if row.coeffs.shape != (n,):
                raise LpConstructionError(f"row {i} has {row.coeffs.size} coefficients, expected {n}")
            if not (np.all(np.isfinite(row.coeffs)) and np.isfinite(row.rhs)):
                raise LpConstructionError(f"row {i} ({row.tag}) has non-finite entries")
        if self.names is not None and len(self.names) != n:
            raise LpConstructionError("variable names do not match the objective length")

    @property
    def n_vars(self) -> int:
        return self.objective.size

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def matrix(self) -> Tuple[np.ndarray, List[Sense], np.ndarray]:
        if not self.rows:
            return np.zeros((0, self.n_vars)), [], np.zeros(0)
        A = np.vstack([row.coeffs for row in self.rows])
        b = np.array([row.rhs for row in self.rows], dtype=float)
        return A, [row.sense for row in self.rows], b

    def value(self, point: np.ndarray) -> float:
        return float(self.objective @ point) + self.objective_constant

    def to_text(self) -> str:
        """Plain debugging dump; see the module docstring for the format."""

        def linear(coeffs: np.ndarray) -> str:
            terms = [f"{c:.17g} v{j}" for j, c in enumerate(coeffs) if c != 0.0]
            return " + ".join(terms) if terms else "0"

        lines = [f"maximize {linear(self.objective)} + {self.objective_constant:.17g}"]
        for i, row in enumerate(self.rows):
            tag = f" [{row.tag}]" if row.tag else ""
            lines.append(f"r{i}{tag}: {linear(row.coeffs)} {row.sense.value} {row.rhs:.17g}")
        for j in range(self.n_vars):
            name = f" [{self.names[j]}]" if self.names else ""
            lines.append(f"bounds v{j}{name}: {self.lower[j]:.17g} {self.upper[j]:.17g}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: LpStatus
    objective_value: float
    point: np.ndarray
    iterations: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class LpBuilder:
    """Incremental LP construction with named variables and tagged rows."""

    def __init__(self):
        self._names: List[str] = []
        self._index: Dict[str, int] = {}
        self._lower: List[float] = []
        self._upper: List[float] = []
        self._rows: List[Tuple[Dict[int, float], Sense, float, str]] = []
        self._objective: Dict[int, float] = {}
        self._constant = 0.0

    @property
    def n_vars(self) -> int:
        return len(self._names)

    def add_variable(self, name: str, lower: float = -np.inf, upper: float = np.inf) -> int:
        """
        Add a variable and return its column index.

        Raises:
            LpConstructionError: On duplicate names or lower > upper
        """
        if name in self._index:
            raise LpConstructionError(f"duplicate variable {name!r}")
        if np.isnan(lower) or np.isnan(upper) or lower > upper:
            raise LpConstructionError(f"variable {name!r} has empty bounds [{lower}, {upper}]")
        self._index[name] = len(self._names)
        self._names.append(name)
        self._lower.append(float(lower))
        self._upper.append(float(upper))
        return self._index[name]

    def index(self, name: str) -> int:
        return self._index[name]

    def add_row(self, terms: Terms, sense: Sense, rhs: float, tag: str = "") -> None:
        coeffs: Dict[int, float] = {}
        pairs = terms.items() if isinstance(terms, dict) else terms
        for j, c in pairs:
            coeffs[j] = coeffs.get(j, 0.0) + float(c)
        self._rows.append((coeffs, Sense(sense), float(rhs), tag))

    def set_objective(self, terms: Terms, constant: float = 0.0) -> None:
        self._objective = {}
        pairs = terms.items() if isinstance(terms, dict) else terms
        for j, c in pairs:
            self._objective[j] = self._objective.get(j, 0.0) + float(c)
        self._constant = float(constant)

    def build(self) -> LinearProgram:
        n = self.n_vars
        objective = np.zeros(n)
        for j, c in self._objective.items():
            objective[j] += c
        rows = []
        for coeffs, sense, rhs, tag in self._rows:
            dense = np.zeros(n)
            for j, c in coeffs.items():
                dense[j] = c
            rows.append(Row(dense, sense, rhs, tag))
        return LinearProgram(
            objective=objective,
            rows=rows,
            lower=np.array(self._lower),
            upper=np.array(self._upper),
            objective_constant=self._constant,
            names=list(self._names),
        )


# ---------------------------------------------------------------------------
# solver

class _Phase:
    """Working state of one simplex phase over A v = b, lo <= v <= hi."""

    def __init__(self, A, b, cost, lo, hi, basis, values):
        self.A = A
        self.b = b
        self.cost = cost
        self.lo = lo
        self.hi = hi
        self.basis = basis
        self.values = values
        self.iterations = 0

    def _basic_values(self) -> np.ndarray:
        nonbasic = self.values.copy()
        nonbasic[self.basis] = 0.0
        return np.linalg.solve(self.A[:, self.basis], self.b - self.A @ nonbasic)

    def run(self, max_iter: int) -> LpStatus:
        m, N = self.A.shape
        is_basic = np.zeros(N, dtype=bool)
        is_basic[self.basis] = True
        stall_limit = BLAND_FACTOR * (m + N)
        stalled = 0
        bland = False
        last_objective = -np.inf

        while self.iterations < max_iter:
            self.values[self.basis] = self._basic_values()
            objective = float(self.cost @ self.values)
            if objective > last_objective + OPTIMALITY_TOL:
                stalled = 0
            else:
                stalled += 1
                if not bland and stalled > stall_limit:
                    logger.debug("Simplex stalled for %d iterations, switching to Bland's rule", stalled)
                    bland = True
            last_objective = max(last_objective, objective)

            B = self.A[:, self.basis]
            duals = np.linalg.solve(B.T, self.cost[self.basis])
            reduced = self.cost - duals @ self.A
            can_rise = (reduced > OPTIMALITY_TOL) & (self.values < self.hi)
            can_fall = (reduced < -OPTIMALITY_TOL) & (self.values > self.lo)
            candidates = np.flatnonzero((can_rise | can_fall) & ~is_basic)
            if candidates.size == 0:
                return LpStatus.OPTIMAL
            if bland:
                entering = int(candidates[0])
            else:
                entering = int(candidates[np.argmax(np.abs(reduced[candidates]))])
            direction = 1.0 if reduced[entering] > 0 else -1.0

            alpha = np.linalg.solve(B, self.A[:, entering])
            delta = -direction * alpha
            step = self.hi[entering] - self.lo[entering]
            leaving = -1
            leaving_bound = 0.0
            for r, var in enumerate(self.basis):
                if delta[r] < -PIVOT_TOL and np.isfinite(self.lo[var]):
                    limit, bound = (self.values[var] - self.lo[var]) / -delta[r], self.lo[var]
                elif delta[r] > PIVOT_TOL and np.isfinite(self.hi[var]):
                    limit, bound = (self.hi[var] - self.values[var]) / delta[r], self.hi[var]
                else:
                    continue
                limit = max(limit, 0.0)
                if leaving < 0:
                    better = limit < step
                elif limit < step - RATIO_TOL:
                    better = True
                elif limit <= step + RATIO_TOL:
                    if bland:
                        better = var < self.basis[leaving]
                    else:
                        better = abs(delta[r]) > abs(delta[leaving])
                else:
                    better = False
                if better:
                    step = limit if leaving < 0 else min(step, limit)
                    leaving, leaving_bound = r, bound
            if not np.isfinite(step):
                return LpStatus.UNBOUNDED

            self.iterations += 1
            if leaving < 0:
                # bound flip, basis unchanged
                self.values[entering] = self.hi[entering] if direction > 0 else self.lo[entering]
                continue
            self.values[entering] += direction * step
            old = self.basis[leaving]
            self.values[old] = leaving_bound
            is_basic[old] = False
            is_basic[entering] = True
            self.basis[leaving] = entering
        return LpStatus.ITER_LIMIT


def _nonbasic_start(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))


def _solve_unconstrained(lp: LinearProgram) -> LpSolution:
    c = lp.objective
    point = _nonbasic_start(lp.lower, lp.upper)
    point = np.where(c > 0, lp.upper, np.where(c < 0, lp.lower, point))
    if not np.all(np.isfinite(point)):
        return LpSolution(LpStatus.UNBOUNDED, np.inf, np.full(lp.n_vars, np.nan))
    return LpSolution(LpStatus.OPTIMAL, lp.value(point), point)


def _failed(status: LpStatus, n: int, iterations: int) -> LpSolution:
    value = {LpStatus.UNBOUNDED: np.inf, LpStatus.INFEASIBLE: -np.inf}.get(status, np.nan)
    return LpSolution(status, value, np.full(n, np.nan), iterations)


def solve(lp: LinearProgram) -> LpSolution:
    """
    Maximize a linear program with the two-phase bounded simplex method.

    Args:
        lp: Problem to solve

    Returns:
        LpSolution; infeasible, unbounded and iteration-limited problems are
        reported through the status, never raised
    """
    n = lp.n_vars
    if np.any(lp.lower > lp.upper):
        return _failed(LpStatus.INFEASIBLE, n, 0)
    if lp.n_rows == 0:
        return _solve_unconstrained(lp)

    A, senses, b = lp.matrix()
    m = A.shape[0]
    slack_lo = np.array([-np.inf if s is Sense.GE else 0.0 for s in senses])
    slack_hi = np.array([0.0 if s is not Sense.LE else np.inf for s in senses])

    start = _nonbasic_start(lp.lower, lp.upper)
    residual = b - A @ start
    use_slack = (residual >= slack_lo) & (residual <= slack_hi)
    needs_artificial = np.flatnonzero(~use_slack)
    n_art = needs_artificial.size

    # columns: [original | slacks | artificials]
    art_cols = np.zeros((m, n_art))
    art_cols[needs_artificial, np.arange(n_art)] = np.where(residual[needs_artificial] >= 0, 1.0, -1.0)
    full = np.hstack([A, np.eye(m), art_cols])
    lo = np.concatenate([lp.lower, slack_lo, np.zeros(n_art)])
    hi = np.concatenate([lp.upper, slack_hi, np.full(n_art, np.inf)])
    values = np.concatenate([start, np.zeros(m), np.zeros(n_art)])
    basis = np.where(use_slack, n + np.arange(m), 0)
    basis[needs_artificial] = n + m + np.arange(n_art)

    max_iter = MAX_ITER_FACTOR * (m + n + n_art) + 1000
    total_iter = 0
    try:
        if n_art:
            cost = np.concatenate([np.zeros(n + m), -np.ones(n_art)])
            phase = _Phase(full, b, cost, lo, hi, basis, values)
            status = phase.run(max_iter)
            total_iter = phase.iterations
            if status is not LpStatus.OPTIMAL:
                logger.warning("Phase one ended with status %s", status.value)
                return _failed(LpStatus.ITER_LIMIT, n, total_iter)
            infeasibility = float(values[n + m:].sum())
            if infeasibility > FEASIBILITY_TOL * max(1.0, float(np.abs(b).max())):
                logger.debug("LP infeasible: phase one residual %.3e", infeasibility)
                return _failed(LpStatus.INFEASIBLE, n, total_iter)
            hi[n + m:] = 0.0
            values[n + m:] = 0.0

        cost = np.concatenate([lp.objective, np.zeros(m + n_art)])
        phase = _Phase(full, b, cost, lo, hi, basis, values)
        status = phase.run(max_iter)
        total_iter += phase.iterations
    except np.linalg.LinAlgError as exc:
        logger.warning("Simplex basis became singular: %s", exc)
        return _failed(LpStatus.ITER_LIMIT, n, total_iter)

    logger.debug("LP %dx%d solved: %s after %d iterations", m, n, status.value, total_iter)
    if status is not LpStatus.OPTIMAL:
        return _failed(status, n, total_iter)
    point = np.clip(values[:n], lp.lower, lp.upper)
    return LpSolution(status, lp.value(point), point, total_iter)


def check_feasible(lp: LinearProgram, point: np.ndarray, tol: float = FEASIBILITY_TOL) -> Tuple[bool, float]:
    """
    Check a point against every row and variable bound.

    Returns:
        (feasible, worst residual) where feasible means worst <= tol
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (lp.n_vars,):
        raise LpConstructionError(f"point has {point.size} entries, LP has {lp.n_vars} variables")
    worst = float(np.max(np.maximum(lp.lower - point, point - lp.upper), initial=0.0))
    for row in lp.rows:
        activity = float(row.coeffs @ point)
        if row.sense is Sense.LE:
            gap = activity - row.rhs
        elif row.sense is Sense.GE:
            gap = row.rhs - activity
        else:
            gap = abs(activity - row.rhs)
        worst = max(worst, gap)
    worst = max(worst, 0.0)
    return worst <= tol, worst
