"""Worst-case uncertainty-score verification of ReLU ensembles over an l-inf ball.

The score-maximization LP has, per ensemble member m:

  * one variable per active or unstable hidden neuron (inactive neurons are
    the constant 0 and get no variable);
  * K logit variables, bounded by the interval box, and K probability
    variables p^m;

plus the shared input variables, bounded by the ball. Its rows are

  * one equality per active neuron and two inequalities per unstable neuron
    (post >= z, post <= u/(u-l)·(z - l)); post >= 0 is a variable bound;
  * K logit equalities and one simplex equality sum_k p^m_k = 1;
  * K softmax rows: a lower plane for k = y* and an upper plane for k != y*.

So for an ensemble with n inputs, K classes and per-member counts A_m / U_m
of active / unstable hidden neurons:

    variables = n + sum_m (A_m + U_m + 2K)
    rows      = sum_m (A_m + 2·U_m + 2K + 1)

minus any softmax row dropped for non-finite coefficients. Constant bounds
enter as variable bounds: p^m_{y*} >= p_lo and p^m_k <= p_hi for k != y*.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from softbound.config import (
    ATTACK_RESTARTS,
    ATTACK_STEP_DIVISOR,
    ATTACK_STEPS,
    SOUNDNESS_SLACK,
    thread_count,
)
from softbound.exceptions import DomainError, LpConstructionError, UsageError
from softbound.services.bounds_service import (
    BoundKind,
    ConstBounds,
    Side,
    const_bounds,
    diff_box,
    softmax,
)
from softbound.services.linearized_service import AffineBound
from softbound.services.lp_service import (
    LinearProgram,
    LpBuilder,
    LpStatus,
    Sense,
    solve,
)
from softbound.services.network_service import (
    Ensemble,
    LayerBounds,
    ReluPhase,
    interval_propagate,
    relu_relaxation,
)

logger = logging.getLogger(__name__)

# smallest probability used when reporting NLL bounds
_NLL_FLOOR = 1e-300


class ScoreRule(str, Enum):
    NLL = "nll"
    BRIER = "brier"


class BoundFamily(str, Enum):
    """Which pair of linear softmax bounds the LP uses."""

    LIN = "lin"
    ER_TANGENT = "er_tangent"
    LSE_TANGENT = "lse_tangent"
    LSE_STAR_TANGENT = "lse_star_tangent"

    @property
    def kinds(self) -> Tuple[BoundKind, BoundKind]:
        return {
            BoundFamily.LIN: (BoundKind.LIN_LO, BoundKind.LIN_HI),
            BoundFamily.ER_TANGENT: (BoundKind.ER_LO, BoundKind.LSE_HI),
            BoundFamily.LSE_TANGENT: (BoundKind.LSE_LO, BoundKind.LSE_HI),
            BoundFamily.LSE_STAR_TANGENT: (BoundKind.LSE_STAR_LO, BoundKind.LSE_HI),
        }[self]


@dataclass(frozen=True, eq=False)
class ScoreSpec:
    """Which score to maximize around which labelled input."""

    rule: ScoreRule
    y_star: int
    x_star: np.ndarray
    epsilon: float

    def __post_init__(self):
        x_star = np.array(self.x_star, dtype=float).reshape(-1)
        if self.epsilon < 0 or not np.isfinite(self.epsilon):
            raise DomainError(f"epsilon must be a finite non-negative radius, got {self.epsilon}")
        if self.y_star < 0:
            raise UsageError(f"class index {self.y_star} is negative")
        x_star.setflags(write=False)
        object.__setattr__(self, "rule", ScoreRule(self.rule))
        object.__setattr__(self, "x_star", x_star)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def with_epsilon(self, epsilon: float) -> "ScoreSpec":
        return ScoreSpec(self.rule, self.y_star, self.x_star, epsilon)


@dataclass(frozen=True, eq=False)
class LinearObjective:
    """coeffs·p + constant over the ensemble-averaged probabilities."""

    coeffs: np.ndarray
    constant: float

    def value(self, p: np.ndarray) -> float:
        return float(self.coeffs @ p) + self.constant


@dataclass(frozen=True)
class VerifyResult:
    score_upper_bound: float
    attack_lower_bound: float
    bound_family: BoundFamily
    lp_status: LpStatus
    clean_score: float
    lp_objective: float
    lp_variables: int
    lp_rows: int
    seconds: Optional[float] = None

    @property
    def sound(self) -> bool:
        return (
            self.lp_status is LpStatus.OPTIMAL
            and self.attack_lower_bound <= self.score_upper_bound + SOUNDNESS_SLACK
        )


@dataclass(eq=False)
class AssembledLp:
    """An LP plus the variable indices needed to map network states into it."""

    program: LinearProgram
    members: List[int]
    input_vars: Dict[int, np.ndarray]
    hidden_vars: Dict[int, List[Dict[int, int]]] = field(default_factory=dict)
    logit_vars: Dict[int, np.ndarray] = field(default_factory=dict)
    prob_vars: Dict[int, np.ndarray] = field(default_factory=dict)

    def point_from_input(self, ensemble: Ensemble, x: np.ndarray) -> np.ndarray:
        """LP point induced by running the ensemble on input x."""
        point = np.zeros(self.program.n_vars)
        for m in self.members:
            net = ensemble.members[m]
            point[self.input_vars[m]] = x
            trace = net.pre_activations(x)
            for layer, mapping in enumerate(self.hidden_vars[m]):
                post = np.maximum(trace[layer], 0.0)
                for neuron, var in mapping.items():
                    point[var] = post[neuron]
            point[self.logit_vars[m]] = trace[-1]
            point[self.prob_vars[m]] = softmax(trace[-1])
        return point


# ---------------------------------------------------------------------------
# scores

def score(rule: ScoreRule, p: np.ndarray, y_star: int) -> float:
    """NLL -log p_y or Brier sum_k (p_k - [k = y])^2 of a probability vector."""
    p = np.asarray(p, dtype=float)
    if ScoreRule(rule) is ScoreRule.NLL:
        return float(-np.log(max(p[y_star], _NLL_FLOOR)))
    target = np.zeros_like(p)
    target[y_star] = 1.0
    return float(np.sum((p - target) ** 2))


def clean_score(ensemble: Ensemble, spec: ScoreSpec) -> float:
    """Score of the ensemble-average probabilities at x*."""
    return score(spec.rule, ensemble.probabilities(spec.x_star), spec.y_star)


def ensemble_const_bounds(bounds: LayerBounds, K: int) -> List[List[ConstBounds]]:
    """Constant bounds per member and class from the logit boxes."""
    table = []
    for m in range(len(bounds.lower)):
        box = bounds.logit_box(m)
        table.append([const_bounds(diff_box(box, k)) for k in range(K)])
    return table


def averaged_const_bounds(per_member: Sequence[Sequence[ConstBounds]]) -> List[ConstBounds]:
    """Bounds on the mean probability: averages of the member bounds."""
    K = len(per_member[0])
    averaged = []
    for k in range(K):
        p_lo = float(np.mean([row[k].p_lo for row in per_member]))
        p_hi = float(np.mean([row[k].p_hi for row in per_member]))
        with np.errstate(divide="ignore"):
            averaged.append(ConstBounds(p_lo, p_hi, float(np.log(p_lo)), float(np.log(p_hi))))
    return averaged


def score_objective(spec: ScoreSpec, bounds: Sequence[ConstBounds]) -> LinearObjective:
    """
    Linear objective over the averaged probabilities.

    NLL maximizes -p_y. Brier replaces each p_k^2 by its chord over
    [p_lo_k, p_hi_k], which gives the affine upper bound
    -2·p_y + sum_k (p_lo_k + p_hi_k)·p_k - sum_k p_lo_k·p_hi_k + 1.

    Args:
        spec: Score rule and label
        bounds: Per-class constant bounds on the averaged probabilities

    Returns:
        LinearObjective to maximize
    """
    K = len(bounds)
    if not 0 <= spec.y_star < K:
        raise UsageError(f"class index {spec.y_star} out of range for K={K}")
    if spec.rule is ScoreRule.NLL:
        coeffs = np.zeros(K)
        coeffs[spec.y_star] = -1.0
        return LinearObjective(coeffs, 0.0)
    lo = np.array([b.p_lo for b in bounds])
    hi = np.array([b.p_hi for b in bounds])
    coeffs = lo + hi
    coeffs[spec.y_star] -= 2.0
    return LinearObjective(coeffs, float(1.0 - np.sum(lo * hi)))


# ---------------------------------------------------------------------------
# LP assembly

def _softmax_row(
    builder: LpBuilder,
    plane: AffineBound,
    logit_vars: np.ndarray,
    prob_var: int,
    tag: str,
) -> None:
    # p - a·z >= offset (lower plane) or <= offset (upper plane)
    terms = [(prob_var, 1.0)] + [(int(v), -c) for v, c in zip(logit_vars, plane.coeffs)]
    sense = Sense.GE if plane.side is Side.LOWER else Sense.LE
    builder.add_row(terms, sense, plane.offset, tag)


def assemble_lp(
    ensemble: Ensemble,
    spec: ScoreSpec,
    bounds: LayerBounds,
    family: BoundFamily,
    members: Optional[Sequence[int]] = None,
    with_constant: bool = True,
) -> AssembledLp:
    """
    Build the score-maximization LP.

    Args:
        ensemble: Networks being verified
        spec: Score rule, label, center and radius
        bounds: Interval bounds from interval_propagate over the same ball
        family: Softmax bound family
        members: Members to include (all by default); each gets its own copy
            of the input when only a subset is assembled
        with_constant: Whether the objective keeps its constant term

    Returns:
        AssembledLp

    Raises:
        LpConstructionError: If the bounds are inconsistent with the ensemble
    """
    family = BoundFamily(family)
    K = ensemble.outputs
    if spec.x_star.size != ensemble.inputs:
        raise LpConstructionError(
            f"x* has {spec.x_star.size} entries, ensemble expects {ensemble.inputs}"
        )
    if len(bounds.lower) != ensemble.M:
        raise LpConstructionError("layer bounds do not match the ensemble size")
    members = list(range(ensemble.M)) if members is None else list(members)
    y = spec.y_star

    per_member = ensemble_const_bounds(bounds, K)
    objective = score_objective(spec, averaged_const_bounds(per_member))
    lower_kind, upper_kind = family.kinds

    builder = LpBuilder()
    result = AssembledLp(program=None, members=members, input_vars={})
    shared_inputs = None
    if len(members) == ensemble.M:
        shared_inputs = np.array([
            builder.add_variable(f"x[{i}]", c - spec.epsilon, c + spec.epsilon)
            for i, c in enumerate(spec.x_star)
        ])

    objective_terms = []
    for m in members:
        net = ensemble.members[m]
        if shared_inputs is None:
            inputs = np.array([
                builder.add_variable(f"m{m}.x[{i}]", c - spec.epsilon, c + spec.epsilon)
                for i, c in enumerate(spec.x_star)
            ])
        else:
            inputs = shared_inputs
        result.input_vars[m] = inputs

        # previous layer as {var: 1} terms per neuron; inactive neurons are absent
        previous: Dict[int, int] = {i: int(v) for i, v in enumerate(inputs)}
        hidden: List[Dict[int, int]] = []
        for layer_idx, layer in enumerate(net.layers[:-1]):
            lows = bounds.lower[m][layer_idx]
            highs = bounds.upper[m][layer_idx]
            if lows.size != layer.outputs:
                raise LpConstructionError(f"member {m} layer {layer_idx}: bounds have wrong width")
            mapping: Dict[int, int] = {}
            for j in range(layer.outputs):
                relax = relu_relaxation(lows[j], highs[j])
                if relax.phase is ReluPhase.INACTIVE:
                    continue
                name = f"m{m}.h{layer_idx}[{j}]"
                affine = [(var, -layer.weights[j, i]) for i, var in previous.items()]
                if relax.phase is ReluPhase.ACTIVE:
                    var = builder.add_variable(name, relax.lower, relax.upper)
                    builder.add_row([(var, 1.0)] + affine, Sense.EQ, layer.biases[j], "relu_active")
                else:
                    var = builder.add_variable(name, 0.0, relax.upper)
                    builder.add_row([(var, 1.0)] + affine, Sense.GE, layer.biases[j], "relu_lower")
                    scaled = [(v, relax.slope * c) for v, c in affine]
                    builder.add_row(
                        [(var, 1.0)] + scaled,
                        Sense.LE,
                        relax.slope * (layer.biases[j] - relax.lower),
                        "relu_upper",
                    )
                mapping[j] = var
            hidden.append(mapping)
            previous = mapping
        result.hidden_vars[m] = hidden

        last = net.layers[-1]
        box = bounds.logit_box(m)
        logits = np.array([
            builder.add_variable(f"m{m}.z[{k}]", box.lower[k], box.upper[k]) for k in range(K)
        ])
        for k in range(K):
            affine = [(var, -last.weights[k, i]) for i, var in previous.items()]
            builder.add_row([(int(logits[k]), 1.0)] + affine, Sense.EQ, last.biases[k], "logit")
        result.logit_vars[m] = logits

        probs = []
        for k in range(K):
            cb = per_member[m][k]
            lo, hi = (cb.p_lo, 1.0) if k == y else (0.0, cb.p_hi)
            probs.append(builder.add_variable(f"m{m}.p[{k}]", lo, hi))
        probs = np.array(probs)
        builder.add_row([(int(v), 1.0) for v in probs], Sense.EQ, 1.0, "simplex")
        result.prob_vars[m] = probs

        for k in range(K):
            kind = lower_kind if k == y else upper_kind
            try:
                plane = AffineBound.from_kind(kind, box, index=k)
            except DomainError as exc:
                logger.warning("Skipping %s row for member %d class %d: %s", kind.label, m, k, exc)
                continue
            tag = f"softmax_{plane.side.value}[m{m},k{k}]"
            _softmax_row(builder, plane, logits, int(probs[k]), tag)

        objective_terms.extend(
            (int(probs[k]), objective.coeffs[k] / ensemble.M) for k in range(K)
        )

    builder.set_objective(objective_terms, objective.constant if with_constant else 0.0)
    result.program = builder.build()
    logger.debug(
        "Assembled %s LP: %d variables, %d rows",
        family.value, result.program.n_vars, result.program.n_rows,
    )
    return result


def _report(rule: ScoreRule, optimum: float) -> float:
    if rule is ScoreRule.NLL:
        return float(-np.log(max(-optimum, _NLL_FLOOR)))
    return optimum


def _solve_bound(
    ensemble: Ensemble,
    spec: ScoreSpec,
    bounds: LayerBounds,
    family: BoundFamily,
    separate: bool,
) -> Tuple[LpStatus, float, int, int]:
    if not separate:
        assembled = assemble_lp(ensemble, spec, bounds, family)
        solution = solve(assembled.program)
        program = assembled.program
        return solution.status, solution.objective_value, program.n_vars, program.n_rows

    total = 0.0
    n_vars = n_rows = 0
    for m in range(ensemble.M):
        assembled = assemble_lp(ensemble, spec, bounds, family, members=[m], with_constant=(m == 0))
        solution = solve(assembled.program)
        n_vars += assembled.program.n_vars
        n_rows += assembled.program.n_rows
        if not solution.is_optimal:
            return solution.status, np.nan, n_vars, n_rows
        total += solution.objective_value
    return LpStatus.OPTIMAL, total, n_vars, n_rows


def verify(
    ensemble: Ensemble,
    spec: ScoreSpec,
    family: BoundFamily,
    separate: bool = False,
    attack_value: Optional[float] = None,
    seed: int = 0,
    timing: bool = False,
) -> VerifyResult:
    """
    Upper-bound the worst-case score over the ball and pair it with an attack.

    Args:
        ensemble: Networks being verified
        spec: Score rule, label, center and radius
        family: Softmax bound family used in the LP
        separate: Relax each member in its own LP and sum the optima
        attack_value: Precomputed attack lower bound (computed when None)
        seed: Attack seed
        timing: Record wall time in the result

    Returns:
        VerifyResult; a non-optimal LP yields an infinite upper bound
    """
    started = time.perf_counter()
    family = BoundFamily(family)
    bounds = interval_propagate(ensemble, spec.x_star, spec.epsilon)
    status, optimum, n_vars, n_rows = _solve_bound(ensemble, spec, bounds, family, separate)
    if status is LpStatus.OPTIMAL:
        upper = _report(spec.rule, optimum)
    else:
        logger.warning("%s LP finished with status %s", family.value, status.value)
        upper = np.inf
    if attack_value is None:
        attack_value = empirical_attack(ensemble, spec, seed=seed)
    result = VerifyResult(
        score_upper_bound=upper,
        attack_lower_bound=float(attack_value),
        bound_family=family,
        lp_status=status,
        clean_score=clean_score(ensemble, spec),
        lp_objective=float(optimum),
        lp_variables=n_vars,
        lp_rows=n_rows,
        seconds=time.perf_counter() - started if timing else None,
    )
    if status is LpStatus.OPTIMAL and not result.sound:
        logger.error(
            "Attack value %.9g exceeds the %s bound %.9g",
            result.attack_lower_bound, family.value, result.score_upper_bound,
        )
    return result


def verify_families(
    ensemble: Ensemble,
    spec: ScoreSpec,
    families: Sequence[BoundFamily],
    separate: bool = False,
    seed: int = 0,
    timing: bool = False,
) -> List[VerifyResult]:
    """Verify one instance with several families in parallel, sharing one attack."""
    attack_value = empirical_attack(ensemble, spec, seed=seed)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        futures = [
            pool.submit(verify, ensemble, spec, family, separate, attack_value, seed, timing)
            for family in families
        ]
        return [future.result() for future in futures]


# ---------------------------------------------------------------------------
# empirical attack

def _score_and_gradient(ensemble: Ensemble, spec: ScoreSpec, x: np.ndarray) -> Tuple[float, np.ndarray]:
    probs = [softmax(net.forward(x)) for net in ensemble.members]
    mean = np.mean(probs, axis=0)
    value = score(spec.rule, mean, spec.y_star)
    if spec.rule is ScoreRule.NLL:
        # ascend -p_y; same sign pattern as -log p_y
        outer = np.zeros_like(mean)
        outer[spec.y_star] = -1.0
    else:
        target = np.zeros_like(mean)
        target[spec.y_star] = 1.0
        outer = 2.0 * (mean - target)
    gradient = np.zeros_like(x)
    for net, p in zip(ensemble.members, probs):
        upstream = p * (outer - outer @ p) / ensemble.M
        gradient += net.input_gradient(x, upstream)
    return value, gradient


def pgd_search(
    ensemble: Ensemble,
    spec: ScoreSpec,
    steps: int = ATTACK_STEPS,
    restarts: int = ATTACK_RESTARTS,
    seed: int = 0,
    start: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """
    Projected sign-gradient ascent on the score inside the ball.

    The first restart begins at ``start`` (x* by default), later ones at
    uniform points of the ball. Every iterate is scored, so the result is
    never below the score at the starting point.

    Returns:
        (best score, input achieving it)
    """
    lower = spec.x_star - spec.epsilon
    upper = spec.x_star + spec.epsilon
    origin = spec.x_star.copy() if start is None else np.clip(start, lower, upper)
    best_x = origin
    best = score(spec.rule, ensemble.probabilities(origin), spec.y_star)
    if spec.epsilon == 0.0:
        return best, best_x
    rng = np.random.Generator(np.random.Philox(seed))
    step_size = spec.epsilon / ATTACK_STEP_DIVISOR
    for restart in range(restarts):
        x = origin.copy() if restart == 0 else rng.uniform(lower, upper)
        for _ in range(steps):
            value, gradient = _score_and_gradient(ensemble, spec, x)
            if value > best:
                best, best_x = value, x.copy()
            x = np.clip(x + step_size * np.sign(gradient), lower, upper)
        value = score(spec.rule, ensemble.probabilities(x), spec.y_star)
        if value > best:
            best, best_x = value, x.copy()
    logger.debug("PGD best score %.9g at eps=%g", best, spec.epsilon)
    return best, best_x


def empirical_attack(
    ensemble: Ensemble,
    spec: ScoreSpec,
    steps: int = ATTACK_STEPS,
    restarts: int = ATTACK_RESTARTS,
    seed: int = 0,
) -> float:
    """Best score found by PGD; a lower bound on the worst-case score."""
    return pgd_search(ensemble, spec, steps, restarts, seed)[0]


def attack_sweep(
    ensemble: Ensemble,
    spec: ScoreSpec,
    epsilons: Sequence[float],
    steps: int = ATTACK_STEPS,
    restarts: int = ATTACK_RESTARTS,
    seed: int = 0,
) -> List[float]:
    """
    PGD over nested balls, each warm-started from the previous best input.

    Raises:
        UsageError: If the radii are not non-decreasing
    """
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise UsageError("attack sweep radii must be non-decreasing")
    values = []
    start = None
    for eps in epsilons:
        best, start = pgd_search(ensemble, spec.with_epsilon(eps), steps, restarts, seed, start)
        values.append(best)
    return values
