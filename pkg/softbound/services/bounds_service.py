"""Exact softmax evaluation and closed-form bounds on one softmax output.

Every bound is stated for a single output ``index`` of the softmax. The
difference variables are anchored at that index, so ``index = 0`` reproduces
the textbook formulation for p_1 and any other index is the permuted version
of it. Logit arguments may carry leading batch axes: ``x`` has shape (..., K)
and the result has shape (...).

Exponentials that overflow saturate to +inf with a SoftboundOverflowWarning;
the affected bound values then degrade to the trivial 0 (lower) or 1 (upper).
"""

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.special import softmax as _stable_softmax

from softbound.config import BOX_TOL
from softbound.exceptions import DomainError, SoftboundOverflowWarning, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, list, tuple]
BoundValue = Union[float, np.ndarray]


class Side(str, Enum):
    """Which side of the softmax output a bound sits on."""

    LOWER = "lower"
    UPPER = "upper"


class BoundKind(str, Enum):
    """Named bounds on a softmax output."""

    CONST_LO = "const_lo"
    CONST_HI = "const_hi"
    LIN_LO = "lin_lo"
    LIN_HI = "lin_hi"
    ER_LO = "er_lo"
    ER_HI = "er_hi"
    LSE_LO = "lse_lo"
    LSE_STAR_LO = "lse_star_lo"
    LSE2_LO = "lse2_lo"
    LSE_PRIME_LO = "lse_prime_lo"
    LSE_HI = "lse_hi"

    @property
    def side(self) -> Side:
        return Side.UPPER if self.value.endswith("_hi") else Side.LOWER

    @property
    def label(self) -> str:
        return self.value

    @property
    def needs_k2(self) -> bool:
        return self is BoundKind.LSE2_LO

    @property
    def is_constant(self) -> bool:
        return self in (BoundKind.CONST_LO, BoundKind.CONST_HI)

    @property
    def is_affine(self) -> bool:
        return self in (BoundKind.LIN_LO, BoundKind.LIN_HI)

    @property
    def is_nonlinear(self) -> bool:
        return not (self.is_constant or self.is_affine)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned region l <= x <= u of logits or network inputs."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float).reshape(-1)
        upper = np.array(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise DomainError(
                f"box bounds differ in length: {lower.size} vs {upper.size}"
            )
        if lower.size < 2:
            raise DomainError("a softmax box needs at least two coordinates")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise DomainError("box bounds must be finite")
        if np.any(lower > upper):
            raise DomainError("box lower bound exceeds upper bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def around(cls, center: ArrayLike, radius: float) -> "Box":
        """Box [center - radius, center + radius] in every coordinate."""
        center = np.asarray(center, dtype=float)
        return cls(center - radius, center + radius)

    @property
    def K(self) -> int:
        return self.lower.size

    @property
    def midpoint(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    @property
    def half_width(self) -> np.ndarray:
        return (self.upper - self.lower) / 2

    def contains(self, x: ArrayLike, tol: float = BOX_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        slack_lo = tol * np.maximum(1.0, np.abs(self.lower))
        slack_hi = tol * np.maximum(1.0, np.abs(self.upper))
        return bool(
            np.all(x >= self.lower - slack_lo) and np.all(x <= self.upper + slack_hi)
        )

    def clip(self, x: ArrayLike) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class DiffBox:
    """Bounds on the differences x_j - x_anchor; the anchor entry is (0, 0)."""

    anchor: int
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float).reshape(-1)
        upper = np.array(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape or not 0 <= self.anchor < lower.size:
            raise DomainError("difference bounds do not match the anchor")
        if lower[self.anchor] != 0.0 or upper[self.anchor] != 0.0:
            raise DomainError("difference bounds must be (0, 0) at the anchor")
        if np.any(lower > upper):
            raise DomainError("difference lower bound exceeds upper bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def K(self) -> int:
        return self.lower.size

    def tightened(self, lower: ArrayLike, upper: ArrayLike) -> "DiffBox":
        """
        Intersect with externally supplied difference bounds.

        Args:
            lower: Candidate lower bounds on the differences
            upper: Candidate upper bounds on the differences

        Returns:
            DiffBox with the elementwise tighter bounds

        Raises:
            DomainError: If the intersection is empty
        """
        new_lower = np.maximum(self.lower, np.asarray(lower, dtype=float))
        new_upper = np.minimum(self.upper, np.asarray(upper, dtype=float))
        new_lower[self.anchor] = new_upper[self.anchor] = 0.0
        return DiffBox(self.anchor, new_lower, new_upper)


@dataclass(frozen=True)
class ConstBounds:
    """x-independent bounds p_lo <= p_anchor <= p_hi over a DiffBox."""

    p_lo: float
    p_hi: float
    log_p_lo: float
    log_p_hi: float


@dataclass(frozen=True, eq=False)
class LinAux:
    """Tangent abscissas and reciprocal-input range used by the linear bounds."""

    t: np.ndarray
    q_lo_lin: float
    q_hi_lin: float
    t_q: float


@dataclass(frozen=True)
class LsePrimeAux:
    """Range [v_lo, v_hi] of lse(x without anchor) - x_anchor."""

    v_lo: float
    v_hi: float

    @property
    def log_p_hi(self) -> float:
        return float(-np.logaddexp(0.0, self.v_lo))

    @property
    def log_p_lo(self) -> float:
        return float(-np.logaddexp(0.0, self.v_hi))


# ---------------------------------------------------------------------------
# helpers

def _as_logits(x: ArrayLike, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        raise DomainError(f"{name} must be a vector, got a scalar")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


def _scalarize(values: np.ndarray) -> BoundValue:
    if np.ndim(values) == 0:
        return float(values)
    return values


def _exp(x: ArrayLike) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(x)
    if np.any(np.isposinf(out)):
        warnings.warn(
            "exponential overflowed to +inf; bounds degrade to [0, 1]",
            SoftboundOverflowWarning,
            stacklevel=3,
        )
    return out


def _log_chord_factor(width: np.ndarray) -> np.ndarray:
    """log((e^w - 1) / w), continuous at w = 0."""
    width = np.asarray(width, dtype=float)
    safe = np.where(width > 0, width, 1.0)
    factor = safe + np.log(-np.expm1(-safe)) - np.log(safe)
    return np.where(width > 0, factor, 0.0)


def chord_slope(lo: ArrayLike, hi: ArrayLike) -> np.ndarray:
    """Slope of the chord of exp over [lo, hi]; e^lo for a degenerate interval."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return _exp(lo + _log_chord_factor(hi - lo))


def _check_within(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, what: str) -> np.ndarray:
    slack_lo = BOX_TOL * np.maximum(1.0, np.abs(lo))
    slack_hi = BOX_TOL * np.maximum(1.0, np.abs(hi))
    if np.any(x < lo - slack_lo) or np.any(x > hi + slack_hi):
        raise DomainError(f"{what} lies outside its box")
    return np.clip(x, lo, hi)


def _se_chord(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    terms = _exp(lo) + chord_slope(lo, hi) * (x - lo)
    return terms.sum(axis=-1)


def _saturate(values: np.ndarray, side: Side) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if np.all(np.isfinite(values)):
        return values
    fallback = 0.0 if side is Side.LOWER else 1.0
    logger.warning("Non-finite %s bound replaced by %s", side.value, fallback)
    return np.where(np.isfinite(values), values, fallback)


def _differences(x: np.ndarray, d: DiffBox) -> np.ndarray:
    xt = x - x[..., d.anchor:d.anchor + 1]
    return _check_within(xt, d.lower, d.upper, "difference vector")


def _check_index(index: int, K: int) -> None:
    if not 0 <= index < K:
        raise UsageError(f"output index {index} out of range for K={K}")


# ---------------------------------------------------------------------------
# exact quantities

def softmax(x: ArrayLike) -> np.ndarray:
    """
    Numerically stable softmax over the last axis.

    Args:
        x: Logits of shape (..., K) with K >= 2

    Returns:
        Probabilities of the same shape, summing to one along the last axis

    Raises:
        DomainError: If any logit is non-finite or K < 2
    """
    x = _as_logits(x)
    if x.shape[-1] < 2:
        raise DomainError("softmax needs at least two logits")
    return _stable_softmax(x, axis=-1)


def se(x: ArrayLike) -> BoundValue:
    """Sum of exponentials; saturates to +inf with a warning on overflow."""
    x = _as_logits(x)
    return _scalarize(_exp(x).sum(axis=-1))


def lse(x: ArrayLike) -> BoundValue:
    """Max-shifted log-sum-exp."""
    x = _as_logits(x)
    return _scalarize(logsumexp(x, axis=-1))


def se_chord(x: ArrayLike, lo: ArrayLike, hi: ArrayLike) -> BoundValue:
    """
    Chordal upper bound on se(x) over the box [lo, hi].

    Args:
        x: Point(s) inside [lo, hi]
        lo: Lower corner
        hi: Upper corner

    Returns:
        Sum of per-coordinate chords of exp; a degenerate coordinate
        contributes e^lo

    Raises:
        DomainError: If x lies outside [lo, hi]
    """
    x = _as_logits(x)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x = _check_within(x, lo, hi, "x")
    return _scalarize(_se_chord(x, lo, hi))


def diff_box(box: Box, anchor: int) -> DiffBox:
    """Always-valid bounds l_j - u_anchor <= x_j - x_anchor <= u_j - l_anchor."""
    _check_index(anchor, box.K)
    lower = box.lower - box.upper[anchor]
    upper = box.upper - box.lower[anchor]
    lower[anchor] = upper[anchor] = 0.0
    return DiffBox(anchor, lower, upper)


def argmax_midpoint(box: Box) -> int:
    """Index of the largest midpoint; ties go to the smallest index."""
    return int(np.argmax(box.lower + box.upper))


def const_bounds(d: DiffBox) -> ConstBounds:
    """Constant bounds 1/se(u~) <= p_anchor <= 1/se(l~)."""
    log_p_lo = float(-logsumexp(d.upper))
    log_p_hi = float(-logsumexp(d.lower))
    return ConstBounds(
        p_lo=float(np.exp(log_p_lo)),
        p_hi=float(np.exp(log_p_hi)),
        log_p_lo=log_p_lo,
        log_p_hi=log_p_hi,
    )


def lin_aux(d: DiffBox) -> LinAux:
    """
    Tangent points and reciprocal-input range of the linear bounds.

    Args:
        d: Difference bounds anchored at the output index

    Returns:
        LinAux with tangent abscissas t_j, q range and reciprocal tangent point
    """
    width = d.upper - d.lower
    t = np.where(
        width > 0,
        np.minimum(d.lower + _log_chord_factor(width), d.lower + 1.0),
        d.lower,
    )
    others = np.arange(d.K) != d.anchor
    q_lo = 1.0 + float(np.sum(_exp(t[others]) * (d.lower[others] - t[others] + 1.0)))
    q_hi = float(_exp(d.upper).sum())
    t_q = max(float(np.sqrt(q_lo * q_hi)), q_hi / 2)
    t.setflags(write=False)
    return LinAux(t=t, q_lo_lin=q_lo, q_hi_lin=q_hi, t_q=t_q)


def lse_prime_aux(box: Box, index: int = 0) -> LsePrimeAux:
    """Range of lse(x without the anchor) - x_anchor over the box."""
    _check_index(index, box.K)
    others = np.arange(box.K) != index
    v_lo = float(logsumexp(box.lower[others]) - box.upper[index])
    v_hi = float(logsumexp(box.upper[others]) - box.lower[index])
    return LsePrimeAux(v_lo=v_lo, v_hi=v_hi)


# ---------------------------------------------------------------------------
# bound formulas on prepared inputs

def _lin_lower(xt: np.ndarray, d: DiffBox, aux: LinAux) -> np.ndarray:
    chord = _se_chord(xt, d.lower, d.upper)
    return (2.0 - chord / aux.t_q) / aux.t_q


def _lin_upper(xt: np.ndarray, d: DiffBox, aux: LinAux) -> np.ndarray:
    others = np.arange(d.K) != d.anchor
    t = aux.t[others]
    tangent = 1.0 + np.sum(_exp(t) * (xt[..., others] - t + 1.0), axis=-1)
    p_lo = 1.0 / aux.q_hi_lin
    return 1.0 / aux.q_lo_lin + p_lo - p_lo * tangent / aux.q_lo_lin


def _er_lower(xt: np.ndarray, d: DiffBox) -> np.ndarray:
    return 1.0 / _se_chord(xt, d.lower, d.upper)


def _er_upper(xt: np.ndarray, cb: ConstBounds) -> np.ndarray:
    return cb.p_hi + cb.p_lo - cb.p_hi * cb.p_lo * _exp(xt).sum(axis=-1)


def _lse_lower(x: np.ndarray, box: Box, index: int) -> np.ndarray:
    # e^{x_a} / se_chord(x; l, u), shifted by x_a to stay translation invariant
    shift = x[..., index:index + 1]
    return 1.0 / _se_chord(x - shift, box.lower - shift, box.upper - shift)


def _lse_star_lower(x: np.ndarray, star: DiffBox, index: int) -> np.ndarray:
    xd = _differences(x, star)
    return _exp(xd[..., index]) / _se_chord(xd, star.lower, star.upper)


def _lse_upper(xt: np.ndarray, cb: ConstBounds) -> np.ndarray:
    # convex combination of p_hi and p_lo weighted along lse(x~)
    lse_hi = -cb.log_p_lo
    lse_lo = -cb.log_p_hi
    span = lse_hi - lse_lo
    if span <= 0.0:
        return np.full(xt.shape[:-1], cb.p_hi)
    value = logsumexp(xt, axis=-1)
    return (cb.p_hi * (lse_hi - value) + cb.p_lo * (value - lse_lo)) / span


def _lse2_lower(xt: np.ndarray, d: DiffBox, cb: ConstBounds) -> np.ndarray:
    other = 1 - d.anchor
    span = d.upper[other] - d.lower[other]
    if span <= 0.0:
        return np.full(xt.shape[:-1], cb.p_hi)
    weight = (xt[..., other] - d.lower[other]) / span
    return np.exp(weight * cb.log_p_lo + (1.0 - weight) * cb.log_p_hi)


def _lse_prime_lower(x: np.ndarray, box: Box, index: int, aux: LsePrimeAux) -> np.ndarray:
    span = aux.v_hi - aux.v_lo
    if span <= 0.0:
        return np.full(x.shape[:-1], np.exp(aux.log_p_hi))
    others = np.arange(box.K) != index
    shift = x[..., index:index + 1]
    # x_a - log(sum of chords over j != a), evaluated shift-free
    reduced = -np.log(
        _se_chord(
            x[..., others] - shift,
            box.lower[others] - shift,
            box.upper[others] - shift,
        )
    )
    offset = (aux.v_hi * aux.log_p_hi - aux.v_lo * aux.log_p_lo) / span
    slope = (aux.log_p_hi - aux.log_p_lo) / span
    return np.exp(offset + slope * reduced)


# ---------------------------------------------------------------------------
# public bound operations

def bound_lin(x: ArrayLike, d: DiffBox, aux: LinAux, side: Side) -> BoundValue:
    """
    Linear exponential-reciprocal bound on p_anchor.

    Args:
        x: Logits of shape (..., K) whose differences lie in d
        d: Difference bounds anchored at the output index
        aux: Output of lin_aux(d)
        side: Side.LOWER or Side.UPPER

    Returns:
        Bound value(s), affine in x

    Raises:
        DomainError: If the differences of x fall outside d
    """
    xt = _differences(_as_logits(x), d)
    values = _lin_lower(xt, d, aux) if Side(side) is Side.LOWER else _lin_upper(xt, d, aux)
    return _scalarize(_saturate(values, Side(side)))


def bound_er(x: ArrayLike, d: DiffBox, side: Side) -> BoundValue:
    """
    Nonlinear exponential-reciprocal bound on p_anchor.

    The lower side is convex in x and the upper side concave; both are exact
    at the corners l~ and u~ of the difference box.
    """
    xt = _differences(_as_logits(x), d)
    if Side(side) is Side.LOWER:
        values = _er_lower(xt, d)
    else:
        values = _er_upper(xt, const_bounds(d))
    return _scalarize(_saturate(values, Side(side)))


def bound_lse(
    x: ArrayLike,
    box: Box,
    variant: BoundKind,
    index: int = 0,
) -> BoundValue:
    """
    Log-sum-exp family bound on p_index.

    Args:
        x: Logits of shape (..., K) inside the box
        box: Logit box
        variant: One of LSE_LO, LSE_STAR_LO, LSE2_LO, LSE_PRIME_LO, LSE_HI
        index: Output index being bounded

    Returns:
        Bound value(s)

    Raises:
        UsageError: If variant is not an LSE kind, or LSE2_LO with K != 2
        DomainError: If x lies outside the box
    """
    variant = BoundKind(variant)
    lse_kinds = (
        BoundKind.LSE_LO, BoundKind.LSE_STAR_LO, BoundKind.LSE2_LO,
        BoundKind.LSE_PRIME_LO, BoundKind.LSE_HI,
    )
    if variant not in lse_kinds:
        raise UsageError(f"{variant.label} is not a log-sum-exp bound")
    return BoundEvaluator(box, index).evaluate(variant, x)


# ---------------------------------------------------------------------------
# cached dispatch

class BoundEvaluator:
    """Evaluates every bound kind for one box and output index.

    Per-box quantities (difference boxes, constant bounds, tangent points)
    are computed lazily once and then shared; instances are safe to use from
    several threads.
    """

    def __init__(self, box: Box, index: int = 0, diff: Optional[DiffBox] = None):
        """
        Initialize the evaluator.

        Args:
            box: Logit box
            index: Output index whose probability is bounded
            diff: Optional tighter difference bounds anchored at index
        """
        _check_index(index, box.K)
        if diff is not None and (diff.anchor != index or diff.K != box.K):
            raise UsageError("external difference bounds must be anchored at the output index")
        self.box = box
        self.index = index
        self._external_diff = diff

    @classmethod
    @lru_cache(maxsize=512)
    def for_box(cls, box: Box, index: int = 0) -> "BoundEvaluator":
        """Memoized evaluator for the formula difference bounds."""
        return cls(box, index)

    @property
    def K(self) -> int:
        return self.box.K

    @cached_property
    def diff(self) -> DiffBox:
        formula = diff_box(self.box, self.index)
        if self._external_diff is None:
            return formula
        return formula.tightened(self._external_diff.lower, self._external_diff.upper)

    @cached_property
    def star_anchor(self) -> int:
        return argmax_midpoint(self.box)

    @cached_property
    def star_diff(self) -> DiffBox:
        return diff_box(self.box, self.star_anchor)

    @cached_property
    def const(self) -> ConstBounds:
        return const_bounds(self.diff)

    @cached_property
    def lin(self) -> LinAux:
        return lin_aux(self.diff)

    @cached_property
    def lse_prime(self) -> LsePrimeAux:
        return lse_prime_aux(self.box, self.index)

    def applicable(self, kind: BoundKind) -> bool:
        return not (BoundKind(kind).needs_k2 and self.K != 2)

    def prepare(self, x: ArrayLike) -> np.ndarray:
        """Validate logits against the box and clip round-off excursions."""
        x = _as_logits(x)
        if x.shape[-1] != self.K:
            raise DomainError(f"expected {self.K} logits, got {x.shape[-1]}")
        return _check_within(x, self.box.lower, self.box.upper, "x")

    def exact(self, x: ArrayLike) -> BoundValue:
        """The softmax output being bounded."""
        return _scalarize(softmax(self.prepare(x))[..., self.index])

    def evaluate(self, kind: BoundKind, x: ArrayLike) -> BoundValue:
        """
        Value of one bound kind at x.

        Args:
            kind: Bound to evaluate
            x: Logits of shape (..., K) inside the box

        Returns:
            Bound value(s) with the batch shape of x

        Raises:
            UsageError: If the kind is not applicable to K
            DomainError: If x lies outside the box
        """
        kind = BoundKind(kind)
        if not self.applicable(kind):
            raise UsageError(f"{kind.label} requires K=2, box has K={self.K}")
        x = self.prepare(x)
        batch = x.shape[:-1]
        if kind is BoundKind.CONST_LO:
            values = np.full(batch, self.const.p_lo)
        elif kind is BoundKind.CONST_HI:
            values = np.full(batch, self.const.p_hi)
        elif kind is BoundKind.LSE_LO:
            values = _lse_lower(x, self.box, self.index)
        elif kind is BoundKind.LSE_STAR_LO:
            values = _lse_star_lower(x, self.star_diff, self.index)
        elif kind is BoundKind.LSE_PRIME_LO:
            values = _lse_prime_lower(x, self.box, self.index, self.lse_prime)
        else:
            xt = _differences(x, self.diff)
            if kind is BoundKind.LIN_LO:
                values = _lin_lower(xt, self.diff, self.lin)
            elif kind is BoundKind.LIN_HI:
                values = _lin_upper(xt, self.diff, self.lin)
            elif kind is BoundKind.ER_LO:
                values = _er_lower(xt, self.diff)
            elif kind is BoundKind.ER_HI:
                values = _er_upper(xt, self.const)
            elif kind is BoundKind.LSE_HI:
                values = _lse_upper(xt, self.const)
            else:
                values = _lse2_lower(xt, self.diff, self.const)
        return _scalarize(_saturate(values, kind.side))


def evaluate(kind: BoundKind, x: ArrayLike, box: Box, index: int = 0) -> BoundValue:
    """Evaluate one bound kind through the per-box cache."""
    return BoundEvaluator.for_box(box, index).evaluate(kind, x)


def applicable_kinds(K: int):
    """All bound kinds defined for K logits, in declaration order."""
    return [kind for kind in BoundKind if not (kind.needs_k2 and K != 2)]
