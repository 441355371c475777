"""Tangent-plane linearizations of the nonlinear softmax bounds."""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np
from scipy.special import expit

from softbound.config import FD_STEP, GRADCHECK_K_VALUES, GRADCHECK_POINTS
from softbound.exceptions import DomainError, UsageError
from softbound.services.bounds_service import (
    ArrayLike,
    BoundEvaluator,
    BoundKind,
    Box,
    Side,
    chord_slope,
    softmax,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AffineBound:
    """Linear bound coeffs·x + offset on softmax output ``output_index``."""

    coeffs: np.ndarray
    offset: float
    side: Side
    output_index: int

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if not np.all(np.isfinite(coeffs)) or not np.isfinite(self.offset):
            raise DomainError("affine bound has non-finite coefficients")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "side", Side(self.side))

    @classmethod
    def from_kind(
        cls,
        kind: BoundKind,
        box: Box,
        index: int = 0,
        point: Optional[ArrayLike] = None,
    ) -> "AffineBound":
        """Tangent plane of ``kind`` at ``point`` (box midpoint by default)."""
        return tangent_plane(TangentSpec(kind=kind, box=box, point=point, output_index=index))

    def evaluate(self, x: ArrayLike):
        values = np.asarray(x, dtype=float) @ self.coeffs + self.offset
        return float(values) if np.ndim(values) == 0 else values


@dataclass(frozen=True, eq=False)
class TangentSpec:
    """Where to linearize which bound; ``point`` defaults to the box midpoint."""

    kind: BoundKind
    box: Box
    point: Optional[np.ndarray] = None
    output_index: int = 0

    def __post_init__(self):
        kind = BoundKind(self.kind)
        if kind.is_constant:
            raise UsageError(f"{kind.label} is constant and has no tangent plane")
        point = self.box.midpoint if self.point is None else np.asarray(self.point, dtype=float)
        if point.shape != (self.box.K,) or not self.box.contains(point):
            raise DomainError("tangent point must lie inside the box")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "point", self.box.clip(point))


def _from_differences(partials: np.ndarray, anchor: int) -> np.ndarray:
    """Chain rule from d/dx~ (x~ = x - x_anchor) to d/dx."""
    grad = partials.copy()
    grad[anchor] = 0.0
    grad[anchor] = -grad.sum()
    return grad


def _er_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    d = ev.diff
    slopes = chord_slope(d.lower, d.upper)
    value = ev.evaluate(BoundKind.ER_LO, x)
    return _from_differences(-value ** 2 * slopes, d.anchor)


def _er_hi_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    xt = x - x[ev.index]
    cb = ev.const
    return _from_differences(-cb.p_hi * cb.p_lo * np.exp(xt), ev.index)


def _lse_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    shift = x[ev.index]
    slopes = chord_slope(ev.box.lower - shift, ev.box.upper - shift)
    value = ev.evaluate(BoundKind.LSE_LO, x)
    grad = -value ** 2 * slopes
    grad[ev.index] += value
    return grad


def _lse_star_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    star = ev.star_diff
    if star.anchor == ev.index:
        return _er_lo_grad(ev, x)
    xd = x - x[star.anchor]
    slopes = chord_slope(star.lower, star.upper)
    slopes[star.anchor] = 0.0
    chord_sum = np.sum(np.exp(star.lower) + slopes * (xd - star.lower))
    value = ev.evaluate(BoundKind.LSE_STAR_LO, x)
    partials = -np.exp(xd[ev.index]) * slopes / chord_sum ** 2
    partials[ev.index] += value
    return _from_differences(partials, star.anchor)


def _lse_hi_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    cb = ev.const
    span = cb.log_p_hi - cb.log_p_lo
    # (p_hi - p_lo) / span, tending to p_hi as the box collapses
    weight = cb.p_hi if span <= 0.0 else cb.p_hi * -np.expm1(-span) / span
    probs = softmax(x)
    return _from_differences(-weight * probs, ev.index)


def _lse2_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    d = ev.diff
    other = 1 - d.anchor
    span = d.upper[other] - d.lower[other]
    if span > 0.0:
        rate = (ev.const.log_p_lo - ev.const.log_p_hi) / span
    else:
        rate = ev.const.p_hi - 1.0
    partials = np.zeros(2)
    partials[other] = ev.evaluate(BoundKind.LSE2_LO, x) * rate
    return _from_differences(partials, d.anchor)


def _lse_prime_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    aux = ev.lse_prime
    span = aux.v_hi - aux.v_lo
    rate = expit(aux.v_lo) if span <= 0.0 else (aux.log_p_hi - aux.log_p_lo) / span
    others = np.arange(ev.K) != ev.index
    shift = x[ev.index]
    lower = ev.box.lower[others] - shift
    slopes = chord_slope(lower, ev.box.upper[others] - shift)
    chord_sum = np.sum(np.exp(lower) + slopes * (x[others] - shift - lower))
    value = ev.evaluate(BoundKind.LSE_PRIME_LO, x)
    grad = np.empty(ev.K)
    grad[others] = -value * rate * slopes / chord_sum
    grad[ev.index] = value * rate
    return grad


def _lin_lo_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    d = ev.diff
    return _from_differences(-chord_slope(d.lower, d.upper) / ev.lin.t_q ** 2, d.anchor)


def _lin_hi_grad(ev: BoundEvaluator, x: np.ndarray) -> np.ndarray:
    aux = ev.lin
    scale = 1.0 / (aux.q_hi_lin * aux.q_lo_lin)
    return _from_differences(-scale * np.exp(aux.t), ev.index)


_GRADIENTS = {
    BoundKind.ER_LO: _er_lo_grad,
    BoundKind.ER_HI: _er_hi_grad,
    BoundKind.LSE_LO: _lse_lo_grad,
    BoundKind.LSE_STAR_LO: _lse_star_lo_grad,
    BoundKind.LSE_HI: _lse_hi_grad,
    BoundKind.LSE2_LO: _lse2_lo_grad,
    BoundKind.LSE_PRIME_LO: _lse_prime_lo_grad,
    BoundKind.LIN_LO: _lin_lo_grad,
    BoundKind.LIN_HI: _lin_hi_grad,
}


def grad(kind: BoundKind, x: ArrayLike, box: Box, index: int = 0) -> np.ndarray:
    """
    Analytic gradient of a bound with respect to the logits.

    Args:
        kind: Any non-constant bound kind
        x: Logit vector inside the box
        box: Logit box
        index: Output index being bounded

    Returns:
        Gradient vector of length K

    Raises:
        UsageError: For constant kinds, or LSE2_LO with K != 2
        DomainError: If x lies outside the box
    """
    kind = BoundKind(kind)
    if kind not in _GRADIENTS:
        raise UsageError(f"{kind.label} has no gradient")
    ev = BoundEvaluator.for_box(box, index)
    if not ev.applicable(kind):
        raise UsageError(f"{kind.label} requires K=2, box has K={box.K}")
    x = ev.prepare(x)
    if x.ndim != 1:
        raise DomainError("gradients are computed one point at a time")
    return _GRADIENTS[kind](ev, x)


def tangent_plane(spec: TangentSpec) -> AffineBound:
    """Plane touching the bound at spec.point; sound on the bound's own side."""
    ev = BoundEvaluator.for_box(spec.box, spec.output_index)
    coeffs = grad(spec.kind, spec.point, spec.box, spec.output_index)
    value = ev.evaluate(spec.kind, spec.point)
    return AffineBound(
        coeffs=coeffs,
        offset=value - float(coeffs @ spec.point),
        side=spec.kind.side,
        output_index=spec.output_index,
    )


def finite_diff_grad(
    kind: BoundKind,
    x: ArrayLike,
    box: Box,
    h: Optional[float] = None,
    index: int = 0,
) -> np.ndarray:
    """
    Finite differences of a bound, used to check ``grad``.

    The step defaults to FD_STEP·max(1, |x_j|). Interior coordinates use a
    central difference with the step shrunk to stay inside the box; a
    coordinate on a face of the box uses a one-sided difference into it.
    Coordinates pinned by a degenerate box get nan.
    """
    ev = BoundEvaluator.for_box(box, index)
    x = ev.prepare(x)
    base = FD_STEP * np.maximum(1.0, np.abs(x)) if h is None else np.full(x.size, float(h))
    room_up = box.upper - x
    room_down = x - box.lower
    central = np.minimum(base, np.minimum(room_up, room_down))
    forward = np.where(central > 0, central, np.minimum(base, room_up))
    backward = np.where(central > 0, central, np.where(room_up > 0, 0.0, np.minimum(base, room_down)))
    span = forward + backward
    usable = span > 0
    stencil = np.repeat(x[None, :], 2 * x.size, axis=0)
    for j in np.flatnonzero(usable):
        stencil[2 * j, j] += forward[j]
        stencil[2 * j + 1, j] -= backward[j]
    values = np.asarray(ev.evaluate(kind, stencil))
    result = np.full(x.size, np.nan)
    result[usable] = (values[0::2] - values[1::2])[usable] / span[usable]
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest |analytic - numeric| / max(1, |analytic|), ignoring nan entries."""
    mask = np.isfinite(numeric)
    if not np.any(mask):
        return 0.0
    err = np.abs(analytic[mask] - numeric[mask]) / np.maximum(1.0, np.abs(analytic[mask]))
    return float(err.max())


def random_box_and_point(rng: np.random.Generator, K: int, max_width: float = 4.0):
    """Random box with widths in [0.01, max_width] and an interior point."""
    center = rng.normal(0.0, 2.0, size=K)
    width = rng.uniform(0.01, max_width, size=K)
    box = Box(center - width / 2, center + width / 2)
    point = box.lower + rng.uniform(0.05, 0.95, size=K) * width
    return box, point


def gradient_check(
    kinds: Optional[Iterable[BoundKind]] = None,
    K_values: Iterable[int] = GRADCHECK_K_VALUES,
    points: int = GRADCHECK_POINTS,
    seed: int = 0,
) -> Dict[BoundKind, float]:
    """
    Compare analytic and finite-difference gradients on random boxes.

    Args:
        kinds: Kinds to check (all differentiable kinds by default)
        K_values: Logit counts to sample
        points: Random points per (kind, K)
        seed: RNG seed

    Returns:
        Mapping kind -> largest relative error seen
    """
    kinds = list(_GRADIENTS) if kinds is None else [BoundKind(k) for k in kinds]
    rng = np.random.default_rng(seed)
    worst: Dict[BoundKind, float] = {}
    for kind in kinds:
        err = 0.0
        pinned = 0
        for K in K_values:
            if kind.needs_k2 and K != 2:
                continue
            for _ in range(points):
                box, x = random_box_and_point(rng, K)
                index = int(rng.integers(K))
                analytic = grad(kind, x, box, index)
                numeric = finite_diff_grad(kind, x, box, index=index)
                pinned += int(np.isnan(numeric).sum())
                err = max(err, relative_error(analytic, numeric))
        if pinned:
            logger.info("Gradient check %s: skipped %d pinned coordinates", kind.label, pinned)
        logger.debug("Gradient check %s: max relative error %.3e", kind.label, err)
        worst[kind] = err
    return worst
