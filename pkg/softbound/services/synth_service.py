"""Synthetic tightness experiment: how far each bound sits from the softmax.

Softmax outputs are drawn from a Dirichlet whose largest-mean component is
controlled by alpha_max, turned into centered logits, and surrounded by a box
of half-width epsilon. Uniform draws from each box measure the mean gap of
every bound; ratios are taken against the constant bound on the same side.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from softbound.config import MU_MAX_GRID, thread_count
from softbound.exceptions import DomainError, UsageError
from softbound.services.bounds_service import BoundEvaluator, BoundKind, Box, Side
from softbound.services.linearized_service import AffineBound

logger = logging.getLogger(__name__)

SOUND_GAP_TOL = 1e-9
HIGH_PROBABILITY = "high"
LOW_PROBABILITY = "low"


@dataclass(frozen=True)
class DirichletSpec:
    """Concentration alpha_max on component j_max and 1 elsewhere."""

    K: int
    alpha_max: float
    j_max: int
    seed: int

    def __post_init__(self):
        if self.K < 2:
            raise DomainError(f"K must be at least 2, got {self.K}")
        if not self.alpha_max >= 1.0:
            raise DomainError(f"alpha_max must be >= 1, got {self.alpha_max}")
        if not 0 <= self.j_max < self.K:
            raise DomainError(f"j_max {self.j_max} out of range for K={self.K}")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_mu_max(cls, K: int, mu_max: float, j_max: int, seed: int) -> "DirichletSpec":
        return cls(K, mu_max * (K - 1) / (1.0 - mu_max), j_max, seed)

    @property
    def mu_max(self) -> float:
        """Mean of the largest component, alpha_max / (alpha_max + K - 1)."""
        return self.alpha_max / (self.alpha_max + self.K - 1)

    @property
    def concentration(self) -> np.ndarray:
        alpha = np.ones(self.K)
        alpha[self.j_max] = self.alpha_max
        return alpha


@dataclass(frozen=True, eq=False)
class RegionSample:
    center_logits: np.ndarray
    epsilon: float
    box: Box
    draws: int


@dataclass(frozen=True, eq=False)
class GapStats:
    """Gap statistics of one series over all regions of a grid point."""

    label: str
    side: Side
    mean_gap: float
    mean_ratio: float
    stderr_ratio: float
    regions: int
    min_gap: float
    region_gaps: np.ndarray
    region_ratios: np.ndarray


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    """All series at one (case, mu_max) grid point."""

    spec: DirichletSpec
    epsilon: float
    draws: int
    index: int
    stats: Dict[str, GapStats]

    @property
    def mu_max(self) -> float:
        return self.spec.mu_max


def region_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox stream for one work unit."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def sample_dirichlet(spec: DirichletSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    One draw from the experiment's Dirichlet distribution.

    Args:
        spec: Concentration layout
        rng: Generator to draw from (a fresh stream from spec.seed if None)

    Returns:
        Probability vector with strictly positive entries
    """
    rng = region_rng(spec.seed) if rng is None else rng
    while True:
        p = rng.dirichlet(spec.concentration)
        if np.all(p > 0.0):
            return p


def probs_to_logits(p: Sequence[float]) -> np.ndarray:
    """
    Centered logits m with softmax(m) = p.

    Raises:
        DomainError: If p has a non-positive entry or does not sum to one
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise DomainError("probabilities must be strictly positive")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DomainError(f"probabilities sum to {p.sum()}, not 1")
    logits = np.log(p)
    return logits - logits.mean()


def make_region(p: np.ndarray, epsilon: float, draws: int) -> RegionSample:
    center = probs_to_logits(p)
    return RegionSample(center, float(epsilon), Box.around(center, epsilon), int(draws))


def series_labels(kinds: Iterable[BoundKind], linearized: bool = False) -> List[Tuple[str, BoundKind, bool]]:
    """(label, kind, is tangent plane) for every reported series."""
    labels = []
    for kind in kinds:
        labels.append((kind.label, kind, False))
    if linearized:
        for kind in kinds:
            if kind.is_nonlinear:
                labels.append((f"{kind.label}_tan", kind, True))
    return labels


def _region_gaps(
    spec: DirichletSpec,
    region_idx: int,
    epsilon: float,
    draws: int,
    series: List[Tuple[str, BoundKind, bool]],
    index: int,
) -> Dict[str, Tuple[float, float]]:
    """(mean gap, smallest per-draw gap) per series, constants included."""
    rng = region_rng(spec.seed, spec.j_max, region_idx)
    region = make_region(sample_dirichlet(spec, rng), epsilon, draws)
    box = region.box
    x = box.lower + rng.uniform(size=(draws, spec.K)) * (box.upper - box.lower)
    ev = BoundEvaluator(box, index)
    exact = ev.exact(x)
    gaps: Dict[str, Tuple[float, float]] = {}
    baselines = [(k.label, k, False) for k in (BoundKind.CONST_LO, BoundKind.CONST_HI)]
    for label, kind, tangent in series + baselines:
        if label in gaps:
            continue
        if tangent:
            values = AffineBound.from_kind(kind, box, index).evaluate(x)
        else:
            values = ev.evaluate(kind, x)
        diff = exact - values if kind.side is Side.LOWER else values - exact
        low = float(np.min(diff))
        if low < -SOUND_GAP_TOL:
            logger.warning("Series %s undershoots by %.3e in region %d", label, -low, region_idx)
        gaps[label] = (float(np.mean(diff)), low)
    return gaps


def run_experiment(
    spec: DirichletSpec,
    epsilon: float,
    regions: int,
    draws: int,
    kinds: Iterable[BoundKind],
    index: int = 0,
    linearized: bool = False,
) -> ExperimentResult:
    """
    Mean gaps and constant-bound gap ratios over independent regions.

    Each region draws from its own Philox stream keyed by (seed, j_max,
    region), so results do not depend on how regions are scheduled.

    Args:
        spec: Dirichlet layout and seed
        epsilon: Box half-width
        regions: Number of regions
        draws: Uniform samples per region
        kinds: Bound kinds to measure
        index: Softmax output being bounded
        linearized: Also measure midpoint tangent planes of nonlinear kinds

    Returns:
        ExperimentResult keyed by series label

    Raises:
        UsageError: If a kind is not applicable to K
    """
    kinds = [BoundKind(k) for k in kinds]
    for kind in kinds:
        if kind.needs_k2 and spec.K != 2:
            raise UsageError(f"{kind.label} requires K=2")
    if regions < 1 or draws < 1 or epsilon <= 0:
        raise UsageError("regions, draws and epsilon must be positive")
    series = series_labels(kinds, linearized)

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        futures = [
            pool.submit(_region_gaps, spec, r, epsilon, draws, series, index)
            for r in range(regions)
        ]
        per_region = [future.result() for future in futures]

    baseline = {
        Side.LOWER: np.array([g[BoundKind.CONST_LO.label][0] for g in per_region]),
        Side.UPPER: np.array([g[BoundKind.CONST_HI.label][0] for g in per_region]),
    }
    stats = {}
    for label, kind, _ in series:
        gaps = np.array([g[label][0] for g in per_region])
        ratios = gaps / baseline[kind.side]
        stderr = float(np.std(ratios, ddof=1) / np.sqrt(regions)) if regions > 1 else 0.0
        stats[label] = GapStats(
            label=label,
            side=kind.side,
            mean_gap=float(gaps.mean()),
            mean_ratio=float(ratios.mean()),
            stderr_ratio=stderr,
            regions=regions,
            min_gap=min(g[label][1] for g in per_region),
            region_gaps=gaps,
            region_ratios=ratios,
        )
    logger.debug("mu_max=%.3f: %d series over %d regions", spec.mu_max, len(stats), regions)
    return ExperimentResult(spec, float(epsilon), int(draws), index, stats)


def mu_grid(K: int, mu_values: Sequence[float] = MU_MAX_GRID) -> List[Tuple[float, float]]:
    """(mu_max, alpha_max) pairs, skipping means below 1/K (alpha_max < 1)."""
    grid = []
    for mu in mu_values:
        alpha = mu * (K - 1) / (1.0 - mu)
        if alpha < 1.0:
            logger.info("Skipping mu_max=%.3f: below 1/K for K=%d", mu, K)
            continue
        grid.append((float(mu), float(alpha)))
    return grid


def run_grid(
    K: int,
    epsilon: float,
    regions: int,
    draws: int,
    kinds: Iterable[BoundKind],
    seed: int,
    case: str = HIGH_PROBABILITY,
    mu_values: Sequence[float] = MU_MAX_GRID,
    linearized: bool = False,
) -> List[ExperimentResult]:
    """
    The experiment at every mu_max grid point of one case.

    The high-probability case concentrates on the measured output 0; the
    low-probability case concentrates on output 1 and still measures output 0.
    """
    if case not in (HIGH_PROBABILITY, LOW_PROBABILITY):
        raise UsageError(f"unknown case {case!r}")
    j_max = 0 if case == HIGH_PROBABILITY else 1
    kinds = list(kinds)
    results = []
    for mu, alpha in mu_grid(K, mu_values):
        spec = DirichletSpec(K, alpha, j_max, seed)
        results.append(run_experiment(spec, epsilon, regions, draws, kinds, 0, linearized))
        logger.info("Finished %s case mu_max=%.2f", case, mu)
    return results


def pairwise_ratios(result: ExperimentResult) -> Dict[str, np.ndarray]:
    """Per-region gap ratios of the ER bounds over their log-sum-exp rivals."""
    pairs = [("er_hi", "lse_hi"), ("er_lo", "lse_lo"), ("er_lo", "lse_star_lo"), ("er_lo", "lse2_lo")]
    ratios = {}
    for num, den in pairs:
        if num in result.stats and den in result.stats:
            ratios[f"{num}/{den}"] = result.stats[num].region_gaps / result.stats[den].region_gaps
    return ratios
