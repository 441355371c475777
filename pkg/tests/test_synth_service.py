"""Tests for the synthetic tightness experiment."""

import numpy as np
import pytest

from softbound.config import THREADS_ENV
from softbound.exceptions import DomainError, UsageError
from softbound.services.bounds_service import BoundKind, softmax
from softbound.services.synth_service import (
    LOW_PROBABILITY,
    SOUND_GAP_TOL,
    DirichletSpec,
    make_region,
    mu_grid,
    pairwise_ratios,
    probs_to_logits,
    region_rng,
    run_experiment,
    run_grid,
    sample_dirichlet,
    series_labels,
)

ER_AND_LSE = [
    BoundKind.ER_LO, BoundKind.ER_HI, BoundKind.LSE_LO, BoundKind.LSE_STAR_LO, BoundKind.LSE_HI,
]
CONSTANTS = [BoundKind.CONST_LO, BoundKind.CONST_HI]


def test_mu_max():
    assert DirichletSpec(16, 15.0, 0, 0).mu_max == pytest.approx(0.5)
    assert DirichletSpec(16, 1.0, 0, 0).mu_max == pytest.approx(0.0625)
    assert DirichletSpec.from_mu_max(16, 0.8, 3, 0).mu_max == pytest.approx(0.8)


def test_spec_validation():
    with pytest.raises(DomainError):
        DirichletSpec(16, 0.5, 0, 0)
    with pytest.raises(DomainError):
        DirichletSpec(4, 2.0, 4, 0)
    with pytest.raises(DomainError):
        DirichletSpec(1, 2.0, 0, 0)
    with pytest.raises(DomainError):
        DirichletSpec(4, 2.0, 0, -1)


@pytest.mark.parametrize('K, alpha, j_max, expected', [
    (4, 1.0, 0, 0.25),
    (16, 15.0, 2, 0.5),
])
def test_dirichlet_mean(K, alpha, j_max, expected):
    spec = DirichletSpec(K, alpha, j_max, 7)
    rng = region_rng(spec.seed)
    draws = np.array([sample_dirichlet(spec, rng) for _ in range(4000)])
    assert np.all(draws > 0)
    assert draws.sum(axis=1) == pytest.approx(np.ones(4000))
    assert draws[:, j_max].mean() == pytest.approx(expected, abs=0.02)


def test_dirichlet_is_reproducible():
    spec = DirichletSpec(5, 3.0, 1, 42)
    assert np.array_equal(sample_dirichlet(spec), sample_dirichlet(spec))


def test_probs_to_logits_examples():
    assert probs_to_logits([0.5, 0.5]) == pytest.approx([0.0, 0.0])
    assert probs_to_logits([0.8807971, 0.1192029]) == pytest.approx([1.0, -1.0], abs=1e-6)


def test_probs_to_logits_round_trip(rng):
    for p in rng.dirichlet(np.ones(6), size=1000):
        logits = probs_to_logits(p)
        assert logits.mean() == pytest.approx(0.0, abs=1e-12)
        assert softmax(logits) == pytest.approx(p, abs=1e-12)


def test_probs_to_logits_errors():
    with pytest.raises(DomainError):
        probs_to_logits([1.0, 0.0])
    with pytest.raises(DomainError):
        probs_to_logits([0.5, 0.6])


def test_region_box_is_centered():
    region = make_region(np.array([0.2, 0.3, 0.5]), 0.25, 10)
    assert region.box.upper - region.box.lower == pytest.approx([0.5, 0.5, 0.5])
    assert region.box.midpoint == pytest.approx(region.center_logits)


def test_constant_series_have_unit_ratio():
    result = run_experiment(DirichletSpec(4, 2.0, 0, 1), 0.5, 6, 40, CONSTANTS)
    for kind in CONSTANTS:
        stats = result.stats[kind.label]
        assert stats.mean_ratio == 1.0
        assert np.all(stats.region_ratios == 1.0)
        assert stats.stderr_ratio == 0.0


def test_experiment_is_deterministic():
    spec = DirichletSpec(8, 4.0, 0, 123)
    first = run_experiment(spec, 1.0, 5, 50, ER_AND_LSE)
    second = run_experiment(spec, 1.0, 5, 50, ER_AND_LSE)
    for label in first.stats:
        assert np.array_equal(first.stats[label].region_gaps, second.stats[label].region_gaps)
        assert first.stats[label].mean_ratio == second.stats[label].mean_ratio


def test_thread_count_does_not_change_results(monkeypatch):
    spec = DirichletSpec(6, 3.0, 1, 9)
    monkeypatch.setenv(THREADS_ENV, '1')
    serial = run_experiment(spec, 1.0, 8, 30, ER_AND_LSE)
    monkeypatch.setenv(THREADS_ENV, '4')
    parallel = run_experiment(spec, 1.0, 8, 30, ER_AND_LSE)
    for label in serial.stats:
        assert np.array_equal(serial.stats[label].region_gaps, parallel.stats[label].region_gaps)


@pytest.mark.parametrize('K', [2, 5, 16])
def test_all_gaps_are_sound(K):
    kinds = [k for k in BoundKind if not (k.needs_k2 and K != 2)]
    result = run_experiment(DirichletSpec.from_mu_max(K, 0.6, 0, 5), 1.0, 5, 100, kinds, linearized=True)
    for stats in result.stats.values():
        assert stats.min_gap >= -SOUND_GAP_TOL, stats.label
        assert stats.mean_gap >= stats.min_gap


def test_geometric_mean_bound_beats_er_for_two_logits():
    result = run_experiment(DirichletSpec(2, 3.0, 0, 8), 1.0, 10, 200, [BoundKind.ER_LO, BoundKind.LSE2_LO])
    assert np.all(result.stats['er_lo'].region_gaps >= result.stats['lse2_lo'].region_gaps - 1e-12)


def test_upper_lse_bound_is_tighter_than_er():
    result = run_experiment(DirichletSpec(16, 15.0, 0, 2), 1.0, 5, 100, [BoundKind.ER_HI, BoundKind.LSE_HI])
    assert np.all(result.stats['lse_hi'].region_ratios <= result.stats['er_hi'].region_ratios + 1e-12)


def test_tangent_planes_are_looser_than_their_parents():
    result = run_experiment(DirichletSpec(4, 2.0, 0, 3), 0.5, 5, 100, ER_AND_LSE, linearized=True)
    for kind in ER_AND_LSE:
        parent = result.stats[kind.label].region_gaps
        tangent = result.stats[f'{kind.label}_tan'].region_gaps
        assert np.all(tangent >= parent - 1e-12), kind


def test_series_labels():
    labels = [label for label, _, _ in series_labels([BoundKind.LIN_LO, BoundKind.ER_HI], linearized=True)]
    assert labels == ['lin_lo', 'er_hi', 'er_hi_tan']


def test_experiment_errors():
    spec = DirichletSpec(3, 2.0, 0, 0)
    with pytest.raises(UsageError):
        run_experiment(spec, 1.0, 2, 10, [BoundKind.LSE2_LO])
    with pytest.raises(UsageError):
        run_experiment(spec, 1.0, 0, 10, [BoundKind.ER_LO])
    with pytest.raises(UsageError):
        run_experiment(spec, 0.0, 2, 10, [BoundKind.ER_LO])
    with pytest.raises(UsageError):
        run_grid(3, 1.0, 2, 10, [BoundKind.ER_LO], 0, case='middle')


def test_mu_grid_skips_means_below_uniform():
    grid = mu_grid(2)
    assert grid[0] == pytest.approx((0.5, 1.0))
    assert all(mu >= 0.5 for mu, _ in grid)
    assert len(mu_grid(16)) == 10


def test_low_probability_case_moves_the_peak():
    results = run_grid(4, 1.0, 2, 10, [BoundKind.ER_LO], 0, case=LOW_PROBABILITY, mu_values=(0.5, 0.9))
    assert [r.spec.j_max for r in results] == [1, 1]
    assert [r.index for r in results] == [0, 0]
    assert [r.mu_max for r in results] == pytest.approx([0.5, 0.9])


def test_pairwise_ratios():
    result = run_experiment(DirichletSpec(5, 2.0, 0, 4), 1.0, 4, 50, ER_AND_LSE)
    ratios = pairwise_ratios(result)
    assert set(ratios) == {'er_hi/lse_hi', 'er_lo/lse_lo', 'er_lo/lse_star_lo'}
    assert np.all(ratios['er_hi/lse_hi'] >= 1.0 - 1e-12)


@pytest.mark.slow
def test_high_dimensional_orderings():
    kinds = [BoundKind.LIN_HI, BoundKind.ER_HI, BoundKind.LSE_HI, BoundKind.LSE_LO, BoundKind.LSE_STAR_LO]
    high = run_grid(16, 1.0, 30, 300, kinds, 0, mu_values=(0.5, 0.95))
    low = run_grid(16, 1.0, 30, 300, kinds, 0, case=LOW_PROBABILITY, mu_values=(0.5,))

    assert low[0].stats['lin_hi'].mean_ratio > 10.0
    for result in high + low:
        assert result.stats['lse_hi'].mean_ratio < result.stats['er_hi'].mean_ratio
    at_half, at_peak = high
    assert at_half.stats['lse_lo'].mean_ratio < at_half.stats['lse_star_lo'].mean_ratio
    assert at_peak.stats['lse_star_lo'].mean_ratio < at_peak.stats['lse_lo'].mean_ratio


@pytest.mark.slow
def test_upper_lse_bound_roughly_halves_the_er_gap():
    results = run_grid(16, 1.0, 20, 200, [BoundKind.ER_HI, BoundKind.LSE_HI], 0)
    assert len(results) == len(mu_grid(16))
    for result in results:
        factor = result.stats['lse_hi'].mean_ratio / result.stats['er_hi'].mean_ratio
        assert 0.35 <= factor <= 0.75, result.mu_max


@pytest.mark.slow
def test_alternative_lse_bound_never_dominates_at_high_dimension():
    kinds = [BoundKind.LSE_LO, BoundKind.LSE_STAR_LO, BoundKind.LSE_PRIME_LO]
    results = run_grid(128, 1.0, 20, 200, kinds, 0) + run_grid(
        128, 1.0, 20, 200, kinds, 0, case=LOW_PROBABILITY
    )
    wins = 0
    for result in results:
        best_rival = min(result.stats['lse_lo'].mean_gap, result.stats['lse_star_lo'].mean_gap)
        wins += result.stats['lse_prime_lo'].mean_gap < best_rival - 1e-6
    assert wins <= 0.05 * len(results)


@pytest.mark.slow
def test_gaps_grow_with_radius():
    spec = DirichletSpec.from_mu_max(16, 0.5, 0, 11)
    gaps = [
        run_experiment(spec, eps, 20, 200, ER_AND_LSE).stats
        for eps in (0.2, 1.0, 2.0)
    ]
    for kind in ER_AND_LSE:
        series = [g[kind.label].mean_gap for g in gaps]
        assert series == sorted(series), kind
