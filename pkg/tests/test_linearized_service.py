"""Tests for analytic gradients and tangent-plane bounds."""

import numpy as np
import pytest

from softbound.config import GRAD_REL_TOL
from softbound.exceptions import DomainError, UsageError
from softbound.services.bounds_service import (
    BoundEvaluator,
    BoundKind,
    Box,
    Side,
    applicable_kinds,
    evaluate,
    softmax,
)
from softbound.services.linearized_service import (
    AffineBound,
    TangentSpec,
    finite_diff_grad,
    grad,
    gradient_check,
    random_box_and_point,
    relative_error,
    tangent_plane,
)

DIFFERENTIABLE = [k for k in BoundKind if not k.is_constant]
CONVEX_LOWER = [
    BoundKind.ER_LO, BoundKind.LSE_LO, BoundKind.LSE_STAR_LO, BoundKind.LSE_PRIME_LO,
]
CONCAVE_UPPER = [BoundKind.ER_HI, BoundKind.LSE_HI]


def _kinds_for(K):
    return [k for k in applicable_kinds(K) if not k.is_constant]


def test_er_gradients_on_sigmoid_box(sigmoid_box):
    assert grad(BoundKind.ER_LO, [0.0, 0.0], sigmoid_box) == pytest.approx(
        [0.0799631, -0.0799631], abs=1e-6
    )
    assert grad(BoundKind.ER_HI, [0.0, 0.0], sigmoid_box) == pytest.approx(
        [0.1049936, -0.1049936], abs=1e-6
    )


@pytest.mark.parametrize('K', [2, 3, 6])
def test_degenerate_box_gradient_is_softmax_jacobian_row(rng, K):
    x = rng.normal(size=K)
    box = Box(x, x)
    p = softmax(x)
    for index in range(K):
        row = p[index] * ((np.arange(K) == index) - p)
        for kind in _kinds_for(K):
            assert grad(kind, x, box, index) == pytest.approx(row, abs=1e-12), kind


@pytest.mark.parametrize('K', [2, 3, 16])
def test_analytic_gradient_matches_finite_differences(rng, K):
    for _ in range(15):
        box, x = random_box_and_point(rng, K)
        index = int(rng.integers(K))
        for kind in _kinds_for(K):
            analytic = grad(kind, x, box, index)
            numeric = finite_diff_grad(kind, x, box, index=index)
            assert relative_error(analytic, numeric) <= GRAD_REL_TOL, kind


def test_gradient_check_reports_every_kind():
    worst = gradient_check(K_values=(2, 3), points=5, seed=3)
    assert set(worst) == set(DIFFERENTIABLE)
    assert all(err <= GRAD_REL_TOL for err in worst.values())


def test_gradient_check_on_a_subset():
    worst = gradient_check(kinds=['er_lo'], K_values=(4,), points=3, seed=0)
    assert list(worst) == [BoundKind.ER_LO]


def test_finite_differences_skip_pinned_coordinates(sigmoid_box):
    numeric = finite_diff_grad(BoundKind.ER_LO, [0.0, 0.5], sigmoid_box)
    assert np.isnan(numeric[0])
    assert np.isfinite(numeric[1])
    assert relative_error(grad(BoundKind.ER_LO, [0.0, 0.5], sigmoid_box), numeric) <= GRAD_REL_TOL


@pytest.mark.parametrize('x2', [-2.0, 2.0])
@pytest.mark.parametrize('kind', [BoundKind.ER_LO, BoundKind.ER_HI, BoundKind.LSE_HI, BoundKind.LSE2_LO])
def test_finite_differences_on_box_faces_are_one_sided(sigmoid_box, kind, x2):
    x = [0.0, x2]
    numeric = finite_diff_grad(kind, x, sigmoid_box)
    assert np.isnan(numeric[0])
    assert numeric[1] == pytest.approx(grad(kind, x, sigmoid_box)[1], abs=1e-4)


def test_finite_differences_on_corner_of_wider_box():
    box = Box([-1.0, 0.0, 2.0], [1.0, 1.5, 3.0])
    x = np.array([-1.0, 1.5, 2.5])
    for kind in (BoundKind.ER_LO, BoundKind.LSE_LO, BoundKind.LSE_STAR_LO, BoundKind.LSE_HI):
        numeric = finite_diff_grad(kind, x, box, index=2)
        assert np.all(np.isfinite(numeric)), kind
        assert numeric == pytest.approx(grad(kind, x, box, 2), abs=1e-4), kind


def test_finite_differences_converge_quadratically(sigmoid_box):
    x = [0.0, 0.3]
    exact = grad(BoundKind.ER_LO, x, sigmoid_box)[1]
    coarse = abs(finite_diff_grad(BoundKind.ER_LO, x, sigmoid_box, h=1e-2)[1] - exact)
    fine = abs(finite_diff_grad(BoundKind.ER_LO, x, sigmoid_box, h=5e-3)[1] - exact)
    assert coarse / fine == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize('K', [2, 3, 5])
def test_tangent_plane_touches_at_point(rng, K):
    box, x = random_box_and_point(rng, K)
    index = int(rng.integers(K))
    for kind in _kinds_for(K):
        plane = tangent_plane(TangentSpec(kind, box, x, index))
        assert plane.evaluate(x) == pytest.approx(evaluate(kind, x, box, index), rel=1e-10)
        assert plane.coeffs == pytest.approx(grad(kind, x, box, index))
        assert plane.side is kind.side
        assert plane.output_index == index


@pytest.mark.parametrize('K', [2, 3, 8])
def test_tangent_planes_are_sound_and_dominated_by_parent(rng, sample_in, K):
    for _ in range(10):
        box, _ = random_box_and_point(rng, K)
        index = int(rng.integers(K))
        ev = BoundEvaluator(box, index)
        x = sample_in(rng, box, 200)
        p = ev.exact(x)
        kinds = CONVEX_LOWER + CONCAVE_UPPER + ([BoundKind.LSE2_LO] if K == 2 else [])
        for kind in kinds:
            plane = AffineBound.from_kind(kind, box, index).evaluate(x)
            parent = ev.evaluate(kind, x)
            slack = 1e-9 * np.maximum(1.0, np.abs(parent))
            if kind.side is Side.LOWER:
                assert np.all(plane <= parent + slack), kind
                assert np.all(plane <= p + slack), kind
            else:
                assert np.all(plane >= parent - slack), kind
                assert np.all(plane >= p - slack), kind


def test_linear_bounds_are_their_own_tangent_planes(rng, sample_in):
    box, _ = random_box_and_point(rng, 4)
    x = sample_in(rng, box, 20)
    for kind in (BoundKind.LIN_LO, BoundKind.LIN_HI):
        plane = AffineBound.from_kind(kind, box, 2)
        assert plane.evaluate(x) == pytest.approx(evaluate(kind, x, box, 2), rel=1e-10)


def test_default_tangent_point_is_midpoint(sigmoid_box):
    spec = TangentSpec(BoundKind.ER_LO, sigmoid_box)
    assert spec.point == pytest.approx([0.0, 0.0])
    plane = tangent_plane(spec)
    assert plane.evaluate([0.0, 0.0]) == pytest.approx(0.2099872, abs=1e-6)


def test_affine_bound_evaluates_batches():
    plane = AffineBound(coeffs=[1.0, -2.0], offset=0.5, side=Side.UPPER, output_index=0)
    assert plane.evaluate([1.0, 1.0]) == pytest.approx(-0.5)
    assert plane.evaluate([[0.0, 0.0], [2.0, 0.0]]) == pytest.approx([0.5, 2.5])


def test_affine_bound_rejects_non_finite():
    with pytest.raises(DomainError):
        AffineBound(coeffs=[np.nan, 1.0], offset=0.0, side=Side.LOWER, output_index=0)


def test_tangent_errors(sigmoid_box):
    with pytest.raises(UsageError):
        TangentSpec(BoundKind.CONST_LO, sigmoid_box)
    with pytest.raises(DomainError):
        TangentSpec(BoundKind.ER_LO, sigmoid_box, point=[0.0, 3.0])
    with pytest.raises(UsageError):
        grad(BoundKind.CONST_HI, [0.0, 0.0], sigmoid_box)
    with pytest.raises(UsageError):
        grad(BoundKind.LSE2_LO, [0.0, 0.0, 0.0], Box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]))
    with pytest.raises(DomainError):
        grad(BoundKind.ER_LO, [[0.0, 0.0]], sigmoid_box)


def test_relative_error_ignores_nan():
    assert relative_error(np.array([1.0, 2.0]), np.array([np.nan, 2.0])) == 0.0
    assert relative_error(np.array([0.5]), np.array([np.nan])) == 0.0
    assert relative_error(np.array([4.0]), np.array([3.0])) == pytest.approx(0.25)
