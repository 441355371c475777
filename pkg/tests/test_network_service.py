"""Tests for ReLU networks, interval propagation and the ReLU relaxation."""

import json

import numpy as np
import pytest

from softbound.exceptions import DomainError, NetworkFormatError
from softbound.services.network_service import (
    Ensemble,
    Layer,
    Mlp,
    ReluPhase,
    forward,
    interval_propagate,
    relu_relaxation,
)


def _difference_net(*extra_layers):
    return Mlp((Layer([[1.0, -1.0]], [0.0]),) + tuple(extra_layers))


def test_identity_network():
    net = Mlp((Layer(np.eye(3), np.zeros(3)),))
    assert forward(net, [1.0, -2.0, 0.5]) == pytest.approx([1.0, -2.0, 0.5])


def test_single_row_network():
    assert forward(_difference_net(), [3.0, 1.0]) == pytest.approx([2.0])


def test_hidden_relu_is_applied():
    net = _difference_net(Layer([[2.0]], [1.0]))
    assert forward(net, [1.0, 3.0]) == pytest.approx([1.0])
    assert forward(net, [3.0, 1.0]) == pytest.approx([5.0])


def test_dimension_mismatch():
    with pytest.raises(DomainError):
        forward(_difference_net(), [1.0, 2.0, 3.0])
    with pytest.raises(NetworkFormatError):
        Mlp((Layer(np.eye(2), np.zeros(2)), Layer(np.eye(3), np.zeros(3))))
    with pytest.raises(NetworkFormatError):
        Layer([[1.0, 2.0]], [0.0, 0.0])


def test_interval_of_difference():
    bounds = interval_propagate(_difference_net(), [0.5, 0.5], 0.5)
    assert bounds.lower[0][0] == pytest.approx([-1.0])
    assert bounds.upper[0][0] == pytest.approx([1.0])


def test_relu_clamps_interval():
    bounds = interval_propagate(_difference_net(Layer([[1.0]], [0.0])), [0.5, 0.5], 0.5)
    assert bounds.lower[0][1] == pytest.approx([0.0])
    assert bounds.upper[0][1] == pytest.approx([1.0])


def test_zero_radius_collapses_to_forward_trace(small_ensemble, rng):
    x = rng.normal(size=small_ensemble.inputs)
    bounds = interval_propagate(small_ensemble, x, 0.0)
    for m, net in enumerate(small_ensemble.members):
        for z, lo, hi in zip(net.pre_activations(x), bounds.lower[m], bounds.upper[m]):
            assert lo == pytest.approx(z, abs=1e-12)
            assert hi == pytest.approx(z, abs=1e-12)


def test_interval_bounds_contain_sampled_traces(small_ensemble, rng):
    center = rng.normal(size=small_ensemble.inputs)
    radius = 0.3
    bounds = interval_propagate(small_ensemble, center, radius)
    samples = center + rng.uniform(-radius, radius, size=(1000, small_ensemble.inputs))
    for m, net in enumerate(small_ensemble.members):
        for x in samples:
            assert bounds.contains(m, net.pre_activations(x))
        box = bounds.logit_box(m)
        assert np.all(box.lower <= box.upper)


def test_negative_radius_is_rejected(small_ensemble):
    with pytest.raises(DomainError):
        interval_propagate(small_ensemble, np.zeros(small_ensemble.inputs), -0.1)


def test_single_network_gives_single_member_bounds():
    bounds = interval_propagate(_difference_net(), [0.0, 0.0], 1.0)
    assert len(bounds.lower) == 1


def test_unstable_relaxation():
    relax = relu_relaxation(-1.0, 1.0)
    assert relax.phase is ReluPhase.UNSTABLE
    assert relax.upper_line(0.0) == pytest.approx(0.5)
    assert relax.slope == pytest.approx(0.5)
    assert relax.intercept == pytest.approx(0.5)
    assert relax.contains(0.0, 0.5)
    assert not relax.contains(0.0, 0.6)
    assert not relax.contains(0.5, 0.4)


def test_active_and_inactive_relaxation():
    active = relu_relaxation(0.2, 1.0)
    assert active.phase is ReluPhase.ACTIVE
    assert active.contains(0.7, 0.7)
    assert not active.contains(0.7, 0.6)
    inactive = relu_relaxation(-1.0, -0.1)
    assert inactive.phase is ReluPhase.INACTIVE
    assert inactive.contains(-0.5, 0.0)
    assert not inactive.contains(-0.5, 0.1)
    assert relu_relaxation(-1.0, 0.0).phase is ReluPhase.INACTIVE
    assert relu_relaxation(0.0, 0.0).phase is ReluPhase.INACTIVE


def test_relaxation_contains_true_relu(rng):
    for _ in range(200):
        lo, hi = np.sort(rng.normal(size=2))
        relax = relu_relaxation(lo, hi)
        z = rng.uniform(lo, hi)
        assert relax.contains(z, max(z, 0.0))


def test_inverted_neuron_bounds():
    with pytest.raises(DomainError):
        relu_relaxation(1.0, 0.0)


def test_ensemble_probabilities_average_members(small_ensemble, rng):
    x = rng.normal(size=4)
    p = small_ensemble.probabilities(x)
    assert p.sum() == pytest.approx(1.0)
    assert p.shape == (3,)
    assert small_ensemble.M == 3


def test_random_ensemble_is_deterministic():
    a = Ensemble.random((4, 8, 3), members=2, seed=5)
    b = Ensemble.random((4, 8, 3), members=2, seed=5)
    c = Ensemble.random((4, 8, 3), members=2, seed=6)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()
    with pytest.raises(NetworkFormatError):
        Ensemble.random((4,), members=1, seed=0)


def test_save_and_load(small_ensemble, tmp_path, rng):
    path = tmp_path / 'net.json'
    small_ensemble.save(path)
    loaded = Ensemble.load(path)
    x = rng.normal(size=4)
    assert loaded.M == small_ensemble.M
    assert loaded.probabilities(x) == pytest.approx(small_ensemble.probabilities(x), rel=1e-15)
    data = json.loads(path.read_text())
    assert data['inputs'] == 4
    assert len(data['members'][0]['layers'][0]['W']) == 8


@pytest.mark.parametrize('payload', [
    '{"inputs": 2}',
    '{"inputs": 2, "members": [{"layers": [{"W": [[1, 0]]}]}]}',
    '{"inputs": 3, "members": [{"layers": [{"W": [[1, 0], [0, 1]], "b": [0, 0]}]}]}',
    '{"inputs": 2, "members": [{"layers": [{"W": [[1, 0]], "b": [0]}]}]}',
    '{"inputs": 2, "members": []}',
    'not json',
])
def test_malformed_network_files(tmp_path, payload):
    path = tmp_path / 'bad.json'
    path.write_text(payload)
    with pytest.raises(NetworkFormatError):
        Ensemble.load(path)


def test_members_must_share_dimensions():
    a = Mlp((Layer(np.eye(2), np.zeros(2)),))
    b = Mlp((Layer(np.ones((3, 2)), np.zeros(3)),))
    with pytest.raises(NetworkFormatError):
        Ensemble((a, b))


def test_input_gradient_matches_finite_differences(small_ensemble, rng):
    net = small_ensemble.members[0]
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)
    analytic = net.input_gradient(x, upstream)
    h = 1e-6
    numeric = np.array([
        (upstream @ net.forward(x + h * e) - upstream @ net.forward(x - h * e)) / (2 * h)
        for e in np.eye(4)
    ])
    assert analytic == pytest.approx(numeric, abs=1e-6)
