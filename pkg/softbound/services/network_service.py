"""ReLU MLP ensembles: forward passes, interval bounds and the ReLU relaxation.

Network JSON schema::

    {"inputs": n,
     "members": [{"layers": [{"W": [[...], ...], "b": [...]}, ...]}, ...]}

``W`` is row-major with shape (layer width, previous width), so each layer
computes z = W·h + b. Every layer except the last is followed by a ReLU; the
last layer's output are the logits.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from softbound.config import BIAS_SCALE
from softbound.exceptions import DomainError, NetworkFormatError
from softbound.services.bounds_service import ArrayLike, Box, softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        biases = np.array(self.biases, dtype=float).reshape(-1)
        if weights.ndim != 2 or weights.shape[0] != biases.size:
            raise NetworkFormatError(
                f"layer weights {weights.shape} do not match {biases.size} biases"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise NetworkFormatError("layer parameters must be finite")
        weights.setflags(write=False)
        biases.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def inputs(self) -> int:
        return self.weights.shape[1]

    @property
    def outputs(self) -> int:
        return self.weights.shape[0]

    def affine(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weights.T + self.biases

    def interval(self, lower: np.ndarray, upper: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Sign-split interval image of [lower, upper] under the affine map."""
        positive = np.maximum(self.weights, 0.0)
        negative = np.minimum(self.weights, 0.0)
        z_lo = positive @ lower + negative @ upper + self.biases
        z_hi = positive @ upper + negative @ lower + self.biases
        return z_lo, z_hi


@dataclass(frozen=True, eq=False)
class Mlp:
    """Feedforward ReLU network producing logits."""

    layers: Tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkFormatError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].inputs != layers[i - 1].outputs:
                raise NetworkFormatError(
                    f"layer {i} expects {layers[i].inputs} inputs, "
                    f"previous layer has {layers[i - 1].outputs} outputs"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def inputs(self) -> int:
        return self.layers[0].inputs

    @property
    def outputs(self) -> int:
        return self.layers[-1].outputs

    @property
    def sizes(self) -> List[int]:
        return [self.inputs] + [layer.outputs for layer in self.layers]

    def _check_input(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.inputs,):
            raise DomainError(f"network expects {self.inputs} inputs, got shape {x.shape}")
        return x

    def pre_activations(self, x: ArrayLike) -> List[np.ndarray]:
        """z of every layer; the last entry are the logits."""
        h = self._check_input(x)
        trace = []
        for i, layer in enumerate(self.layers):
            z = layer.affine(h)
            trace.append(z)
            if i < len(self.layers) - 1:
                h = np.maximum(z, 0.0)
        return trace

    def forward(self, x: ArrayLike) -> np.ndarray:
        return self.pre_activations(x)[-1]

    def input_gradient(self, x: ArrayLike, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product upstream·d(logits)/dx at a single input x."""
        trace = self.pre_activations(x)
        grad = np.asarray(upstream, dtype=float)
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                grad = grad * (trace[i] > 0)
            grad = grad @ self.layers[i].weights
        return grad

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"W": layer.weights.tolist(), "b": layer.biases.tolist()}
                for layer in self.layers
            ]
        }


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Members sharing input and output dimension; p is their mean softmax."""

    members: Tuple[Mlp, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise NetworkFormatError("an ensemble needs at least one member")
        first = members[0]
        for m, net in enumerate(members[1:], start=1):
            if net.inputs != first.inputs or net.outputs != first.outputs:
                raise NetworkFormatError(f"member {m} does not share the ensemble dimensions")
        if first.outputs < 2:
            raise NetworkFormatError("networks must produce at least two logits")
        object.__setattr__(self, "members", members)

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def inputs(self) -> int:
        return self.members[0].inputs

    @property
    def outputs(self) -> int:
        return self.members[0].outputs

    def probabilities(self, x: ArrayLike) -> np.ndarray:
        return np.mean([softmax(net.forward(x)) for net in self.members], axis=0)

    @classmethod
    def random(cls, sizes: Sequence[int], members: int, seed: int) -> "Ensemble":
        """
        Seeded random ensemble with He-scaled normal weights.

        Args:
            sizes: Widths from input to logits, e.g. (4, 8, 3)
            members: Number of networks
            seed: Generator seed

        Returns:
            Ensemble of identically shaped members
        """
        if len(sizes) < 2 or min(sizes) < 1:
            raise NetworkFormatError(f"invalid layer sizes {list(sizes)}")
        rng = np.random.Generator(np.random.Philox(seed))
        nets = []
        for _ in range(members):
            layers = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
                biases = rng.normal(0.0, BIAS_SCALE, size=fan_out)
                layers.append(Layer(weights, biases))
            nets.append(Mlp(tuple(layers)))
        return cls(tuple(nets))

    def to_dict(self) -> dict:
        return {"inputs": self.inputs, "members": [net.to_dict() for net in self.members]}

    @classmethod
    def from_dict(cls, data: dict) -> "Ensemble":
        """
        Build an ensemble from the network JSON schema.

        Raises:
            NetworkFormatError: On missing keys or inconsistent dimensions
        """
        try:
            inputs = int(data["inputs"])
            members = [
                Mlp(tuple(Layer(layer["W"], layer["b"]) for layer in member["layers"]))
                for member in data["members"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"malformed network description: {exc}") from exc
        ensemble = cls(tuple(members))
        if ensemble.inputs != inputs:
            raise NetworkFormatError(
                f"declared {inputs} inputs but the first layer takes {ensemble.inputs}"
            )
        return ensemble

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Ensemble":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(f"{path}: invalid JSON: {exc}") from exc
        ensemble = cls.from_dict(data)
        logger.info("Loaded %d-member ensemble %s from %s", ensemble.M, ensemble.members[0].sizes, path)
        return ensemble

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle)
            handle.write("\n")


@dataclass(frozen=True, eq=False)
class LayerBounds:
    """Pre-activation bounds, indexed [member][layer]."""

    lower: Tuple[Tuple[np.ndarray, ...], ...]
    upper: Tuple[Tuple[np.ndarray, ...], ...]

    def logit_box(self, member: int) -> Box:
        return Box(self.lower[member][-1], self.upper[member][-1])

    def contains(self, member: int, trace: Sequence[np.ndarray], tol: float = 1e-9) -> bool:
        """True if a forward trace of ``member`` lies inside its bounds."""
        for z, lo, hi in zip(trace, self.lower[member], self.upper[member]):
            scale = tol * np.maximum(1.0, np.abs(z))
            if np.any(z < lo - scale) or np.any(z > hi + scale):
                return False
        return True


def forward(net: Mlp, x: ArrayLike) -> np.ndarray:
    """Logits of a ReLU MLP."""
    return net.forward(x)


def _propagate(net: Mlp, lower: np.ndarray, upper: np.ndarray):
    lows, highs = [], []
    for i, layer in enumerate(net.layers):
        z_lo, z_hi = layer.interval(lower, upper)
        lows.append(z_lo)
        highs.append(z_hi)
        if i < len(net.layers) - 1:
            lower, upper = np.maximum(z_lo, 0.0), np.maximum(z_hi, 0.0)
    return tuple(lows), tuple(highs)


def interval_propagate(
    net: Union[Mlp, Ensemble],
    center: ArrayLike,
    radius: float,
) -> LayerBounds:
    """
    Interval bounds on every pre-activation over an l-infinity ball.

    Args:
        net: A single network or an ensemble
        center: Ball center x*
        radius: Ball radius epsilon >= 0

    Returns:
        LayerBounds with one entry per member (a single entry for an Mlp)
    """
    if radius < 0:
        raise DomainError(f"radius must be non-negative, got {radius}")
    members = net.members if isinstance(net, Ensemble) else (net,)
    center = members[0]._check_input(center)
    bounds = [_propagate(m, center - radius, center + radius) for m in members]
    return LayerBounds(
        lower=tuple(lo for lo, _ in bounds),
        upper=tuple(hi for _, hi in bounds),
    )


class ReluPhase(str, Enum):
    INACTIVE = "inactive"
    ACTIVE = "active"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class ReluRelaxation:
    """Linear constraints on (z, relu(z)) for z in [lower, upper]."""

    phase: ReluPhase
    lower: float
    upper: float

    @property
    def slope(self) -> float:
        """Slope of the upper line of the triangle (unstable neurons only)."""
        return self.upper / (self.upper - self.lower)

    @property
    def intercept(self) -> float:
        return -self.slope * self.lower

    def upper_line(self, z: float) -> float:
        return self.slope * (z - self.lower)

    def contains(self, z: float, post: float, tol: float = 1e-9) -> bool:
        if self.phase is ReluPhase.INACTIVE:
            return abs(post) <= tol
        if self.phase is ReluPhase.ACTIVE:
            return abs(post - z) <= tol
        return post >= z - tol and post >= -tol and post <= self.upper_line(z) + tol


def relu_relaxation(lower: float, upper: float) -> ReluRelaxation:
    """
    Classify a neuron and give its triangle relaxation.

    Inactive neurons (u <= 0) are pinned to 0, active ones (l >= 0) pass z
    through, and unstable ones satisfy post >= z, post >= 0 and
    post <= u/(u - l)·(z - l).

    Raises:
        DomainError: If lower > upper
    """
    lower, upper = float(lower), float(upper)
    if lower > upper:
        raise DomainError(f"neuron bounds are inverted: [{lower}, {upper}]")
    if upper <= 0.0:
        phase = ReluPhase.INACTIVE
    elif lower >= 0.0:
        phase = ReluPhase.ACTIVE
    else:
        phase = ReluPhase.UNSTABLE
    return ReluRelaxation(phase, lower, upper)
