"""Per-proposal scores: closed-form flash delta and the layer-local MSE proxy."""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .decompose import TuckerFactors, factors_to_layers
from .graph import ModelError, ModelGraph, fingerprint, forward, layer_weights
from .tensor import conv2d


def delta_flash(n: int, m: int, k: int, r: int) -> int:
    """Parameters saved by replacing an N->M kxk conv with its rank-R triplet.

    Negative when the triplet is larger than the original layer.
    """
    if min(n, m, k, r) < 1:
        raise ValueError(f"delta_flash needs positive N, M, k, R; got {(n, m, k, r)}")
    if r > min(n, m):
        raise ValueError(f"rank {r} exceeds min(N, M) = {min(n, m)}")
    return n * m * k * k - (n * r + r * r * k * k + r * m)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    """Inputs seen by selected layers of one graph revision on a fixed batch."""

    fingerprint: str
    seed: int | None
    batch: int
    activations: Mapping[str, np.ndarray]

    @classmethod
    def build(cls, graph: ModelGraph, seed: int = 42, batch: int = 8, inputs: np.ndarray | None = None,
              layers: Iterable[str] | None = None) -> "Calibration":
        """Run one forward pass and cache the input of each layer in ``layers``
        (default: every decomposable conv). ``inputs`` overrides the seeded
        Gaussian batch, e.g. with tensors loaded from CNT1 files."""
        if inputs is None:
            rng = np.random.default_rng(seed)
            inputs = rng.standard_normal((batch,) + graph.input_shape)
        else:
            inputs = np.asarray(inputs, dtype=np.float64)
            if inputs.ndim == 3:
                inputs = inputs[None]
            seed = None
        if layers is None:
            layers = [l.id for l in graph.convs() if l.decomposable]
        _, captured = forward(graph, inputs, capture=layers)
        for arr in captured.values():
            arr.setflags(write=False)
        return cls(fingerprint(graph), seed, len(inputs), MappingProxyType(captured))

    def check(self, graph: ModelGraph) -> None:
        if fingerprint(graph) != self.fingerprint:
            raise CalibrationError("calibration was built for a different graph revision")


@dataclass(frozen=True)
class ProxyScore:
    mse: float
    relative_mse: float
    delta_accuracy: float


def run_layers(layers, x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = conv2d(x, layer_weights(layer), layer.stride, layer.padding)
    return x


def mse_proxy(graph: ModelGraph, layer_id: str, factors: TuckerFactors, calib: Calibration,
              raw: bool = False) -> ProxyScore:
    """Score a decomposition by how far the triplet's output drifts from the
    original layer's output on the cached calibration input.

    ``delta_accuracy`` is ``-relative_mse``, or ``-mse`` when ``raw``.
    """
    layer = graph.layer(layer_id)
    if layer.kind != "conv":
        raise ModelError("MSE proxy applies to conv layers only", layer_id)
    if layer_id not in calib.activations:
        raise CalibrationError(f"no cached calibration activation for layer {layer_id!r}")
    x = calib.activations[layer_id]
    ref = conv2d(x, layer_weights(layer), layer.stride, layer.padding)
    approx = run_layers(factors_to_layers(factors, layer), x)
    energy = float(np.mean(ref * ref))
    if energy <= 0.0:
        raise CalibrationError(f"reference output of {layer_id!r} has zero energy")
    mse = float(np.mean((ref - approx) ** 2))
    rel = mse / energy
    return ProxyScore(mse, rel, -(mse if raw else rel))
