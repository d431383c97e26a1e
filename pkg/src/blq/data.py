"""Seeded generators for fixture datasets and random fixture networks.

All randomness comes from a SplitMix64 stream so files are reproducible
bit for bit across machines and numpy versions: element ``i`` of the stream
for seed ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15)`` modulo 2**64.
Uniform reals take the top 53 bits.
"""

from __future__ import annotations

from math import prod, sqrt

import numpy as np

from .forward import FloatNetwork, LayerWeights
from .network import NetworkSpec

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """``count`` outputs of the stream for ``seed`` starting at ``offset``."""
    with np.errstate(over="ignore"):
        i = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
        z = np.uint64(seed % (1 << 64)) + i * GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def uniform(seed: int, count: int, low: float = -1.0, high: float = 1.0, offset: int = 0) -> np.ndarray:
    u = (splitmix64(seed, count, offset) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return low + (high - low) * u


def make_fixture_dataset(seed: int, count: int, shape=(1, 16, 16), classes: int = 10):
    """``count`` images uniform in [-1, 1] (float32) and labels in [0, classes)."""
    if count < 1:
        raise ValueError("dataset needs at least one sample")
    n = count * prod(shape)
    images = uniform(seed, n).astype(np.float32).reshape((count, *shape))
    labels = (splitmix64(seed, count, offset=n) % np.uint64(classes)).astype(np.uint8)
    return images, labels


def random_network(spec: NetworkSpec, seed: int = 0) -> FloatNetwork:
    """He-uniform weights and small uniform biases, float32."""
    params = []
    offset = 0
    for _, layer, shape in spec.weight_layers():
        wshape = layer.weight_shape(shape)
        fan_in = prod(wshape[1:])
        bound = sqrt(6.0 / fan_in)
        w = uniform(seed, prod(wshape), -bound, bound, offset).astype(np.float32).reshape(wshape)
        offset += prod(wshape)
        b = uniform(seed, wshape[0], -0.1, 0.1, offset).astype(np.float32)
        offset += wshape[0]
        params.append(LayerWeights(w, b))
    return FloatNetwork(spec, tuple(params))
