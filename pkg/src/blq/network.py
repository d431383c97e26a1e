"""Layer and network descriptions with shape chaining."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from math import prod
from typing import Union


class ShapeError(ValueError):
    """Raised when layer shapes do not chain."""


@dataclass(frozen=True)
class Convolution:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    kind = "conv"

    def __post_init__(self):
        for name in ("out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"conv {name} must be positive")
        if self.padding < 0:
            raise ShapeError("conv padding must be >= 0")
        if self.out_channels % self.groups:
            raise ShapeError("out_channels must be divisible by groups")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"convolution expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        if c % self.groups:
            raise ShapeError(f"{c} input channels not divisible by {self.groups} groups")
        return (self.out_channels, *self.spatial(h, w))

    def spatial(self, h, w):
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.kernel_h}x{self.kernel_w} does not fit input {h}x{w}")
        return oh, ow

    def weight_shape(self, shape):
        return (self.out_channels, shape[0] // self.groups, self.kernel_h, self.kernel_w)

    def reduction_length(self, shape) -> int:
        return shape[0] // self.groups * self.kernel_h * self.kernel_w


@dataclass(frozen=True)
class FullyConnected:
    out_features: int

    kind = "fc"

    def __post_init__(self):
        if self.out_features < 1:
            raise ShapeError("out_features must be positive")

    def output_shape(self, shape):
        return (self.out_features,)

    def weight_shape(self, shape):
        return (self.out_features, prod(shape))

    def reduction_length(self, shape) -> int:
        return prod(shape)


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int

    kind = "maxpool"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ShapeError("pool window and stride must be positive")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {self.window} does not fit input {h}x{w}")
        return (c, oh, ow)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Sigmoid:
    kind = "sigmoid"

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"

    def output_shape(self, shape):
        return tuple(shape)


LayerSpec = Union[Convolution, FullyConnected, MaxPool, ReLU, Sigmoid, Softmax]
WEIGHT_KINDS = ("conv", "fc")
_BY_KIND = {cls.kind: cls for cls in (Convolution, FullyConnected, MaxPool, ReLU, Sigmoid, Softmax)}


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    d.update({f.name: getattr(layer, f.name) for f in fields(layer)})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    try:
        cls = _BY_KIND[d.pop("kind")]
    except KeyError as exc:
        raise ShapeError(f"unknown layer kind {exc.args[0]!r}") from None
    return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ShapeError(f"invalid input shape {self.input_shape}")
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the final output shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                out.append(tuple(layer.output_shape(out[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return out

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1]

    def weight_layers(self) -> list[tuple[int, object, tuple]]:
        """``(layer index, layer, input shape)`` for every conv/fc layer."""
        shapes = self.shapes()
        return [(i, l, shapes[i]) for i, l in enumerate(self.layers) if l.kind in WEIGHT_KINDS]

    def parameter_count(self) -> int:
        total = 0
        for _, layer, shape in self.weight_layers():
            w = layer.weight_shape(shape)
            total += prod(w) + w[0]
        return total

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["name"], tuple(d["input_shape"]), tuple(layer_from_dict(l) for l in d["layers"]))
