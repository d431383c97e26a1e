"""Forward propagation: FP32 reference, per-layer (DQ) and region-local (LQ).

Tensors are numpy arrays.  A forward pass accepts a single sample shaped
like ``spec.input_shape`` or a batch with a leading sample axis.

Every weight layer is lowered to a matrix product: convolutions through
:func:`im2col`, fully-connected layers by flattening.  Real-valued dot
products accumulate in float64 in ascending reduction index.  Integer code
products (weight-and-activation mode) are evaluated exactly: every partial
sum stays far below 2**53, so float64 BLAS returns the exact integer
regardless of its internal summation order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import Convolution, NetworkSpec, ShapeError
from .quantizer import (
    QuantizedTensor,
    RegionPartition,
    max_code,
    quantize_array,
    quantize_partitioned,
)

CHUNK = 256
MODES = ("w", "wa")


class NumericError(ArithmeticError):
    """A layer produced a non-finite value."""

    def __init__(self, layer_index: int, path: str):
        super().__init__(f"non-finite output at layer {layer_index} ({path} path)")
        self.layer_index = layer_index


def thread_count() -> int:
    raw = os.environ.get("BLQ_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError(f"BLQ_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# float networks


@dataclass(frozen=True)
class LayerWeights:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class FloatNetwork:
    spec: NetworkSpec
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        wl = self.spec.weight_layers()
        if len(wl) != len(self.params):
            raise ShapeError(f"{len(wl)} weight layers but {len(self.params)} weight sets")
        for (i, layer, shape), p in zip(wl, self.params):
            if tuple(p.weight.shape) != layer.weight_shape(shape):
                raise ShapeError(
                    f"layer {i}: weight shape {p.weight.shape} != {layer.weight_shape(shape)}"
                )
            if tuple(p.bias.shape) != (layer.weight_shape(shape)[0],):
                raise ShapeError(f"layer {i}: bias shape {p.bias.shape}")


# ---------------------------------------------------------------------------
# elementwise layers


def activation(kind: str, x: np.ndarray, layer=None) -> np.ndarray:
    """Apply a parameter-free layer to a batch ``x`` (leading sample axis)."""
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-x))
    if kind == "softmax":
        flat = x.reshape(x.shape[0], -1)
        e = np.exp(flat - flat.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True)).reshape(x.shape)
    if kind == "maxpool":
        win = sliding_window_view(x, (layer.window, layer.window), axis=(2, 3))
        win = win[:, :, :: layer.stride, :: layer.stride]
        c, h, w = layer.output_shape(x.shape[1:])
        return win[:, :, :h, :w].max(axis=(4, 5))
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# lowering


def im2col(x: np.ndarray, conv: Convolution) -> np.ndarray:
    """Receptive fields as rows, columns ordered channel, kernel row, kernel column.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; the result has
    ``B * out_h * out_w`` rows in sample, output-row, output-column order.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"im2col expects a 3-D or 4-D input, got shape {x.shape}")
    b, c, h, w = x.shape
    oh, ow = conv.spatial(h, w)
    p = conv.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (conv.kernel_h, conv.kernel_w), axis=(2, 3))
    win = win[:, :, :: conv.stride, :: conv.stride][:, :, :oh, :ow]
    # (B, C, oh, ow, kh, kw) -> (B, oh, ow, C, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * conv.kernel_h * conv.kernel_w)


def _lower(layer, x: np.ndarray):
    """Yield ``(group, rows)`` for a weight layer applied to batch ``x``."""
    if layer.kind == "fc":
        yield 0, x.reshape(x.shape[0], -1)
        return
    cg = x.shape[1] // layer.groups
    for g in range(layer.groups):
        yield g, im2col(x[:, g * cg : (g + 1) * cg], layer)


def _raise(layer, in_shape, batch: int, outs: list) -> np.ndarray:
    out = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
    if layer.kind == "fc":
        return out
    o, oh, ow = layer.output_shape(in_shape)
    return out.reshape(batch, oh, ow, o).transpose(0, 3, 1, 2)


def _dot_ascending(rows: np.ndarray, kernels: np.ndarray, lo: int = 0, hi: int | None = None):
    hi = rows.shape[1] if hi is None else hi
    acc = np.zeros((rows.shape[0], kernels.shape[0]), dtype=np.float64)
    for j in range(lo, hi):
        acc += rows[:, j, None] * kernels[None, :, j]
    return acc


def _sum_ascending(rows: np.ndarray, lo: int, hi: int) -> np.ndarray:
    acc = np.zeros(rows.shape[0], dtype=np.float64)
    for j in range(lo, hi):
        acc += rows[:, j]
    return acc


# ---------------------------------------------------------------------------
# driver


def _batched(fn, spec: NetworkSpec, x, trace: bool):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == spec.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    chunks = [x[i : i + CHUNK] for i in range(0, x.shape[0], CHUNK)] or [x]
    threads = thread_count()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, chunks))
    else:
        results = [fn(c) for c in chunks]
    out = np.concatenate([r[0] for r in results], axis=0)
    layers = [np.concatenate(parts, axis=0) for parts in zip(*(r[1] for r in results))]
    if single:
        out = out[0]
        layers = [t[0] for t in layers]
    return (out, layers) if trace else out


def _propagate(spec: NetworkSpec, x: np.ndarray, weight_fn, path: str):
    shapes = spec.shapes()
    trace = []
    w = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "fc"):
            outs = [weight_fn(w, g, rows) for g, rows in _lower(layer, x)]
            x = _raise(layer, shapes[i], x.shape[0], outs)
            trace.append(x)
            w += 1
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                x = activation(layer.kind, x, layer)
        if not np.all(np.isfinite(x)):
            raise NumericError(i, path)
    return x, trace


def forward_fp32(net: FloatNetwork, x, trace: bool = False):
    """Float reference pass.  With ``trace`` also returns every weight layer's output."""
    kernels = [
        (p.weight.reshape(p.weight.shape[0], -1).astype(np.float64), p.bias.astype(np.float64))
        for p in net.params
    ]

    def weight_fn(w, g, rows):
        k, b = kernels[w]
        og = k.shape[0] // _groups(net.spec, w)
        sl = slice(g * og, (g + 1) * og)
        with np.errstate(over="ignore", invalid="ignore"):
            return _dot_ascending(rows, k[sl]) + b[sl]

    return _batched(lambda c: _propagate(net.spec, c, weight_fn, "fp32"), net.spec, x, trace)


def _groups(spec: NetworkSpec, w: int) -> int:
    layer = spec.weight_layers()[w][1]
    return getattr(layer, "groups", 1)


# ---------------------------------------------------------------------------
# quantized networks


def effective_region(region_size: int | None, reduction: int) -> int | None:
    """Region length along one reduction row; ``None`` means layer-global."""
    if region_size is None:
        return None
    if region_size < 1:
        raise ValueError(f"region size must be >= 1, got {region_size}")
    return min(int(region_size), reduction)


def segments(reduction: int, weight_region: int | None, act_region: int | None):
    """Split ``[0, reduction)`` at every weight- or activation-region boundary.

    Returns ``(lo, hi, weight_region_index, activation_region_index)`` tuples.
    """
    wr = reduction if weight_region is None else weight_region
    ar = reduction if act_region is None else act_region
    cuts = sorted(set(range(0, reduction, wr)) | set(range(0, reduction, ar)) | {reduction})
    return tuple((lo, hi, lo // wr, lo // ar) for lo, hi in zip(cuts[:-1], cuts[1:]))


@dataclass(frozen=True)
class QuantizedLayer:
    weight: QuantizedTensor
    bias: np.ndarray
    reduction: int
    activation_region: int | None = None

    def __post_init__(self):
        part = self.weight.partition
        if not part.is_global and part.row != self.reduction:
            raise ShapeError("local weight regions must tile each kernel row")

    @property
    def out_channels(self) -> int:
        return self.weight.partition.total_elements // self.reduction

    @property
    def weight_region(self) -> int | None:
        return None if self.weight.partition.is_global else self.weight.partition.region_size

    @cached_property
    def codes(self) -> np.ndarray:
        return self.weight.unpacked.reshape(self.out_channels, self.reduction)

    def _grid(self, values: np.ndarray) -> np.ndarray:
        if self.weight.partition.is_global:
            return np.full((self.out_channels, 1), values[0])
        return values.reshape(self.out_channels, -1)

    @cached_property
    def weight_mins(self) -> np.ndarray:
        return self._grid(self.weight.x_mins)

    @cached_property
    def weight_steps(self) -> np.ndarray:
        return self._grid(self.weight.steps)

    @cached_property
    def segments(self):
        return segments(self.reduction, self.weight_region, self.activation_region)

    @cached_property
    def code_sums(self) -> np.ndarray:
        """Weight-code sum of every kernel over every segment, ``(O, n_segments)``."""
        return np.stack([self.codes[:, lo:hi].sum(axis=1) for lo, hi, _, _ in self.segments], axis=1)


@dataclass(frozen=True)
class QuantizedNetwork:
    spec: NetworkSpec
    layers: tuple
    mode: str
    weight_bits: int
    activation_bits: int | None = None
    region_size: int | None = None
    activation_region_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "wa":
            max_code(self.activation_bits or 0)
        wl = self.spec.weight_layers()
        if len(wl) != len(self.layers):
            raise ShapeError(f"{len(wl)} weight layers but {len(self.layers)} quantized layers")
        for (i, layer, shape), q in zip(wl, self.layers):
            o, k = layer.weight_shape(shape)[0], layer.reduction_length(shape)
            if q.weight.partition.total_elements != o * k or q.reduction != k:
                raise ShapeError(f"layer {i}: quantized weights do not match {o}x{k}")
            if q.weight.spec.bits != self.weight_bits:
                raise ShapeError(f"layer {i}: weight codes are not {self.weight_bits}-bit")

    @property
    def is_global(self) -> bool:
        return all(q.weight.partition.is_global for q in self.layers)


def quantize_layer(weight: np.ndarray, bits: int, region_size: int | None) -> QuantizedTensor:
    """Quantize an ``(O, ...)`` weight tensor, regions tiling each kernel's reduction axis.

    A region covering the whole tensor is layer-global, same as ``None``.
    """
    o = weight.shape[0]
    k = weight.size // o
    r = effective_region(region_size, k)
    flat = np.asarray(weight, dtype=np.float64).ravel()
    if r is None or region_size >= flat.size:
        return quantize_partitioned(flat, bits, RegionPartition(flat.size, flat.size))
    return quantize_partitioned(flat, bits, RegionPartition(r, flat.size, k))


def quantize_network(
    net: FloatNetwork,
    weight_bits: int,
    region_size: int | None = None,
    mode: str = "w",
    activation_bits: int | None = None,
    activation_region_size: int | None = None,
) -> QuantizedNetwork:
    """Quantize every weight layer.

    ``region_size=None`` gives one parameter set per layer (DQ); an integer
    gives regions of that length along each kernel, capped at the kernel's
    reduction length (LQ).  An integer at least the layer's weight count
    is layer-global again.  In ``"wa"`` mode activations are quantized at
    runtime to ``activation_bits`` over regions of ``activation_region_size``
    along each lowered row (``None``: one set per layer per sample).
    """
    if mode == "wa" and activation_bits is None:
        activation_bits = weight_bits
    layers = []
    for (i, layer, shape), p in zip(net.spec.weight_layers(), net.params):
        k = layer.reduction_length(shape)
        act = effective_region(activation_region_size, k) if mode == "wa" else None
        layers.append(
            QuantizedLayer(quantize_layer(p.weight, weight_bits, region_size), p.bias, k, act)
        )
    return QuantizedNetwork(
        net.spec, tuple(layers), mode, int(weight_bits),
        activation_bits if mode == "wa" else None,
        region_size, activation_region_size if mode == "wa" else None,
    )


def dequantized_network(qnet: QuantizedNetwork) -> FloatNetwork:
    params = []
    for (_, layer, shape), q in zip(qnet.spec.weight_layers(), qnet.layers):
        w = q.weight.dequantize().reshape(layer.weight_shape(shape)).astype(np.float32)
        params.append(LayerWeights(w, q.bias))
    return FloatNetwork(qnet.spec, tuple(params))


# ---------------------------------------------------------------------------
# runtime activation quantization


def quantize_activations(groups_rows: list, batch: int, bits: int, region: int | None):
    """Quantize lowered rows of one weight layer.

    Returns per group ``(codes, mins, steps)`` with ``codes`` shaped like the
    rows and ``mins``/``steps`` shaped ``(rows, n_regions)``.  A ``None``
    region calibrates once per sample over every row of every group.
    """
    top = float(max_code(bits))
    out = []
    if region is None:
        lo = np.min([r.reshape(batch, -1).min(axis=1) for r in groups_rows], axis=0)
        hi = np.max([r.reshape(batch, -1).max(axis=1) for r in groups_rows], axis=0)
        st = np.where(hi > lo, (hi - lo) / top, 0.0)
        for rows in groups_rows:
            per = rows.shape[0] // batch
            mins = np.repeat(lo, per)[:, None]
            steps = np.repeat(st, per)[:, None]
            out.append((quantize_array(rows, mins, steps, bits), mins, steps))
        return out
    for rows in groups_rows:
        starts = np.arange(0, rows.shape[1], region)
        mins = np.minimum.reduceat(rows, starts, axis=1)
        maxs = np.maximum.reduceat(rows, starts, axis=1)
        steps = np.where(maxs > mins, (maxs - mins) / top, 0.0)
        width = np.diff(np.append(starts, rows.shape[1]))
        codes = quantize_array(rows, np.repeat(mins, width, axis=1), np.repeat(steps, width, axis=1), bits)
        out.append((codes, mins, steps))
    return out


def region_partial(w_step, w_min, a_step, a_min, t, w_sum, a_sum, count):
    """Real value of one segment's dot product from its integer partials.

    ``(w_min + s_w*c)·(a_min + s_a*d)`` summed over the segment expands to
    ``s_w*s_a*Σcd + s_w*a_min*Σc + w_min*s_a*Σd + n*w_min*a_min``.  Weight
    terms broadcast along kernels, activation terms along rows.
    """
    return ((w_step * a_step) * t + (w_step * a_min) * w_sum) + (w_min * a_step) * a_sum + (count * w_min) * a_min


def _quantized_weight_fn(qnet: QuantizedNetwork, integer_partial=None):
    """Weight-layer kernel shared by forward_dq, forward_lq and the LUT path.

    ``integer_partial(w, g, codes, lo, hi, seg_index)`` may replace the exact
    code matmul.  It returns ``(Σ code products, Σ weight codes)`` for the
    segment (the second may be ``None``) and must produce the same integers.
    """
    wl = qnet.spec.weight_layers()

    def matmul_partial(w, g, acodes, lo, hi, s):
        q = qnet.layers[w]
        og = q.out_channels // getattr(wl[w][1], "groups", 1)
        wc = q.codes[g * og : (g + 1) * og, lo:hi].astype(np.float64)
        return acodes[:, lo:hi].astype(np.float64) @ wc.T, None

    partial = integer_partial or matmul_partial

    def weight_only(w, g, rows):
        q = qnet.layers[w]
        og = q.out_channels // getattr(wl[w][1], "groups", 1)
        sl = slice(g * og, (g + 1) * og)
        wc = q.codes[sl].astype(np.float64)
        out = np.zeros((rows.shape[0], og), dtype=np.float64)
        for lo, hi, wk, _ in q.segments:
            acc = _dot_ascending(rows, wc, lo, hi)
            asum = _sum_ascending(rows, lo, hi)
            out += q.weight_steps[sl, wk][None, :] * acc + q.weight_mins[sl, wk][None, :] * asum[:, None]
        return out + q.bias[sl].astype(np.float64)

    def weight_act(w, g, rows, acodes, amins, asteps):
        q = qnet.layers[w]
        og = q.out_channels // getattr(wl[w][1], "groups", 1)
        sl = slice(g * og, (g + 1) * og)
        out = np.zeros((rows.shape[0], og), dtype=np.float64)
        for s, (lo, hi, wk, ak) in enumerate(q.segments):
            t, w_sum = partial(w, g, acodes, lo, hi, s)
            if w_sum is None:
                w_sum = q.code_sums[sl, s][None, :].astype(np.float64)
            a_sum = acodes[:, lo:hi].sum(axis=1).astype(np.float64)[:, None]
            out += region_partial(
                q.weight_steps[sl, wk][None, :], q.weight_mins[sl, wk][None, :],
                asteps[:, ak, None], amins[:, ak, None],
                t, w_sum, a_sum, float(hi - lo),
            )
        return out + q.bias[sl].astype(np.float64)

    return weight_only, weight_act


def _propagate_quantized(qnet: QuantizedNetwork, x: np.ndarray, path: str, integer_partial=None):
    weight_only, weight_act = _quantized_weight_fn(qnet, integer_partial)
    shapes = qnet.spec.shapes()
    trace = []
    w = 0
    for i, layer in enumerate(qnet.spec.layers):
        if layer.kind in ("conv", "fc"):
            lowered = list(_lower(layer, x))
            with np.errstate(over="ignore", invalid="ignore"):
                if qnet.mode == "w":
                    outs = [weight_only(w, g, rows) for g, rows in lowered]
                else:
                    q = quantize_activations(
                        [r for _, r in lowered], x.shape[0], qnet.activation_bits,
                        qnet.layers[w].activation_region,
                    )
                    outs = [weight_act(w, g, rows, *q[g]) for g, rows in lowered]
            x = _raise(layer, shapes[i], x.shape[0], outs)
            trace.append(x)
            w += 1
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                x = activation(layer.kind, x, layer)
        if not np.all(np.isfinite(x)):
            raise NumericError(i, path)
    return x, trace


def forward_lq(qnet: QuantizedNetwork, x, trace: bool = False):
    """Region-local quantized pass: each region partial dequantized with its own parameters."""
    return _batched(lambda c: _propagate_quantized(qnet, c, "lq"), qnet.spec, x, trace)


def forward_dq(qnet: QuantizedNetwork, x, trace: bool = False):
    """Per-layer quantized pass; requires one weight parameter set per layer."""
    if not qnet.is_global:
        raise ValueError("forward_dq needs layer-global weight quantization (region_size=None)")
    return _batched(lambda c: _propagate_quantized(qnet, c, "dq"), qnet.spec, x, trace)
