"""Affine low-bit quantization with global or region-local parameters.

A value ``x`` in a region with minimum ``x_min`` and step ``s`` maps to the
unsigned code ``round((x - x_min) / s)`` clamped to ``[0, 2**bits - 1]`` and
reconstructs as ``x_min + code * s``.  Ties round half away from zero.

Regions tile a row-major sequence contiguously.  A partition may carry a
``row_length``: regions then restart at each row boundary, which is how a
weight matrix gets one set of regions per output kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MIN_BITS = 1
MAX_BITS = 8
PACKABLE_BITS = (1, 2, 4, 8)


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def max_code(bits: int) -> int:
    _check_bits(bits)
    return (1 << int(bits)) - 1


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    rounding: str = "half-away"

    def __post_init__(self):
        _check_bits(self.bits)
        if self.rounding != "half-away":
            raise ValueError(f"unsupported rounding policy {self.rounding!r}")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def max_code(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantParams:
    x_min: float
    step: float

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.step)):
            raise ValueError("quantization parameters must be finite")
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")


@dataclass(frozen=True)
class RegionPartition:
    """Contiguous tiling of ``total_elements`` into regions of ``region_size``.

    With ``row_length`` set, the sequence is viewed as rows of that length
    and each row is tiled independently (the last region of every row may be
    short).  Without it the whole sequence is one row.
    """

    region_size: int
    total_elements: int
    row_length: int | None = None

    def __post_init__(self):
        if self.region_size < 1:
            raise ValueError(f"region_size must be >= 1, got {self.region_size}")
        if self.total_elements < 1:
            raise ValueError("partition must cover at least one element")
        if self.row_length is not None:
            if self.row_length < 1 or self.total_elements % self.row_length:
                raise ValueError(
                    f"row_length {self.row_length} does not divide {self.total_elements}"
                )

    @property
    def row(self) -> int:
        return self.total_elements if self.row_length is None else self.row_length

    @property
    def rows(self) -> int:
        return self.total_elements // self.row

    @property
    def regions_per_row(self) -> int:
        return -(-self.row // self.region_size)

    @property
    def region_count(self) -> int:
        return self.rows * self.regions_per_row

    @property
    def is_global(self) -> bool:
        return self.region_count == 1

    def starts(self) -> np.ndarray:
        """Flat start index of every region, ascending."""
        within = np.arange(self.regions_per_row, dtype=np.int64) * self.region_size
        rows = np.arange(self.rows, dtype=np.int64)[:, None] * self.row
        return (rows + within[None, :]).ravel()

    def bounds(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.region_count:
            raise IndexError(k)
        r, q = divmod(k, self.regions_per_row)
        lo = r * self.row + q * self.region_size
        return lo, min(lo + self.region_size, (r + 1) * self.row)

    def region_index(self) -> np.ndarray:
        """Region number of every element."""
        idx = np.arange(self.total_elements, dtype=np.int64)
        r, j = np.divmod(idx, self.row)
        return r * self.regions_per_row + j // self.region_size

    def to_dict(self) -> dict:
        return {
            "region_size": int(self.region_size),
            "total_elements": int(self.total_elements),
            "row_length": None if self.row_length is None else int(self.row_length),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPartition":
        return cls(d["region_size"], d["total_elements"], d.get("row_length"))


def round_half_away(v):
    """Round to nearest integer, ties away from zero (exact for any float)."""
    v = np.asarray(v, dtype=np.float64)
    t = np.trunc(v)
    frac = v - t
    return t + np.where(np.abs(frac) >= 0.5, np.sign(v), 0.0)


def step(x_min: float, x_max: float, bits: int) -> float:
    _check_bits(bits)
    if not (math.isfinite(x_min) and math.isfinite(x_max)):
        raise ValueError("bounds must be finite")
    if x_max < x_min:
        raise ValueError(f"x_max ({x_max}) < x_min ({x_min})")
    if x_max == x_min:
        return 0.0
    return (float(x_max) - float(x_min)) / ((1 << int(bits)) - 1)


def quantize_value(x: float, params: QuantParams, bits: int) -> int:
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    return int(quantize_array(np.float64(x), params.x_min, params.step, bits))


def dequantize_value(code: int, params: QuantParams) -> float:
    return params.x_min + code * params.step


def quant_error(x: float, params: QuantParams, bits: int) -> float:
    """Reconstruction error ``x - dequantize(quantize(x))``."""
    return x - dequantize_value(quantize_value(x, params, bits), params)


def quantize_array(x, x_min, step_, bits: int) -> np.ndarray:
    """Elementwise quantization against broadcastable ``x_min``/``step_``.

    Out-of-range values saturate at the code range limits.
    """
    top = max_code(bits)
    x = np.asarray(x, dtype=np.float64)
    x_min = np.asarray(x_min, dtype=np.float64)
    step_ = np.asarray(step_, dtype=np.float64)
    live = step_ > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(live, (x - x_min) / np.where(live, step_, 1.0), 0.0)
    return np.clip(round_half_away(v), 0, top).astype(np.int64)


def dequantize_array(codes, x_min, step_) -> np.ndarray:
    return np.asarray(x_min, dtype=np.float64) + np.asarray(codes) * np.asarray(step_, dtype=np.float64)


def fit_params(values, bits: int) -> QuantParams:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot fit quantization parameters to an empty slice")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    lo, hi = float(v.min()), float(v.max())
    return QuantParams(lo, step(lo, hi, bits))


def fit_regions(values: np.ndarray, bits: int, partition: RegionPartition):
    """Per-region ``(x_min, step)`` arrays for a flat array under ``partition``."""
    _check_bits(bits)
    starts = partition.starts()
    lo = np.minimum.reduceat(values, starts)
    hi = np.maximum.reduceat(values, starts)
    steps = np.where(hi > lo, (hi - lo) / float(max_code(bits)), 0.0)
    return lo, steps


# ---------------------------------------------------------------------------
# bit packing


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes little-endian within each byte.

    Widths that do not divide 8 are stored one code per byte.
    """
    _check_bits(bits)
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < 0 or c.max() > max_code(bits)):
        raise ValueError(f"code out of range for {bits}-bit packing")
    if bits not in PACKABLE_BITS or bits == 8:
        return c.astype(np.uint8).tobytes()
    per = 8 // bits
    pad = (-c.size) % per
    c = np.concatenate([c, np.zeros(pad, dtype=np.int64)]).reshape(-1, per)
    shifts = np.arange(per, dtype=np.int64) * bits
    return (c << shifts).sum(axis=1).astype(np.uint8).tobytes()


def packed_size(count: int, bits: int) -> int:
    if bits not in PACKABLE_BITS:
        return count
    return -(-count * bits // 8)


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    _check_bits(bits)
    need = packed_size(count, bits)
    if len(data) != need:
        raise ValueError(f"expected {need} packed bytes for {count} {bits}-bit codes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if bits not in PACKABLE_BITS or bits == 8:
        out = raw
        if out.size and out.max() > max_code(bits):
            raise ValueError(f"stored code exceeds {bits}-bit range")
        return out.copy()
    per = 8 // bits
    shifts = np.arange(per, dtype=np.int64) * bits
    out = (raw[:, None] >> shifts[None, :]) & max_code(bits)
    return out.ravel()[:count]


# ---------------------------------------------------------------------------
# quantized tensors


@dataclass(frozen=True)
class QuantizedTensor:
    codes: bytes
    spec: QuantSpec
    partition: RegionPartition
    params: tuple[QuantParams, ...]

    def __post_init__(self):
        if len(self.params) != self.partition.region_count:
            raise ValueError(
                f"{len(self.params)} params for {self.partition.region_count} regions"
            )
        if len(self.codes) != packed_size(self.partition.total_elements, self.spec.bits):
            raise ValueError("packed code length does not match partition size")

    @cached_property
    def unpacked(self) -> np.ndarray:
        out = unpack_codes(self.codes, self.spec.bits, self.partition.total_elements)
        out.setflags(write=False)
        return out

    @cached_property
    def x_mins(self) -> np.ndarray:
        return np.array([p.x_min for p in self.params], dtype=np.float64)

    @cached_property
    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.params], dtype=np.float64)

    def dequantize(self) -> np.ndarray:
        k = self.partition.region_index()
        return dequantize_array(self.unpacked, self.x_mins[k], self.steps[k])

    @classmethod
    def from_arrays(cls, codes, bits, partition, x_mins, steps) -> "QuantizedTensor":
        params = tuple(QuantParams(float(a), float(s)) for a, s in zip(x_mins, steps))
        return cls(pack_codes(codes, bits), QuantSpec(int(bits)), partition, params)


def quantize_partitioned(values, bits: int, partition: RegionPartition) -> QuantizedTensor:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot quantize an empty slice")
    if v.size != partition.total_elements:
        raise ValueError(f"partition covers {partition.total_elements} elements, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    lo, steps = fit_regions(v, bits, partition)
    k = partition.region_index()
    codes = quantize_array(v, lo[k], steps[k], bits)
    return QuantizedTensor.from_arrays(codes, bits, partition, lo, steps)


def quantize_global(values, bits: int) -> QuantizedTensor:
    n = np.asarray(values).size
    if n == 0:
        raise ValueError("cannot quantize an empty slice")
    return quantize_partitioned(values, bits, RegionPartition(n, n))


def quantize_local(values, bits: int, region_size: int, row_length: int | None = None) -> QuantizedTensor:
    if region_size < 1:
        raise ValueError(f"region_size must be >= 1, got {region_size}")
    n = np.asarray(values).size
    if n == 0:
        raise ValueError("cannot quantize an empty slice")
    if row_length is not None and row_length == n:
        row_length = None
    row = n if row_length is None else row_length
    region_size = min(region_size, row)
    return quantize_partitioned(values, bits, RegionPartition(region_size, n, row_length))
