"""Multiply-free forward pass over precomputed integer lookup tables.

``g`` consecutive ``b``-bit activation codes form one table index (element 0
in the low bits).  For every kernel and every group of ``g`` weight
positions the table holds the integer dot product of the group's weight
codes with each of the ``2**(g*b)`` possible activation-code tuples.  At
runtime a group costs one fetch and one add; the real-valued affine
correction happens once per region.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .forward import QuantizedNetwork, _batched, _propagate_quantized, segments
from .quantizer import max_code

LUT_BITS = (1, 2, 4)
MAX_INDEX_BITS = 16


@dataclass(frozen=True)
class LutConfig:
    activation_bits: int = 2
    group_size: int = 3
    region_size: int = 9

    def __post_init__(self):
        if self.activation_bits not in LUT_BITS:
            raise ValueError(f"LUT activation bits must be one of {LUT_BITS}, got {self.activation_bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.group_size * self.activation_bits > MAX_INDEX_BITS:
            raise ValueError(
                f"index width {self.group_size * self.activation_bits} exceeds {MAX_INDEX_BITS} bits"
            )
        if self.region_size < 1 or self.region_size % self.group_size:
            raise ValueError(f"region_size {self.region_size} is not a multiple of group_size {self.group_size}")

    @property
    def index_bits(self) -> int:
        return self.group_size * self.activation_bits

    @property
    def entries(self) -> int:
        return 1 << self.index_bits

    def to_dict(self) -> dict:
        return {
            "activation_bits": self.activation_bits,
            "group_size": self.group_size,
            "region_size": self.region_size,
        }


def pack_index(acodes, bits: int) -> int:
    idx = 0
    top = max_code(bits)
    for i, c in enumerate(acodes):
        c = int(c)
        if not 0 <= c <= top:
            raise ValueError(f"activation code {c} does not fit in {bits} bits")
        idx |= c << (bits * i)
    return idx


def index_fields(group_size: int, bits: int) -> np.ndarray:
    """``(2**(g*b), g)`` matrix of the code held in each field of each index."""
    idx = np.arange(1 << (group_size * bits), dtype=np.int64)
    shifts = np.arange(group_size, dtype=np.int64) * bits
    return (idx[:, None] >> shifts[None, :]) & ((1 << bits) - 1)


def group_starts(layer_segments, group_size: int) -> list[tuple[int, int, int]]:
    """``(segment, lo, hi)`` of every lookup group; groups never cross a segment."""
    out = []
    for s, (lo, hi, _, _) in enumerate(layer_segments):
        for a in range(lo, hi, group_size):
            out.append((s, a, min(a + group_size, hi)))
    return out


@dataclass(frozen=True)
class LayerTables:
    entries: np.ndarray      # (O, n_groups, 2**(g*b)) int32
    group_sums: np.ndarray   # (O, n_groups) int64
    groups: tuple            # (segment, lo, hi) per group

    @property
    def nbytes(self) -> int:
        return int(self.entries.size) * 4


def build_tables(weight_codes: np.ndarray, cfg: LutConfig, layer_segments) -> LayerTables:
    """Exhaustive integer tables for one layer's ``(O, K)`` weight codes.

    Short groups behave as full groups whose missing weight codes are zero.
    """
    codes = np.asarray(weight_codes, dtype=np.int64)
    groups = group_starts(layer_segments, cfg.group_size)
    fields = index_fields(cfg.group_size, cfg.activation_bits)
    o = codes.shape[0]
    block = np.zeros((o, len(groups), cfg.group_size), dtype=np.int64)
    for q, (_, lo, hi) in enumerate(groups):
        block[:, q, : hi - lo] = codes[:, lo:hi]
    entries = np.einsum("oqi,ei->oqe", block, fields)
    return LayerTables(entries.astype(np.int32), block.sum(axis=2), tuple(groups))


@dataclass(frozen=True)
class LutNetwork:
    base: QuantizedNetwork
    cfg: LutConfig
    tables: tuple = field(default=None)

    def __post_init__(self):
        b = self.base
        if b.mode != "wa":
            raise ValueError("LUT networks need a weight-and-activation quantized network")
        if b.activation_bits != self.cfg.activation_bits:
            raise ValueError(
                f"network activations are {b.activation_bits}-bit, tables expect {self.cfg.activation_bits}"
            )
        for i, q in enumerate(b.layers):
            expect = segments(q.reduction, min(self.cfg.region_size, q.reduction),
                              min(self.cfg.region_size, q.reduction))
            if q.segments != expect:
                raise ValueError(f"weight layer {i}: regions do not match LUT region size {self.cfg.region_size}")
        if self.tables is None:
            object.__setattr__(
                self, "tables",
                tuple(build_tables(q.codes, self.cfg, q.segments) for q in b.layers),
            )
        else:
            object.__setattr__(self, "tables", tuple(self.tables))
            if len(self.tables) != len(b.layers):
                raise ValueError("one table set per weight layer required")

    @property
    def spec(self):
        return self.base.spec

    def table_bytes(self) -> int:
        return sum(t.nbytes for t in self.tables)


def build_lut_network(qnet: QuantizedNetwork, cfg: LutConfig) -> LutNetwork:
    return LutNetwork(qnet, cfg)


class LutCounter:
    """Tally of the operations a LUT forward pass actually executes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.lookups = 0
        self.adds = 0
        self.region_scales = 0

    def record(self, neurons: int, groups: int) -> None:
        with self._lock:
            self.lookups += neurons * groups
            self.adds += neurons * groups
            self.region_scales += neurons

    def as_dict(self) -> dict:
        return {"lookups": self.lookups, "adds": self.adds, "region_scales": self.region_scales}


def _lookup_partial(net: LutNetwork, counter: LutCounter | None):
    wl = net.spec.weight_layers()
    by_segment = []
    for t in net.tables:
        per = {}
        for q, (s, lo, hi) in enumerate(t.groups):
            per.setdefault(s, []).append((q, lo, hi))
        by_segment.append(per)
    bits = net.cfg.activation_bits

    def partial(w, g, acodes, lo, hi, s):
        t = net.tables[w]
        og = t.entries.shape[0] // getattr(wl[w][1], "groups", 1)
        entries = t.entries[g * og : (g + 1) * og]
        acc = np.zeros((acodes.shape[0], og), dtype=np.int64)
        for q, a, b in by_segment[w][s]:
            idx = np.zeros(acodes.shape[0], dtype=np.int64)
            for i in range(b - a):
                idx |= acodes[:, a + i] << (bits * i)
            acc += entries[:, q, :][:, idx].T
        if counter is not None:
            counter.record(acodes.shape[0] * og, len(by_segment[w][s]))
        w_sum = t.group_sums[g * og : (g + 1) * og, [q for q, _, _ in by_segment[w][s]]].sum(axis=1)
        return acc.astype(np.float64), w_sum.astype(np.float64)[None, :]

    return partial


def forward_lut(net: LutNetwork, x, trace: bool = False, counter: LutCounter | None = None):
    """Table-driven pass; equals :func:`forward_lq` on ``net.base`` bit for bit."""
    partial = _lookup_partial(net, counter)
    return _batched(
        lambda c: _propagate_quantized(net.base, c, "lut", integer_partial=partial),
        net.spec, x, trace,
    )
