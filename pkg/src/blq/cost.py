"""Analytic multiply/add/lookup counts for direct and table-driven execution.

Direct execution costs one multiply and one add per MAC.  Table-driven
execution costs one lookup (counted as one add) per group of ``g``
activations and one multiply per region dequantization, both charged per
output neuron with short tail groups and regions rounded up.  Offline table
construction, activation-code bookkeeping, inter-region sums and the affine
cross terms are not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .lut import LutConfig
from .network import NetworkSpec

SCOPES = ("conv", "all")
ENTRY_BYTES = 2


@dataclass(frozen=True)
class CostConvention:
    mode: str                       # "direct" or "lut"
    scope: str = "conv"             # "conv" or "all" (conv + fc)
    group_size: int | None = None
    region_size: int | None = None
    activation_bits: int | None = None

    def __post_init__(self):
        if self.mode not in ("direct", "lut"):
            raise ValueError(f"unknown counting mode {self.mode!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")

    def describe(self) -> str:
        if self.mode == "direct":
            return f"direct: 1 multiply + 1 add per MAC; scope={self.scope}"
        return (
            f"lut: 1 add per lookup of {self.group_size} x {self.activation_bits}-bit codes, "
            f"1 multiply per region of {self.region_size}; tails rounded up per output; "
            f"table build, cross terms and inter-region sums excluded; scope={self.scope}"
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["description"] = self.describe()
        return d


@dataclass(frozen=True)
class LayerCount:
    layer: int
    kind: str
    outputs: int
    reduction: int
    macs: int
    multiplies: int
    adds: int
    lookups: int


@dataclass(frozen=True)
class OpCount:
    multiplies: int
    adds: int
    lookups: int
    per_layer: tuple
    convention: CostConvention

    def __post_init__(self):
        if (
            self.multiplies != sum(l.multiplies for l in self.per_layer)
            or self.adds != sum(l.adds for l in self.per_layer)
            or self.lookups != sum(l.lookups for l in self.per_layer)
        ):
            raise ValueError("totals must equal the per-layer sums")

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.per_layer)

    def millions(self) -> dict:
        return {
            "multiplies": to_millions(self.multiplies),
            "adds": to_millions(self.adds),
            "lookups": to_millions(self.lookups),
        }

    def to_dict(self) -> dict:
        return {
            "convention": self.convention.to_dict(),
            "multiplies": self.multiplies,
            "adds": self.adds,
            "lookups": self.lookups,
            "millions": self.millions(),
            "per_layer": [asdict(l) for l in self.per_layer],
        }


def to_millions(n: int) -> int:
    """Round a count to whole millions, halves away from zero."""
    q, r = divmod(abs(n), 1_000_000)
    q += r >= 500_000
    return q if n >= 0 else -q


def _layers(net: NetworkSpec, scope: str):
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    shapes = net.shapes()
    for i, layer, shape in net.weight_layers():
        if layer.kind == "fc" and scope == "conv":
            continue
        out = shapes[i + 1]
        outputs = 1
        for d in out:
            outputs *= d
        yield i, layer, outputs, layer.reduction_length(shape)


def _total(per_layer, convention) -> OpCount:
    per_layer = tuple(per_layer)
    return OpCount(
        sum(l.multiplies for l in per_layer),
        sum(l.adds for l in per_layer),
        sum(l.lookups for l in per_layer),
        per_layer,
        convention,
    )


def count_direct(net: NetworkSpec, scope: str = "conv") -> OpCount:
    rows = []
    for i, layer, outputs, k in _layers(net, scope):
        macs = outputs * k
        rows.append(LayerCount(i, layer.kind, outputs, k, macs, macs, macs, 0))
    return _total(rows, CostConvention("direct", scope))


def count_lut(net: NetworkSpec, cfg: LutConfig, scope: str = "conv") -> OpCount:
    rows = []
    for i, layer, outputs, k in _layers(net, scope):
        r = min(cfg.region_size, k)
        regions = -(-k // r)
        # groups restart at every region boundary
        full, tail = divmod(k, r)
        groups = full * -(-r // cfg.group_size) + (-(-tail // cfg.group_size) if tail else 0)
        lookups = outputs * groups
        rows.append(LayerCount(i, layer.kind, outputs, k, outputs * k, outputs * regions, lookups, lookups))
    conv = CostConvention("lut", scope, cfg.group_size, cfg.region_size, cfg.activation_bits)
    return _total(rows, conv)


def table_footprint(net: NetworkSpec, cfg: LutConfig, scope: str = "conv", entry_bytes: int = ENTRY_BYTES) -> int:
    """Bytes of lookup tables: one ``2**(g*b)``-entry table per kernel per group."""
    total = 0
    for i, layer, _, k in _layers(net, scope):
        total += layer.weight_shape(net.shapes()[i])[0] * -(-k // cfg.group_size) * cfg.entries * entry_bytes
    return total
