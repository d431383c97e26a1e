"""Binary model files and IDX datasets.

Model file layout::

    b"BLQM" | version: u16 LE | header length: u32 LE | header (UTF-8 JSON)
    | payload blobs in weight-layer order

The header is canonical JSON (sorted keys, no whitespace) that lists every
blob with its dtype and byte count, so ``save(load(data)) == data``.
Blobs: float weights and biases as ``<f4``; quantized weights as ``<f8``
``(x_min, step)`` pairs followed by packed code bytes; lookup tables as
``<i4``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from math import prod
from pathlib import Path

import numpy as np

from .forward import (
    FloatNetwork,
    LayerWeights,
    QuantizedLayer,
    QuantizedNetwork,
    effective_region,
)
from .lut import LayerTables, LutConfig, LutNetwork, build_tables, group_starts
from .network import NetworkSpec, ShapeError
from .quantizer import QuantizedTensor, QuantParams, QuantSpec, RegionPartition, packed_size

MAGIC = b"BLQM"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class SizeMismatchError(ModelFormatError):
    pass


class ModelShapeError(ModelFormatError):
    pass


class IdxFormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# encoding


def _blob(name: str, dtype: str, data: bytes, **extra) -> tuple[dict, bytes]:
    entry = {"name": name, "dtype": dtype, "bytes": len(data)}
    entry.update(extra)
    return entry, data


def _quant_blobs(q: QuantizedLayer):
    t = q.weight
    pairs = np.empty((len(t.params), 2), dtype="<f8")
    pairs[:, 0] = t.x_mins
    pairs[:, 1] = t.steps
    return [
        _blob("params", "<f8", pairs.tobytes(), count=int(pairs.size)),
        _blob("codes", "u1", t.codes, bits=t.spec.bits, count=t.partition.total_elements,
              partition=t.partition.to_dict()),
        _blob("bias", "<f4", np.asarray(q.bias, dtype="<f4").tobytes(), count=int(q.bias.size)),
    ]


def encode_model(model) -> bytes:
    if isinstance(model, FloatNetwork):
        kind, qnet, cfg, tables = "fp32", None, None, None
        layer_blobs = [
            [
                _blob("weight", "<f4", np.asarray(p.weight, dtype="<f4").tobytes(), shape=list(p.weight.shape)),
                _blob("bias", "<f4", np.asarray(p.bias, dtype="<f4").tobytes(), count=int(p.bias.size)),
            ]
            for p in model.params
        ]
        spec = model.spec
    else:
        if isinstance(model, LutNetwork):
            kind, qnet, cfg, tables = "lut", model.base, model.cfg, model.tables
        elif isinstance(model, QuantizedNetwork):
            kind, qnet, cfg, tables = "quantized", model, None, None
        else:
            raise TypeError(f"cannot serialize {type(model).__name__}")
        spec = qnet.spec
        layer_blobs = []
        for w, q in enumerate(qnet.layers):
            blobs = _quant_blobs(q)
            if tables is not None:
                e = np.asarray(tables[w].entries, dtype="<i4")
                blobs.append(_blob("tables", "<i4", e.tobytes(), shape=list(e.shape)))
            layer_blobs.append(blobs)

    header = {
        "format": "blq-model",
        "kind": kind,
        "network": spec.to_dict(),
        "quantization": None if qnet is None else {
            "mode": qnet.mode,
            "weight_bits": qnet.weight_bits,
            "activation_bits": qnet.activation_bits,
            "region_size": qnet.region_size,
            "activation_region_size": qnet.activation_region_size,
        },
        "lut": None if cfg is None else cfg.to_dict(),
        "layers": [
            {"layer": i, "blobs": [entry for entry, _ in blobs]}
            for (i, _, _), blobs in zip(spec.weight_layers(), layer_blobs)
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(data for blobs in layer_blobs for _, data in blobs)
    return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + payload


def save_model(model, path) -> None:
    atomic_write(path, encode_model(model))


# ---------------------------------------------------------------------------
# decoding


def _expect(entry: dict, name: str, dtype: str, nbytes: int, where: str):
    if entry.get("name") != name or entry.get("dtype") != dtype:
        raise ModelFormatError(f"{where}: expected blob {name!r} ({dtype}), found {entry.get('name')!r}")
    if entry.get("bytes") != nbytes:
        raise SizeMismatchError(
            f"{where}: blob {name!r} declares {entry.get('bytes')} bytes, shape implies {nbytes}"
        )


def decode_model(data: bytes):
    if len(data) < _PREAMBLE.size:
        raise TruncatedError(f"file is {len(data)} bytes, preamble needs {_PREAMBLE.size}")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported model version {version} (reader supports {VERSION})")
    start = _PREAMBLE.size
    if len(data) < start + hlen:
        raise TruncatedError(f"header declares {hlen} bytes at offset {start}, only {len(data) - start} present")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None
    try:
        spec = NetworkSpec.from_dict(header["network"])
    except ShapeError as exc:
        raise ModelShapeError(f"network does not chain: {exc}") from None
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed network description: {exc}") from None

    offset = start + hlen
    expected = offset + sum(b["bytes"] for l in header["layers"] for b in l["blobs"])
    if len(data) < expected:
        raise TruncatedError(f"payload truncated: expected {expected} bytes in total, got {len(data)}")
    if len(data) > expected:
        raise SizeMismatchError(f"{len(data) - expected} unexpected trailing bytes after offset {expected}")
    wl = spec.weight_layers()
    if len(header["layers"]) != len(wl):
        raise ModelShapeError(f"{len(header['layers'])} layer entries for {len(wl)} weight layers")

    def take(n):
        nonlocal offset
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    kind = header["kind"]
    if kind == "fp32":
        params = []
        for (i, layer, shape), entry in zip(wl, header["layers"]):
            ws = layer.weight_shape(shape)
            wb, bb = entry["blobs"]
            _expect(wb, "weight", "<f4", 4 * prod(ws), f"layer {i}")
            _expect(bb, "bias", "<f4", 4 * ws[0], f"layer {i}")
            w = np.frombuffer(take(wb["bytes"]), dtype="<f4").astype(np.float32).reshape(ws)
            b = np.frombuffer(take(bb["bytes"]), dtype="<f4").astype(np.float32)
            params.append(LayerWeights(w, b))
        return FloatNetwork(spec, tuple(params))
    if kind not in ("quantized", "lut"):
        raise ModelFormatError(f"unknown model kind {kind!r}")

    qh = header["quantization"]
    cfg = LutConfig(**header["lut"]) if kind == "lut" else None
    layers, stored_tables = [], []
    for (i, layer, shape), entry in zip(wl, header["layers"]):
        where = f"layer {i}"
        ws = layer.weight_shape(shape)
        k = layer.reduction_length(shape)
        blobs = entry["blobs"]
        if len(blobs) != (4 if cfg else 3):
            raise ModelFormatError(f"{where}: unexpected blob count {len(blobs)}")
        pb, cb, bb = blobs[:3]
        part = RegionPartition.from_dict(cb["partition"])
        if part.total_elements != prod(ws):
            raise ModelShapeError(f"{where}: partition covers {part.total_elements} weights, layer has {prod(ws)}")
        bits = cb["bits"]
        _expect(pb, "params", "<f8", 16 * part.region_count, where)
        _expect(cb, "codes", "u1", packed_size(part.total_elements, bits), where)
        _expect(bb, "bias", "<f4", 4 * ws[0], where)
        pairs = np.frombuffer(take(pb["bytes"]), dtype="<f8").reshape(-1, 2)
        codes = take(cb["bytes"])
        bias = np.frombuffer(take(bb["bytes"]), dtype="<f4").astype(np.float32)
        try:
            tensor = QuantizedTensor(
                codes, QuantSpec(bits), part,
                tuple(QuantParams(float(a), float(s)) for a, s in pairs),
            )
            tensor.unpacked
        except ValueError as exc:
            raise ModelFormatError(f"{where}: {exc}") from None
        act = effective_region(qh["activation_region_size"], k) if qh["mode"] == "wa" else None
        layers.append(QuantizedLayer(tensor, bias, k, act))
        if cfg:
            tb = blobs[3]
            groups = group_starts(layers[-1].segments, cfg.group_size)
            tshape = (ws[0], len(groups), cfg.entries)
            _expect(tb, "tables", "<i4", 4 * prod(tshape), where)
            stored_tables.append(np.frombuffer(take(tb["bytes"]), dtype="<i4").astype(np.int32).reshape(tshape))
    try:
        qnet = QuantizedNetwork(
            spec, tuple(layers), qh["mode"], qh["weight_bits"], qh["activation_bits"],
            qh["region_size"], qh["activation_region_size"],
        )
    except ShapeError as exc:
        raise ModelShapeError(str(exc)) from None
    if cfg is None:
        return qnet
    tables = []
    for w, (q, stored) in enumerate(zip(qnet.layers, stored_tables)):
        rebuilt = build_tables(q.codes, cfg, q.segments)
        if not np.array_equal(rebuilt.entries, stored):
            raise ModelFormatError(f"weight layer {w}: stored lookup tables do not match weight codes")
        tables.append(LayerTables(stored, rebuilt.group_sums, rebuilt.groups))
    return LutNetwork(qnet, cfg, tuple(tables))


def load_model(path):
    return decode_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# IDX


_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}


def encode_idx(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype == np.uint8:
        code, dt = 0x08, _IDX_TYPES[0x08]
    elif a.dtype == np.float32:
        code, dt = 0x0D, _IDX_TYPES[0x0D]
    else:
        raise IdxFormatError(f"IDX writer supports uint8 and float32, got {a.dtype}")
    head = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    return head + a.astype(dt).tobytes()


def decode_idx(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IdxFormatError("not an IDX file (bad magic)")
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"unsupported IDX element type 0x{code:02X}")
    if len(data) < 4 + 4 * ndim:
        raise IdxFormatError("IDX header truncated")
    shape = struct.unpack_from(f">{ndim}I", data, 4)
    dt = _IDX_TYPES[code]
    need = 4 + 4 * ndim + prod(shape) * dt.itemsize
    if len(data) != need:
        raise IdxFormatError(f"IDX payload size mismatch: expected {need} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=dt, offset=4 + 4 * ndim).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save_idx(array, path) -> None:
    atomic_write(path, encode_idx(array))


def load_idx(path) -> np.ndarray:
    return decode_idx(Path(path).read_bytes())


def labels_path(images_path) -> Path:
    p = Path(images_path)
    name = p.name.replace("images", "labels") if "images" in p.name else p.stem + "-labels" + p.suffix
    return p.with_name(name)


def save_dataset(images, labels, images_path) -> tuple[Path, Path]:
    images_path = Path(images_path)
    lp = labels_path(images_path)
    if len(images) != len(labels):
        raise IdxFormatError("image and label counts differ")
    save_idx(np.asarray(images, dtype=np.float32), images_path)
    save_idx(np.asarray(labels, dtype=np.uint8), lp)
    return images_path, lp


def load_dataset(images_path):
    """Images plus labels when a companion label file exists (else ``None``)."""
    images = load_idx(images_path).astype(np.float32)
    lp = labels_path(images_path)
    labels = None
    if lp.exists() and lp != Path(images_path):
        labels = load_idx(lp)
        if labels.ndim != 1 or len(labels) != len(images):
            raise IdxFormatError(f"label file holds {labels.shape} for {len(images)} images")
    return images, labels
