"""Agreement, error, sweep and timing measurements behind the CLI reports."""

from __future__ import annotations

import gc
import time

import numpy as np

from .forward import (
    FloatNetwork,
    QuantizedNetwork,
    dequantized_network,
    forward_dq,
    forward_fp32,
    forward_lq,
    quantize_network,
)
from .lut import LutConfig, LutNetwork, build_lut_network, forward_lut
from .quantizer import QuantParams, dequantize_value, quant_error, quantize_value
from .quantizer import step as quant_step


def path_name(model) -> str:
    if isinstance(model, LutNetwork):
        return "lut"
    if isinstance(model, QuantizedNetwork):
        return "dq" if model.is_global else "lq"
    if isinstance(model, FloatNetwork):
        return "fp32"
    raise TypeError(f"not a model: {type(model).__name__}")


def run(model, x, trace: bool = False):
    """Run whichever forward path ``model`` encodes."""
    name = path_name(model)
    if name == "lut":
        return forward_lut(model, x, trace)
    if name == "dq":
        return forward_dq(model, x, trace)
    if name == "lq":
        return forward_lq(model, x, trace)
    return forward_fp32(model, x, trace)


def agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of samples whose top-1 class matches."""
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    return float(np.mean(a.argmax(axis=1) == b.argmax(axis=1)))


def accuracy(out: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(out).reshape(len(out), -1).argmax(axis=1) == labels))


def layer_errors(trace_a, trace_b) -> list[dict]:
    rows = []
    for i, (a, b) in enumerate(zip(trace_a, trace_b)):
        a = a.reshape(len(a), -1)
        b = b.reshape(len(b), -1)
        d = a - b
        l2 = np.sqrt((d * d).sum(axis=1))
        scale = np.sqrt(0.5 * ((a * a).sum(axis=1) + (b * b).sum(axis=1)))
        rel = np.divide(l2, scale, out=np.zeros_like(l2), where=scale > 0)
        rows.append({
            "weight_layer": i,
            "mean_l2": float(l2.mean()),
            "max_abs": float(np.abs(d).max()),
            "mean_rel_l2": float(rel.mean()),
        })
    return rows


def evaluate(model, baseline, x, labels=None) -> dict:
    out, tr = run(model, x, trace=True)
    ref, tr_ref = run(baseline, x, trace=True)
    res = {
        "samples": int(len(x)),
        "model_path": path_name(model),
        "baseline_path": path_name(baseline),
        "agreement": agreement(out, ref),
        "layers": layer_errors(tr, tr_ref),
    }
    if labels is not None:
        res["model_accuracy"] = accuracy(out, labels)
        res["baseline_accuracy"] = accuracy(ref, labels)
    return res


def _variants(net, bits, regions, weight_bits, mode):
    for r in regions:
        wb = bits if weight_bits is None else weight_bits
        if mode == "wa":
            yield r, quantize_network(net, wb, r, "wa", bits, r)
        else:
            yield r, quantize_network(net, bits, r, "w")


def sweep(net: FloatNetwork, x, bits_list, region_list, weight_bits: int | None = 8, mode: str = "wa") -> list[dict]:
    """Agreement with the float network for every (bits, region) pair.

    A region of ``None`` is layer-global quantization.  Integer regions are
    capped at each layer's reduction length.  In ``"wa"`` mode ``bits`` sets
    the activation precision and ``weight_bits`` the weights (``None``: same
    as ``bits``).
    """
    ref, tr_ref = forward_fp32(net, x, trace=True)
    rows = []
    for bits in bits_list:
        for r, q in _variants(net, bits, region_list, weight_bits, mode):
            out, tr = forward_lq(q, x, trace=True)
            errs = layer_errors(tr, tr_ref)
            rows.append({
                "bits": int(bits),
                "weight_bits": int(q.weight_bits),
                "region": "global" if r is None else int(r),
                "agreement": agreement(out, ref),
                "logit_l2": errs[-1]["mean_l2"],
            })
    return rows


def error_curve(x_min: float, x_max: float, bits: int, samples: int = 1001) -> list[dict]:
    """Quantize/reconstruct a dense grid over ``[x_min, x_max]``."""
    p = QuantParams(x_min, quant_step(x_min, x_max, bits))
    rows = []
    for x in np.linspace(x_min, x_max, samples):
        x = float(x)
        c = quantize_value(x, p, bits)
        rows.append({"x": x, "code": c, "reconstruction": dequantize_value(c, p), "error": quant_error(x, p, bits)})
    return rows


def _time(fn, x, repeat: int) -> list[float]:
    fn(x[:1])
    times = []
    # collector pauses are not part of the path being measured
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeat):
            t = time.perf_counter()
            fn(x)
            times.append((time.perf_counter() - t) / len(x))
    finally:
        if enabled:
            gc.enable()
    return times


def bench_paths(model, x, repeat: int, cfg: LutConfig | None = None, bits: int = 2, weight_bits: int = 8) -> dict:
    """Per-image wall-clock for the float, quantized and table-driven paths."""
    if isinstance(model, LutNetwork):
        lut, qnet = model, model.base
        fnet = dequantized_network(qnet)
    elif isinstance(model, QuantizedNetwork):
        qnet = model
        fnet = dequantized_network(qnet)
        cfg = cfg or LutConfig(activation_bits=bits)
        try:
            lut = build_lut_network(qnet, cfg)
        except ValueError:
            requant = quantize_network(fnet, qnet.weight_bits, cfg.region_size, "wa", cfg.activation_bits, cfg.region_size)
            lut = build_lut_network(requant, cfg)
    else:
        fnet = model
        cfg = cfg or LutConfig(activation_bits=bits)
        qnet = quantize_network(fnet, weight_bits, cfg.region_size, "wa", cfg.activation_bits, cfg.region_size)
        lut = build_lut_network(qnet, cfg)
    paths = {
        "fp32": lambda v: forward_fp32(fnet, v),
        "quantized": lambda v: forward_lq(qnet, v),
        "lut": lambda v: forward_lut(lut, v),
    }
    result = {}
    for name, fn in paths.items():
        t = _time(fn, x, repeat)
        med = float(np.median(t))
        result[name] = {
            "per_image_s": med,
            "min_s": float(min(t)),
            "max_s": float(max(t)),
            "spread": float((max(t) - min(t)) / med) if med > 0 else 0.0,
            "cv": float(np.std(t) / np.mean(t)) if np.mean(t) > 0 else 0.0,
            "runs_s": [float(v) for v in t],
        }
    base = result["fp32"]["per_image_s"]
    for name in result:
        result[name]["speedup_vs_fp32"] = base / result[name]["per_image_s"] if result[name]["per_image_s"] else 0.0
    return result
