"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""

import json
import time

import numpy as np
import pytest

from conftest import naive_conv, record, small_spec
from blq.archs import builtin_arch
from blq.cli import main
from blq.cost import count_direct, count_lut
from blq.data import make_fixture_dataset, random_network
from blq.experiments import agreement, error_curve, run, sweep
from blq.forward import FloatNetwork, LayerWeights, forward_dq, forward_fp32, forward_lq, quantize_network
from blq.lut import LutConfig, build_lut_network, forward_lut
from blq.modelio import decode_model, encode_model, save_dataset, save_model
from blq.network import Convolution, NetworkSpec
from blq.quantizer import dequantize_array, quantize_array, quantize_global, quantize_local, step


@pytest.fixture(scope="module")
def pinned():
    spec = builtin_arch("fixture-cnn")
    net = random_network(spec, 0)
    x, _ = make_fixture_dataset(0, 10_000)
    return net, x, forward_fp32(net, x)


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def test_criterion_1_op_counts():
    t = time.perf_counter()
    alex, vgg = builtin_arch("alexnet-conv"), builtin_arch("vgg16-conv")
    cfg = LutConfig(2, 3, 9)
    ad, al = count_direct(alex).millions(), count_lut(alex, cfg).millions()
    vd, vl = count_direct(vgg).millions(), count_lut(vgg, cfg).millions()
    direct_a, direct_v = count_direct(alex), count_direct(vgg)
    elapsed = time.perf_counter() - t
    checks = {
        "alexnet direct within 0.1%": abs(direct_a.multiplies - 666e6) <= 666e3 and direct_a.adds == direct_a.multiplies,
        "alexnet lut 74/222": (al["multiplies"], al["adds"]) == (74, 222),
        "vgg direct within 0.1%": abs(direct_v.multiplies - 15347e6) <= 15347e3 and direct_v.adds == direct_v.multiplies,
        "vgg lut 1705/5116": (vl["multiplies"], vl["adds"]) == (1705, 5116),
        "runtime < 1 s": elapsed < 1.0,
    }
    detail = (f"alexnet {ad['multiplies']}/{ad['adds']} M direct, {al['multiplies']}/{al['adds']} M lut; "
              f"vgg {vd['multiplies']}/{vd['adds']} M direct, {vl['multiplies']}/{vl['adds']} M lut; {elapsed:.3f} s")
    assert record(1, checks, detail), detail


def test_criterion_2_lut_bit_exact():
    rng = np.random.default_rng(2024)
    configs = [LutConfig(2, 3, 9), LutConfig(1, 4, 8), LutConfig(4, 2, 6), LutConfig(2, 2, 4),
               LutConfig(1, 1, 3), LutConfig(4, 4, 4), LutConfig(2, 1, 7)]
    t = time.perf_counter()
    mismatches = 0
    nets = 1000
    for i in range(nets):
        spec = small_spec(rng, f"n{i}")
        cfg = configs[i % len(configs)]
        net = random_network(spec, i)
        q = quantize_network(net, int(rng.integers(1, 9)), cfg.region_size, "wa", cfg.activation_bits, cfg.region_size)
        lut = build_lut_network(q, cfg)
        x = rng.normal(size=(int(rng.integers(1, 4)), *spec.input_shape)) * rng.uniform(0.1, 10)
        if i % 50 == 0:
            x[0] = 0.0
        a, ta = forward_lut(lut, x, trace=True)
        b, tb = forward_lq(q, x, trace=True)
        same = a.tobytes() == b.tobytes() and all(u.tobytes() == v.tobytes() for u, v in zip(ta, tb))
        mismatches += not same
    elapsed = time.perf_counter() - t
    checks = {"zero mismatches": mismatches == 0, "runtime < 120 s": elapsed < 120}
    detail = f"{nets} nets, {mismatches} mismatches, {elapsed:.1f} s"
    assert record(2, checks, detail), detail


def test_criterion_3_error_bound():
    rng = np.random.default_rng(3)
    n = 10**6
    bits = rng.integers(1, 9, n)
    lo = rng.uniform(-100, 100, n) * 10.0 ** rng.integers(-3, 3, n)
    width = rng.exponential(1.0, n) * 10.0 ** rng.integers(-4, 3, n)
    width[rng.random(n) < 0.01] = 0.0
    hi = lo + width
    steps = np.array([step(a, b, int(k)) for a, b, k in zip(lo, hi, bits)])
    x = lo + rng.random(n) * (hi - lo)
    x = np.minimum(x, hi)
    codes = np.concatenate([quantize_array(x[bits == k], lo[bits == k], steps[bits == k], int(k)) for k in range(1, 9)])
    order = np.concatenate([np.flatnonzero(bits == k) for k in range(1, 9)])
    rec = np.empty(n)
    rec[order] = dequantize_array(codes, lo[order], steps[order])
    err = np.abs(x - rec)
    bound_ok = bool(np.all(err <= steps / 2 + 1e-12 * np.maximum(1.0, np.abs(x))))

    peaks = []
    for b in range(1, 9):
        levels = (1 << b) - 1
        rows = error_curve(-1.0, 1.0, b, samples=levels * 200 + 1)
        peak = max(abs(r["error"]) for r in rows)
        peaks.append(abs(peak - step(-1.0, 1.0, b) / 2))
    checks = {"bound on 1e6 triples": bound_ok, "sawtooth peak within 1e-9": max(peaks) <= 1e-9}
    detail = f"worst excess {float((err - steps / 2).max()):.3e}, worst peak deviation {max(peaks):.3e}"
    assert record(3, checks, detail), detail


def test_criterion_4_dominance_and_refinement():
    rng = np.random.default_rng(4)
    slices = 10**4
    dominance_bad = bound_bad = realized_bad = 0
    for _ in range(slices):
        n = 2 ** int(rng.integers(1, 8))
        bits = int(rng.integers(1, 9))
        v = rng.normal(size=n) * rng.uniform(0.01, 100) + rng.uniform(-10, 10)
        g = quantize_global(v, bits)
        prev_err, prev_bound = np.inf, np.full(n, np.inf)
        r = n
        dom = bnd = real = True
        while r >= 1:
            q = quantize_local(v, bits, r)
            if r < n and np.any(q.steps > g.steps[0]):
                dom = False
            bound = q.steps[q.partition.region_index()] / 2
            err = float(np.abs(q.dequantize() - v).max())
            bnd &= bool(np.all(bound <= prev_bound))
            real &= err <= prev_err
            prev_err, prev_bound = err, bound
            r //= 2
        dominance_bad += not dom
        bound_bad += not bnd
        realized_bad += not real
    checks = {
        "local steps <= global step": dominance_bad == 0,
        "per-element error bound non-increasing": bound_bad == 0,
        "realized max-abs error non-increasing": realized_bad == 0,
    }
    detail = (f"{slices} slices: {dominance_bad} dominance violations, {bound_bad} bound violations, "
              f"{realized_bad} slices whose realized max-abs error rose after halving")
    assert record(4, checks, detail), detail


def test_criterion_5_path_collapse_and_oracle():
    rng = np.random.default_rng(5)
    collapse_bad, singleton_worst = 0, 0.0
    for i in range(50):
        spec = small_spec(rng, f"c{i}")
        net = random_network(spec, 100 + i)
        x = rng.normal(size=(3, *spec.input_shape))
        n = max(p.weight.size for p in net.params)
        bits = int(rng.integers(1, 9))
        for mode in ("w", "wa"):
            dq = quantize_network(net, bits, None, mode, bits, None)
            lq = quantize_network(net, bits, n, mode, bits, None)
            collapse_bad += forward_lq(lq, x).tobytes() != forward_dq(dq, x).tobytes()
        one = quantize_network(net, bits, 1)
        singleton_worst = max(singleton_worst, rel_err(forward_lq(one, x), forward_fp32(net, x)))

    oracle_worst = 0.0
    for i in range(200):
        c, h = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        k = int(rng.integers(1, min(h + 2, 6)))
        pad = int(rng.integers(0, 3)) if k > h else int(rng.integers(0, 2))
        if k > h + 2 * pad:
            pad = (k - h + 1) // 2
        groups = 2 if c % 2 == 0 and rng.random() < 0.3 else 1
        o = int(rng.integers(1, 5)) * groups
        stride = int(rng.integers(1, 4))
        conv = Convolution(o, k, k, stride=stride, padding=pad, groups=groups)
        spec = NetworkSpec(f"o{i}", (c, h, h), (conv,))
        w = (rng.normal(size=conv.weight_shape((c, h, h)))).astype(np.float32)
        b = rng.normal(size=o).astype(np.float32)
        net = FloatNetwork(spec, (LayerWeights(w, b),))
        x = rng.normal(size=(c, h, h))
        oracle_worst = max(oracle_worst, rel_err(forward_fp32(net, x), naive_conv(x, w, b, stride, pad, groups)))
    checks = {
        "lq(R=N) bitwise dq": collapse_bad == 0,
        "lq(R=1) within 1e-5": singleton_worst <= 1e-5,
        "oracle within 1e-5 on 200 shapes": oracle_worst <= 1e-5,
    }
    detail = f"{collapse_bad} collapse mismatches, singleton rel err {singleton_worst:.2e}, oracle rel err {oracle_worst:.2e}"
    assert record(5, checks, detail), detail


def test_criterion_6_directional_agreement(pinned):
    net, x, ref = pinned
    t = time.perf_counter()
    q8 = quantize_network(net, 8, 9, "wa", 8, 9)
    a8 = agreement(forward_lq(q8, x), ref)
    lq2 = agreement(forward_lq(quantize_network(net, 8, 9, "wa", 2, 9), x), ref)
    dq2 = agreement(forward_dq(quantize_network(net, 8, None, "wa", 2, None), x), ref)
    elapsed = time.perf_counter() - t
    order_ok = lq2 > dq2 or (lq2 == dq2 and lq2 >= 0.999)
    checks = {"8-bit LQ >= 0.99": a8 >= 0.99, "2-bit LQ(9) over DQ": order_ok, "runtime < 300 s": elapsed < 300}
    detail = f"8-bit LQ {a8:.4f}; 2-bit LQ(9) {lq2:.4f} vs DQ {dq2:.4f}; {elapsed:.1f} s"
    assert record(6, checks, detail), detail


def test_criterion_7_region_sweep(pinned):
    net, x, _ = pinned
    rows = sweep(net, x, [2], [363, 64, 27, 9], weight_bits=8, mode="wa")
    ag = [r["agreement"] for r in rows]
    checks = {"non-decreasing as region shrinks": all(b >= a for a, b in zip(ag, ag[1:]))}
    detail = "agreement " + ", ".join(f"R={r['region']}: {r['agreement']:.4f}" for r in rows)
    assert record(7, checks, detail), detail


def test_criterion_8_bench(tmp_path):
    net = random_network(builtin_arch("fixture-cnn"), 0)
    save_model(net, tmp_path / "m.blqm")
    x, y = make_fixture_dataset(8, 256)
    save_dataset(x, y, tmp_path / "d-images.idx")
    code = main(["bench", "--model", str(tmp_path / "m.blqm"), "--input", str(tmp_path / "d-images.idx"),
                 "--repeat", "10", "--out", str(tmp_path / "b")])
    res = json.loads((tmp_path / "b.json").read_text())["results"]["paths"]
    paths = ("fp32", "quantized", "lut")
    timed = code == 0 and all(p in res and res[p]["per_image_s"] > 0 and len(res[p]["runs_s"]) == 10 for p in paths)
    cv = max(res[p]["cv"] for p in paths)
    spread = max(res[p]["spread"] for p in paths)
    checks = {"all paths timed over 10 runs": timed, "run-to-run cv < 10%": cv < 0.10}
    detail = (f"max cv {cv:.3f}, max (max-min)/median {spread:.3f}; per-image ms "
              + ", ".join(f"{p} {res[p]['per_image_s'] * 1e3:.3f}" for p in paths))
    assert record(8, checks, detail), detail


def test_criterion_9_serialization():
    rng = np.random.default_rng(9)
    bad_bytes = bad_out = 0
    for i in range(100):
        spec = small_spec(rng, f"s{i}")
        net = random_network(spec, 900 + i)
        kind = i % 4
        bits = int(rng.integers(1, 9))
        if kind == 0:
            model = net
        elif kind == 1:
            model = quantize_network(net, bits, None if rng.random() < 0.3 else int(rng.integers(1, 20)))
        elif kind == 2:
            r = int(rng.integers(1, 20))
            model = quantize_network(net, bits, r, "wa", int(rng.integers(1, 9)), r)
        else:
            cfg = LutConfig(int(rng.choice([1, 2, 4])), 2, 6)
            model = build_lut_network(quantize_network(net, bits, 6, "wa", cfg.activation_bits, 6), cfg)
        data = encode_model(model)
        back = decode_model(data)
        bad_bytes += encode_model(back) != data
        x = rng.normal(size=(2, *spec.input_shape))
        bad_out += run(back, x).tobytes() != run(model, x).tobytes()
    checks = {"byte-identical": bad_bytes == 0, "outputs bitwise preserved": bad_out == 0}
    detail = f"100 models, {bad_bytes} byte mismatches, {bad_out} output mismatches"
    assert record(9, checks, detail), detail
