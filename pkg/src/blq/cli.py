"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .archs import ARCHS, builtin_arch
from .cost import count_direct, count_lut, table_footprint
from .data import make_fixture_dataset, random_network
from .forward import FloatNetwork, NumericError, dequantized_network, quantize_network
from .lut import LutConfig, build_lut_network
from .modelio import IdxFormatError, ModelFormatError, load_dataset, load_model, save_dataset, save_model
from .network import ShapeError
from .reports import write_report

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _region(text: str):
    if text.lower() in ("global", "dq", "layer"):
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"region must be a positive integer or 'global', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("region must be >= 1")
    return value


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _region_list(text: str):
    return [_region(t) for t in text.split(",") if t]


def _weight_bits(text: str):
    if text.lower() == "same":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'same', got {text!r}") from None


def _positive(text: str):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write a seeded random float model")
    s.add_argument("--arch", required=True, choices=sorted(ARCHS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("dataset", help="write a seeded fixture dataset (IDX images + labels)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--arch", default="fixture-cnn", choices=sorted(ARCHS))
    s.add_argument("--out", required=True, help="image file path; labels go next to it")

    s = sub.add_parser("quantize", help="quantize a float model")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--bits", type=int, required=True, help="weight bits")
    s.add_argument("--region", type=_region, default=None, help="region length or 'global'")
    s.add_argument("--mode", choices=("w", "wa"), default="w")
    s.add_argument("--activation-bits", type=int, default=None)
    s.add_argument("--activation-region", type=_region, default=None,
                   help="defaults to --region")
    s.add_argument("--lut", action="store_true")
    s.add_argument("--group", type=_positive, default=3)
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", help="run a model over a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="compare a model against a baseline")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("opcount", help="analytic multiply/add counts")
    s.add_argument("--arch", required=True, choices=sorted(ARCHS))
    s.add_argument("--lut", action="store_true")
    s.add_argument("--bits", type=int, default=2)
    s.add_argument("--group", type=_positive, default=3)
    s.add_argument("--region", type=_positive, default=9)
    s.add_argument("--scope", choices=("conv", "all"), default="conv")
    s.add_argument("--out")

    s = sub.add_parser("sweep", help="agreement over bit widths and region sizes")
    s.add_argument("--model")
    s.add_argument("--input")
    s.add_argument("--bits-list", type=_int_list, default=[8, 6, 4, 2])
    s.add_argument("--region-list", type=_region_list, default=[None, 363, 64, 27, 9])
    s.add_argument("--weight-bits", type=_weight_bits, default=8,
                   help="weight precision in wa mode; 'same' ties it to the swept bits")
    s.add_argument("--mode", choices=("w", "wa"), default="wa")
    s.add_argument("--error-curve", action="store_true")
    s.add_argument("--x-min", type=float, default=0.0)
    s.add_argument("--x-max", type=float, default=1.0)
    s.add_argument("--bits", type=int, default=2)
    s.add_argument("--samples", type=_positive, default=1001)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="per-image wall-clock of every path")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--repeat", type=_positive, default=10)
    s.add_argument("--limit", type=_positive, default=None, help="use the first N images")
    s.add_argument("--bits", type=int, default=2, help="activation bits when tables are built here")
    s.add_argument("--group", type=_positive, default=3)
    s.add_argument("--region", type=_positive, default=9)
    s.add_argument("--out", required=True)
    return p


def _load(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise DataError(f"no such model file: {path}") from None


def _dataset(path, limit=None):
    try:
        images, labels = load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"no such dataset file: {path}") from None
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    return images, labels


def _cmd_init(a):
    net = random_network(builtin_arch(a.arch), a.seed)
    save_model(net, a.out)
    print(f"wrote {a.arch} float model ({net.spec.parameter_count()} parameters) to {a.out}")


def _cmd_dataset(a):
    if a.count < 1:
        raise UsageError("--count must be >= 1")
    images, labels = make_fixture_dataset(a.seed, a.count, builtin_arch(a.arch).input_shape)
    ip, lp = save_dataset(images, labels, a.out)
    print(f"wrote {a.count} samples to {ip} and {lp}")


def _cmd_quantize(a):
    model = _load(a.inp)
    if not isinstance(model, FloatNetwork):
        model = dequantized_network(getattr(model, "base", model))
    mode = "wa" if a.lut else a.mode
    act_region = a.region if a.activation_region is None else a.activation_region
    qnet = quantize_network(model, a.bits, a.region, mode, a.activation_bits, act_region)
    out = qnet
    if a.lut:
        if a.region is None:
            raise UsageError("--lut needs an integer --region")
        cfg = LutConfig(qnet.activation_bits, a.group, a.region)
        out = build_lut_network(qnet, cfg)
    save_model(out, a.out)
    print(f"wrote {experiments.path_name(out)} model to {a.out}")


def _cmd_infer(a):
    model = _load(a.model)
    images, labels = _dataset(a.input)
    out = experiments.run(model, images)
    flat = out.reshape(len(out), -1)
    pred = flat.argmax(axis=1)
    rows = [{"sample": i, "prediction": int(pred[i]), "score": float(flat[i, pred[i]])} for i in range(len(pred))]
    results = {"path": experiments.path_name(model), "samples": len(pred),
               "predictions": [int(v) for v in pred]}
    if labels is not None:
        results["accuracy"] = experiments.accuracy(out, labels)
    write_report(a.out, "infer", results, rows,
                 {"sample": "index", "prediction": "class", "score": "output"})


def _cmd_eval(a):
    model, base = _load(a.model), _load(a.baseline)
    if model.spec.input_shape != base.spec.input_shape or model.spec.output_shape != base.spec.output_shape:
        raise DataError("model and baseline have different input/output shapes")
    images, labels = _dataset(a.input)
    res = experiments.evaluate(model, base, images, labels)
    rows = res["layers"]
    write_report(a.out, "eval", res, rows, {
        "weight_layer": "index", "mean_l2": "output", "max_abs": "output", "mean_rel_l2": "ratio",
    })
    print(f"agreement {res['agreement']:.6f} over {res['samples']} samples")


def _cmd_opcount(a):
    spec = builtin_arch(a.arch)
    direct = count_direct(spec, a.scope)
    counts = [direct]
    results = {"arch": a.arch, "direct": direct.to_dict()}
    if a.lut:
        cfg = LutConfig(a.bits, a.group, a.region)
        lut = count_lut(spec, cfg, a.scope)
        counts.append(lut)
        results["lut"] = lut.to_dict()
        results["table_bytes"] = table_footprint(spec, cfg, a.scope)
    rows = []
    for c in counts:
        m = c.millions()
        rows.append({
            "scheme": c.convention.mode, "convention": c.convention.describe(),
            "multiplies": c.multiplies, "adds": c.adds, "lookups": c.lookups,
            "multiplies_m": m["multiplies"], "adds_m": m["adds"],
        })
        print(f"{a.arch} {c.convention.mode}: {m['multiplies']} M multiplies, {m['adds']} M adds"
              f"  [{c.convention.describe()}]")
    if a.out:
        write_report(a.out, "opcount", results, rows, {
            "scheme": "label", "convention": "label", "multiplies": "ops", "adds": "ops",
            "lookups": "ops", "multiplies_m": "Mops", "adds_m": "Mops",
        })


def _cmd_sweep(a):
    if a.error_curve:
        rows = experiments.error_curve(a.x_min, a.x_max, a.bits, a.samples)
        peak = max(abs(r["error"]) for r in rows)
        results = {"x_min": a.x_min, "x_max": a.x_max, "bits": a.bits, "samples": a.samples,
                   "step": (a.x_max - a.x_min) / ((1 << a.bits) - 1), "peak_abs_error": peak}
        write_report(a.out, "sweep --error-curve", results, rows,
                     {"x": "value", "code": "code", "reconstruction": "value", "error": "value"})
        return
    if not a.model or not a.input:
        raise UsageError("sweep needs --model and --input (or --error-curve)")
    model = _load(a.model)
    if not isinstance(model, FloatNetwork):
        raise DataError("sweep needs a float model")
    images, _ = _dataset(a.input)
    rows = experiments.sweep(model, images, a.bits_list, a.region_list, a.weight_bits, a.mode)
    write_report(a.out, "sweep", {"mode": a.mode, "samples": int(len(images)), "rows": rows}, rows, {
        "bits": "bits", "weight_bits": "bits", "region": "elements",
        "agreement": "fraction", "logit_l2": "output",
    })


def _cmd_bench(a):
    model = _load(a.model)
    images, _ = _dataset(a.input, a.limit)
    cfg = LutConfig(a.bits, a.group, a.region)
    res = experiments.bench_paths(model, images, a.repeat, cfg)
    rows = [{"path": k, "per_image_s": v["per_image_s"], "cv": v["cv"], "spread": v["spread"],
             "speedup_vs_fp32": v["speedup_vs_fp32"]} for k, v in res.items()]
    write_report(a.out, "bench", {"repeat": a.repeat, "images": int(len(images)), "paths": res}, rows, {
        "path": "label", "per_image_s": "s", "cv": "ratio", "spread": "ratio", "speedup_vs_fp32": "ratio",
    })
    for r in rows:
        print(f"{r['path']}: {r['per_image_s'] * 1e3:.3f} ms/image")


COMMANDS = {
    "init": _cmd_init, "dataset": _cmd_dataset, "quantize": _cmd_quantize, "infer": _cmd_infer,
    "eval": _cmd_eval, "opcount": _cmd_opcount, "sweep": _cmd_sweep, "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"blq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFormatError, IdxFormatError, ShapeError, OSError) as exc:
        print(f"blq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"blq: usage error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
