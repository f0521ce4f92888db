"""``mindreading`` command-line entry point.

Exit codes: 0 success, 2 bad input, 3 output could not be written,
4 mode does not match the weight type.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, archsim, formats, logmac, photonic
from .eegnet import ElectrodeMap, ShapeError, infer_float
from .ulq import InvalidInputError, InvalidRangeError, QuantSpec, log2_round_array

log = logging.getLogger("mindreading")

EXIT_OK, EXIT_INPUT, EXIT_OUTPUT, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INPUT):
        super().__init__(msg)
        self.code = code


_INPUT_ERRORS = (formats.FormatError, archsim.ConfigError, ShapeError, InvalidInputError, InvalidRangeError)


# -- output plumbing -------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: str | None, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    if path is None:
        sys.stdout.write(data.decode())
        return
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_OUTPUT) from None


def _write_manifest(args, inputs: list, outputs: list) -> None:
    """Provenance sidecar. Holds the only non-deterministic field (timestamp)."""
    if not outputs:
        return
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "settings": settings,
        "config_hash": hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest(),
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    _write(f"{outputs[0]}.manifest.json", formats.dumps_json(manifest))


def _load_model(args):
    if args.net is None:
        raise CliError("--net is required")
    try:
        return formats.load_model(args.net, args.weights)
    except _INPUT_ERRORS as exc:
        raise CliError(str(exc)) from None


def _qconfig(args) -> logmac.QuantConfig:
    return logmac.QuantConfig(args.bits, args.alpha, args.beta, args.theta)


# -- commands --------------------------------------------------------------------

def _layer_summary(layer, w, spec: QuantSpec, q) -> dict:
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    nz = flat != 0
    lo, hi = spec.window
    e = log2_round_array(np.abs(flat[nz]))
    clipped = int(((e < lo) | (e > hi)).sum())
    hist = {}
    if (~nz).any():
        hist["zero"] = int((~nz).sum())
    vals, counts = np.unique(q.exponent[~q.is_zero], return_counts=True)
    hist.update({str(v): int(c) for v, c in zip(vals.tolist(), counts.tolist())})
    return {"name": layer.name, "weights": int(flat.size), "clipped": clipped,
            "clip_rate": clipped / flat.size if flat.size else 0.0, "histogram": hist}


def cmd_quantize(args) -> int:
    if args.out is None:
        raise CliError("--out is required for quantize")
    model = _load_model(args)
    if model.dtype != "float32":
        raise CliError("quantize expects float32 weights; the model is already log-coded", EXIT_MISMATCH)
    qm = logmac.quantize_model(model, args.bits, args.alpha)
    spec = QuantSpec.weight(args.bits, args.alpha)
    layers = [_layer_summary(l, w, spec, q) for l, w, q in zip(model.net.layers, model.weights, qm.weights)]
    summary = {"bits": args.bits, "weight_window": list(spec.window),
               "activation_offsets": {"alpha": args.alpha, "beta": args.beta, "theta": args.theta},
               "layers": layers}
    _write(args.out, formats.weights_to_bytes(qm))
    summary_path = f"{args.out}.summary.json"
    _write(summary_path, formats.dumps_json(summary))
    _write_manifest(args, [args.net, args.weights], [args.out, summary_path])
    log.info("quantized %d layers to %d-bit codes", len(layers), args.bits)
    return EXIT_OK


def _load_map(path) -> ElectrodeMap:
    if path is None:
        return ElectrodeMap.default()
    if not Path(path).is_file():
        raise CliError(f"--map: electrode map {path} not found")
    try:
        return ElectrodeMap.load(path)
    except (ValueError, OSError) as exc:
        raise CliError(f"--map: {exc}") from None


def cmd_infer(args) -> int:
    if args.input is None:
        raise CliError("--input is required for infer")
    if not Path(args.input).is_file():
        raise CliError(f"--input: EEG file {args.input} not found")
    emap = _load_map(args.map)
    model = _load_model(args)
    try:
        rec = formats.load_eeg(args.input, emap)
    except _INPUT_ERRORS as exc:
        raise CliError(f"--input: {exc}") from None
    want = "float32" if args.mode == "float" else "logcode"
    if model.dtype != want:
        raise CliError(f"mode {args.mode} needs {want} weights, got {model.dtype}", EXIT_MISMATCH)
    result = {"mode": args.mode, "frames": int(rec.frames.shape[0])}
    try:
        if args.mode == "float":
            scores = infer_float(model, rec.frames)
        else:
            scores, stats = logmac.infer_quant(model, rec.frames, args.mode, _qconfig(args))
            result["quant_stats"] = stats.to_dict()
            result["quant_config"] = {"bits": args.bits, "alpha": args.alpha, "beta": args.beta,
                                      "theta": args.theta}
    except _INPUT_ERRORS as exc:
        raise CliError(str(exc)) from None
    result["scores"] = [float(s) for s in scores]
    result["label"] = int(np.argmax(scores))
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "label"] + [f"class{i}" for i in range(len(scores))])
        w.writerow([args.mode, result["label"]] + [repr(s) for s in result["scores"]])
        text = buf.getvalue()
    elif args.format == "text":
        text = f"label {result['label']}\n" + "".join(f"class{i}  {s:.6f}\n" for i, s in enumerate(result["scores"]))
    else:
        text = formats.dumps_json(result)
    _write(args.out, text)
    _write_manifest(args, [args.net, args.weights, args.input, args.map], [args.out] if args.out else [])
    return EXIT_OK


def _sim_net(args):
    if args.net is None:
        return formats.default_net_manifest()
    try:
        return formats.load_net(args.net)
    except _INPUT_ERRORS as exc:
        raise CliError(f"--net: {exc}") from None


def _config(ref: str):
    try:
        return archsim.load_config(ref)
    except archsim.ConfigError as exc:
        raise CliError(str(exc)) from None


def _render(obj, fmt: str) -> str:
    if fmt == "csv":
        return obj.to_csv()
    if fmt == "text":
        return obj.to_text()
    return obj.to_json()


def cmd_simulate(args) -> int:
    refs = args.config or []
    if len(refs) != 1:
        raise CliError("simulate takes exactly one --config")
    cfg = _config(refs[0])
    if args.dump_config:
        text = archsim.config_to_ini(cfg) if args.dump_config == "ini" else formats.dumps_json(cfg.to_dict())
        _write(args.out, text)
        return EXIT_OK
    net = _sim_net(args)
    try:
        report = archsim.simulate(cfg, net)
    except archsim.ConfigError as exc:
        raise CliError(str(exc)) from None
    _write(args.out, _render(report, args.format))
    _write_manifest(args, [refs[0], args.net], [args.out] if args.out else [])
    return EXIT_OK


def cmd_compare(args) -> int:
    refs = list(args.configs) + list(args.config or [])
    if len(refs) < 2:
        raise CliError("compare needs at least two configs")
    cfgs = [_config(r) for r in refs]
    net = _sim_net(args)
    try:
        table = archsim.compare(cfgs, net)
    except archsim.ConfigError as exc:
        raise CliError(str(exc)) from None
    _write(args.out, _render(table, args.format))
    _write_manifest(args, refs + [args.net], [args.out] if args.out else [])
    return EXIT_OK


def cmd_gates(args) -> int:
    res = photonic.selftest(args.n_random, args.seed)
    failed = sum(f for _, f in res.values())
    if args.format == "json":
        text = formats.dumps_json({k: {"cases": c, "failures": f} for k, (c, f) in res.items()})
    else:
        text = "".join(f"{k:<18} {c:>7} cases  {f} failures\n" for k, (c, f) in res.items())
    _write(args.out, text)
    return EXIT_OK if failed == 0 else 1


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mindreading", description="Log-quantized EEG inference and accelerator model")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=("json", "csv", "text")):
        sp.add_argument("--out", help="output path (stdout if omitted)")
        sp.add_argument("--format", choices=fmt, default="json")

    def quant(sp):
        sp.add_argument("--bits", type=int, default=4)
        sp.add_argument("--alpha", type=int, default=0, help="tanh and weight window offset")
        sp.add_argument("--beta", type=int, default=1, help="sigmoid window offset")
        sp.add_argument("--theta", type=int, default=0, help="relu window offset")

    sp = sub.add_parser("quantize", help="quantize float weights to log codes")
    sp.add_argument("--net", help="network manifest (JSON) or self-contained weight file")
    sp.add_argument("--weights", help="float32 weight file")
    quant(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("infer", help="classify an EEG recording")
    sp.add_argument("--net")
    sp.add_argument("--weights")
    sp.add_argument("--input", help="EEG CSV file")
    sp.add_argument("--map", help="electrode map CSV (built-in 10x11 layout if omitted)")
    sp.add_argument("--mode", choices=("float", "p2qnn", "ulq"), default="float")
    quant(sp)
    common(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="throughput/power/area of one configuration")
    sp.add_argument("--config", action="append", help="built-in name or .json/.ini file")
    sp.add_argument("--net", help="network manifest (built-in EEG-NET if omitted)")
    sp.add_argument("--dump-config", nargs="?", const="json", choices=("json", "ini"),
                    help="write the resolved config instead of simulating")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="compare configurations against the first one")
    sp.add_argument("configs", nargs="*")
    sp.add_argument("--config", action="append")
    sp.add_argument("--net")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gates", help="run the optical gate self-test")
    sp.add_argument("--n-random", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)
    common(sp, ("text", "json"))
    sp.set_defaults(func=cmd_gates, format="text")
    return p


def main(argv=None) -> int:
    level = os.environ.get("MINDREADING_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mindreading {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except _INPUT_ERRORS as exc:
        print(f"mindreading {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
