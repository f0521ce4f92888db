"""On-disk formats: network manifests, weight files and EEG recordings.

Binary weight file (little endian)::

    magic      4s   b"MNDR"
    version    u16  1
    n_layers   u16
    per layer:
        kind        u8   0 conv, 1 fc, 2 lstm, 3 softmax
        activation  u8   0 none, 1 relu, 2 tanh, 3 sigmoid
        dims        u32 x d   conv: IN INR INC K SW OU OUTR OUTC
                              fc/softmax: IN OUT;  lstm: IN HIDDEN STEPS
        dtype       u8   0 float32, 1 logcode
        payload_len u32
        payload
        crc32       u32  over every byte of the record before it

float32 payload: weights then biases, row-major float32.
logcode payload: ``bits u8, weight_offset i8``, one byte per weight code,
then float32 biases. A code byte holds the sign in bit 7 (1 = negative) and
``exponent - window_min`` in the low ``max(bits, 2)`` bits; the all-ones field
is reserved for zero.

The JSON manifest carries the same topology and, optionally, the same
payloads base64-encoded under ``"weight"`` / ``"bias"``.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .eegnet import (Activation, ElectrodeMap, LayerKind, LayerSpec, Model, NetSpec, N_ELECTRODES,
                     mesh_map_frames)
from .ulq import LogTensor, QuantSpec

MAGIC = b"MNDR"
VERSION = 1
MAX_CODE_BITS = 7

KIND_IDS = {LayerKind.CONV: 0, LayerKind.FC: 1, LayerKind.LSTM: 2, LayerKind.SOFTMAX: 3}
ACT_IDS = {Activation.NONE: 0, Activation.RELU: 1, Activation.TANH: 2, Activation.SIGMOID: 3}
DTYPE_IDS = {"float32": 0, "logcode": 1}
_KINDS = {v: k for k, v in KIND_IDS.items()}
_ACTS = {v: k for k, v in ACT_IDS.items()}
_DTYPES = {v: k for k, v in DTYPE_IDS.items()}
N_DIMS = {LayerKind.CONV: 8, LayerKind.FC: 2, LayerKind.LSTM: 3, LayerKind.SOFTMAX: 2}


class FormatError(ValueError):
    """Malformed, truncated or inconsistent input file."""


# -- log code bytes ---------------------------------------------------------------

def _field_bits(bits: int) -> int:
    return max(bits, 2)


def encode_codes(t: LogTensor, bits: int, offset: int) -> bytes:
    if not 1 <= bits <= MAX_CODE_BITS:
        raise FormatError(f"log code width {bits} not storable (1..{MAX_CODE_BITS})")
    lo, hi = QuantSpec.weight(bits, offset).window
    nz = ~t.is_zero
    if nz.any() and (t.exponent[nz].min() < lo or t.exponent[nz].max() > hi):
        raise FormatError(f"exponents outside the window [{lo}, {hi}]")
    zero_field = (1 << _field_bits(bits)) - 1
    fld = np.where(t.is_zero, zero_field, t.exponent.astype(np.int64) - lo)
    sign = np.where(t.sign < 0, 0x80, 0)
    return (sign | fld).astype(np.uint8).tobytes()


def decode_codes(buf: bytes, shape, bits: int, offset: int) -> LogTensor:
    lo, _ = QuantSpec.weight(bits, offset).window
    fb = _field_bits(bits)
    raw = np.frombuffer(buf, dtype=np.uint8).astype(np.int64)
    fld = raw & ((1 << fb) - 1)
    zero = fld == (1 << fb) - 1
    if (~zero & (fld > bits)).any():
        raise FormatError("log code field outside the exponent window")
    sign = np.where(raw & 0x80, -1, 1)
    return LogTensor(shape, zero, sign, fld + lo, QuantSpec.weight(bits, offset))


# -- layer headers ----------------------------------------------------------------

def layer_dims(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind is LayerKind.CONV:
        return (layer.in_channels, layer.in_height, layer.in_width, layer.kernel, layer.stride,
                layer.out_channels, layer.out_height, layer.out_width)
    if layer.kind is LayerKind.LSTM:
        return (layer.input_dim, layer.hidden_dim, layer.time_steps)
    return (layer.in_dim, layer.out_dim)


def layer_from_dims(kind: LayerKind, act: Activation, dims, name: str) -> LayerSpec:
    if kind is LayerKind.CONV:
        inc, inr, inw, k, sw, ou, outr, outc = dims
        layer = LayerSpec(kind, name, act, in_channels=inc, in_height=inr, in_width=inw, kernel=k, stride=sw,
                          out_channels=ou)
        if (layer.out_height, layer.out_width) != (outr, outc):
            raise FormatError(f"{name}: stored output size {outr}x{outc} inconsistent with same padding "
                              f"({layer.out_height}x{layer.out_width})")
        return layer
    if kind is LayerKind.LSTM:
        return LayerSpec(kind, name, act, input_dim=dims[0], hidden_dim=dims[1], time_steps=dims[2])
    return LayerSpec(kind, name, act, in_dim=dims[0], out_dim=dims[1])


def _default_names(kinds) -> list[str]:
    counts: dict[LayerKind, int] = {}
    names = []
    for k in kinds:
        counts[k] = counts.get(k, 0) + 1
        names.append(k.value if k is LayerKind.SOFTMAX else f"{k.value}{counts[k]}")
    return names


# -- binary weight file --------------------------------------------------------------

def _payload(model: Model, i: int) -> tuple[int, bytes]:
    w, b = model.weights[i], np.asarray(model.biases[i], dtype="<f4")
    if isinstance(w, LogTensor):
        bits, off = model.weight_bits, model.weight_offset
        if bits is None or off is None:
            raise FormatError("log-quantized model lacks weight_bits / weight_offset")
        head = struct.pack("<Bb", bits, off)
        return DTYPE_IDS["logcode"], head + encode_codes(w, bits, off) + b.tobytes()
    return DTYPE_IDS["float32"], np.asarray(w, dtype="<f4").tobytes() + b.tobytes()


def weights_to_bytes(model: Model) -> bytes:
    out = bytearray(MAGIC + struct.pack("<HH", VERSION, len(model.net.layers)))
    for i, layer in enumerate(model.net.layers):
        dims = layer_dims(layer)
        dtype, payload = _payload(model, i)
        rec = struct.pack("<BB", KIND_IDS[layer.kind], ACT_IDS[layer.activation])
        rec += struct.pack(f"<{len(dims)}I", *dims)
        rec += struct.pack("<BI", dtype, len(payload)) + payload
        out += rec + struct.pack("<I", zlib.crc32(rec))
    return bytes(out)


def save_weights(model: Model, path) -> None:
    Path(path).write_bytes(weights_to_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: missing {what} "
                              f"(needs {n} bytes at offset {self.pos}, {len(self.buf) - self.pos} left)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _split_payload(layer: LayerSpec, dtype: str, payload: bytes, where: str):
    nw = int(np.prod(layer.weight_shape))
    nb = int(np.prod(layer.bias_shape))
    if dtype == "float32":
        want = 4 * (nw + nb)
        if len(payload) != want:
            raise FormatError(f"{where}: float32 payload is {len(payload)} bytes, shape needs {want}")
        w = np.frombuffer(payload[:4 * nw], dtype="<f4").reshape(layer.weight_shape).astype(np.float32)
        b = np.frombuffer(payload[4 * nw:], dtype="<f4").astype(np.float32)
        return w, b, None, None
    want = 2 + nw + 4 * nb
    if len(payload) != want:
        raise FormatError(f"{where}: logcode payload is {len(payload)} bytes, shape needs {want}")
    bits, off = struct.unpack("<Bb", payload[:2])
    if not 1 <= bits <= MAX_CODE_BITS:
        raise FormatError(f"{where}: unsupported log code width {bits}")
    w = decode_codes(payload[2:2 + nw], layer.weight_shape, bits, off)
    b = np.frombuffer(payload[2 + nw:], dtype="<f4").astype(np.float32)
    return w, b, bits, off


def weights_from_bytes(buf: bytes, net: NetSpec | None = None) -> Model:
    """Parse a weight file. With ``net`` given, the stored topology must match it."""
    r = _Reader(buf)
    magic = r.take(4, "header magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, n = r.unpack("<HH", "header version/layer count")
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    layers, weights, biases, quant = [], [], [], set()
    kinds = []
    records = []
    for i in range(n):
        start = r.pos
        kid, aid = r.unpack("<BB", f"layer {i} kind")
        if kid not in _KINDS:
            raise FormatError(f"layer {i}: unknown layer kind {kid}")
        if aid not in _ACTS:
            raise FormatError(f"layer {i}: unknown activation {aid}")
        kind = _KINDS[kid]
        dims = r.unpack(f"<{N_DIMS[kind]}I", f"layer {i} dims")
        did, plen = r.unpack("<BI", f"layer {i} dtype")
        if did not in _DTYPES:
            raise FormatError(f"layer {i}: unknown dtype {did}")
        payload = r.take(plen, f"layer {i} payload")
        (crc,) = r.unpack("<I", f"layer {i} checksum")
        if zlib.crc32(buf[start:r.pos - 4]) != crc:
            raise FormatError(f"layer {i}: checksum mismatch")
        kinds.append(kind)
        records.append((kind, _ACTS[aid], dims, _DTYPES[did], payload))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after layer {n - 1}")
    names = [l.name for l in net.layers] if net is not None else _default_names(kinds)
    if net is not None and len(net.layers) != n:
        raise FormatError(f"weight file has {n} layers, network manifest has {len(net.layers)}")
    for i, (kind, act, dims, dtype, payload) in enumerate(records):
        where = f"layer {i} ({names[i]})"
        try:
            layer = layer_from_dims(kind, act, dims, names[i])
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        if net is not None:
            ref = net.layers[i]
            if (ref.kind, layer_dims(ref), ref.activation) != (layer.kind, layer_dims(layer), layer.activation):
                raise FormatError(f"{where}: weight file layer does not match the network manifest")
            layer = ref
        w, b, bits, off = _split_payload(layer, dtype, payload, where)
        if bits is not None:
            quant.add((bits, off))
        layers.append(layer)
        weights.append(w)
        biases.append(b)
    if len(quant) > 1:
        raise FormatError("layers use different log code formats")
    bits, off = quant.pop() if quant else (None, None)
    if net is None:
        try:
            net = NetSpec("weights", layers)
        except ValueError as exc:
            raise FormatError(f"inconsistent topology: {exc}") from None
    return Model(net, weights, biases, bits, off)


def load_weights(path, net: NetSpec | None = None) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc.strerror}") from None
    return weights_from_bytes(buf, net)


# -- JSON manifest --------------------------------------------------------------

_LAYER_FIELDS = {
    LayerKind.CONV: ("in_channels", "in_height", "in_width", "kernel", "stride", "out_channels"),
    LayerKind.FC: ("in_dim", "out_dim"),
    LayerKind.SOFTMAX: ("in_dim", "out_dim"),
    LayerKind.LSTM: ("input_dim", "hidden_dim", "time_steps"),
}


def net_to_dict(net: NetSpec) -> dict:
    layers = []
    for l in net.layers:
        d = {"name": l.name, "kind": l.kind.value, "activation": l.activation.value}
        d.update({f: getattr(l, f) for f in _LAYER_FIELDS[l.kind]})
        if l.kind is LayerKind.CONV:
            d["out_height"], d["out_width"] = l.out_height, l.out_width
        layers.append(d)
    return {"format": "mindreading-net", "version": VERSION, "name": net.name,
            "per_step_conv": net.per_step_conv, "layers": layers}


def net_from_dict(d: dict) -> NetSpec:
    if d.get("format") != "mindreading-net":
        raise FormatError("not a network manifest (missing \"format\": \"mindreading-net\")")
    layers = []
    for i, ld in enumerate(d.get("layers", [])):
        try:
            kind = LayerKind(ld["kind"])
            kw = {f: int(ld[f]) for f in _LAYER_FIELDS[kind]}
            layer = LayerSpec(kind, ld.get("name", ""), ld.get("activation", "none"), **kw)
        except KeyError as exc:
            raise FormatError(f"layer {i}: missing field {exc}") from None
        except ValueError as exc:
            raise FormatError(f"layer {i}: {exc}") from None
        if kind is LayerKind.CONV and "out_height" in ld:
            if (int(ld["out_height"]), int(ld["out_width"])) != (layer.out_height, layer.out_width):
                raise FormatError(f"layer {i} ({layer.name}): output size inconsistent with same padding")
        layers.append(layer)
    if not layers:
        raise FormatError("network manifest has no layers")
    try:
        return NetSpec(d.get("name", "net"), layers, bool(d.get("per_step_conv", False)))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def model_to_dict(model: Model) -> dict:
    d = net_to_dict(model.net)
    for i, ld in enumerate(d["layers"]):
        dtype, payload = _payload(model, i)
        ld["dtype"] = _DTYPES[dtype]
        ld["payload"] = base64.b64encode(payload).decode("ascii")
        ld["crc32"] = zlib.crc32(payload)
    return d


def model_from_dict(d: dict) -> Model:
    net = net_from_dict(d)
    weights, biases, quant = [], [], set()
    for i, (layer, ld) in enumerate(zip(net.layers, d["layers"])):
        where = f"layer {i} ({layer.name})"
        if "payload" not in ld:
            raise FormatError(f"{where}: manifest has no weights")
        payload = base64.b64decode(ld["payload"])
        if "crc32" in ld and zlib.crc32(payload) != ld["crc32"]:
            raise FormatError(f"{where}: checksum mismatch")
        if ld.get("dtype") not in DTYPE_IDS:
            raise FormatError(f"{where}: unknown dtype {ld.get('dtype')!r}")
        w, b, bits, off = _split_payload(layer, ld["dtype"], payload, where)
        if bits is not None:
            quant.add((bits, off))
        weights.append(w)
        biases.append(b)
    if len(quant) > 1:
        raise FormatError("layers use different log code formats")
    bits, off = quant.pop() if quant else (None, None)
    return Model(net, weights, biases, bits, off)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None


def load_net(path) -> NetSpec:
    """Read a topology from a JSON manifest or from a binary weight file."""
    p = Path(path)
    try:
        head = p.open("rb").read(4)
    except OSError as exc:
        raise FormatError(f"cannot read network file {path}: {exc.strerror}") from None
    if head == MAGIC:
        return load_weights(p).net
    return net_from_dict(_read_json(p))


def load_model(net_path, weights_path=None) -> Model:
    """Load a model from a manifest plus weight file, or a self-contained file."""
    if weights_path is None:
        p = Path(net_path)
        try:
            head = p.open("rb").read(4)
        except OSError as exc:
            raise FormatError(f"cannot read {net_path}: {exc.strerror}") from None
        if head == MAGIC:
            return load_weights(p)
        return model_from_dict(_read_json(p))
    return load_weights(weights_path, load_net(net_path))


def default_net_manifest() -> NetSpec:
    text = resources.files("mindreading.data").joinpath("eegnet.json").read_text()
    return net_from_dict(json.loads(text))


def dumps_json(obj) -> str:
    """Deterministic JSON used for every machine-readable output."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# -- EEG recordings ---------------------------------------------------------------

@dataclass
class EegRecording:
    timestamps: np.ndarray
    samples: np.ndarray   # (T, 64) raw values
    scale: float
    frames: np.ndarray    # (T, 10, 11) normalized mesh frames


def parse_eeg_csv(text: str, emap: ElectrodeMap) -> EegRecording:
    """One row per sample: ``timestamp`` then 64 channel values; a header row is required.

    An optional leading ``# scale=<float>`` line fixes the max-abs scale used
    to normalize samples into (-1, 1); otherwise it is taken from the data.
    """
    lines = text.splitlines()
    scale = None
    while lines and lines[0].startswith("#"):
        key, _, val = lines.pop(0)[1:].strip().partition("=")
        if key.strip() == "scale":
            try:
                scale = float(val)
            except ValueError:
                raise FormatError(f"bad scale value {val!r}") from None
            if not (math.isfinite(scale) and scale > 0):
                raise FormatError(f"scale must be positive and finite, got {scale}")
    rows = list(csv.reader(lines))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "timestamp":
        raise FormatError("EEG CSV must start with a header row beginning with 'timestamp'")
    if len(rows[0]) != N_ELECTRODES + 1:
        raise FormatError(f"EEG CSV header has {len(rows[0]) - 1} channel columns, expected {N_ELECTRODES}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != N_ELECTRODES + 1:
            raise FormatError(f"EEG CSV row {lineno}: {len(row)} fields, expected {N_ELECTRODES + 1}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise FormatError(f"EEG CSV row {lineno}: non-numeric value") from None
    if not data:
        raise FormatError("EEG CSV has no samples")
    arr = np.array(data)
    if not np.isfinite(arr).all():
        raise FormatError("EEG CSV contains non-finite values")
    ts, samples = arr[:, 0], arr[:, 1:]
    if scale is None:
        scale = float(np.abs(samples).max()) or 1.0
    frames = mesh_map_frames(samples / scale, emap)
    return EegRecording(ts, samples, scale, frames)


def load_eeg(path, emap: ElectrodeMap) -> EegRecording:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read EEG file {path}: {exc.strerror}") from None
    return parse_eeg_csv(text, emap)


def eeg_to_csv(samples, timestamps=None, scale: float | None = None) -> str:
    samples = np.asarray(samples, dtype=np.float64)
    if timestamps is None:
        timestamps = np.arange(samples.shape[0]) / 128.0
    buf = io.StringIO()
    if scale is not None:
        buf.write(f"# scale={scale!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp"] + [f"ch{i}" for i in range(1, N_ELECTRODES + 1)])
    for t, row in zip(timestamps, samples):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return buf.getvalue()
