"""EEG-NET topology and the full-precision reference forward pass.

Layer order for the default network::

    Conv1 -> Conv2 -> Conv3 -> FC1 -> LSTM1 -> LSTM2 -> FC2 -> Softmax

Layers before the first LSTM run on single frames ("frame stage"); the LSTM
stack runs over ``time_steps`` steps and everything after it consumes the
final hidden state. By default the frame stage runs once per inference and
its output vector is fed to the LSTM at every step. With
``NetSpec.per_step_conv`` set, the frame stage runs once per input frame
instead (one frame per LSTM step).
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

MESH_ROWS = 10
MESH_COLS = 11
N_ELECTRODES = 64


class ShapeError(ValueError):
    pass


class LayerKind(str, enum.Enum):
    CONV = "conv"
    FC = "fc"
    LSTM = "lstm"
    SOFTMAX = "softmax"


class Activation(str, enum.Enum):
    NONE = "none"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    name: str = ""
    activation: Activation = Activation.NONE
    # conv
    in_channels: int = 0
    in_height: int = 0
    in_width: int = 0
    kernel: int = 0
    stride: int = 1
    out_channels: int = 0
    # fc / softmax affine
    in_dim: int = 0
    out_dim: int = 0
    # lstm
    input_dim: int = 0
    hidden_dim: int = 0
    time_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if not self.name:
            object.__setattr__(self, "name", self.kind.value)
        self.validate()

    def validate(self) -> None:
        k = self.kind
        if k is LayerKind.CONV:
            dims = (self.in_channels, self.in_height, self.in_width, self.kernel, self.stride, self.out_channels)
            if min(dims) < 1:
                raise ShapeError(f"{self.name}: conv dims must be positive, got {dims}")
            if self.kernel % 2 == 0:
                raise ShapeError(f"{self.name}: same padding needs an odd kernel, got {self.kernel}")
        elif k in (LayerKind.FC, LayerKind.SOFTMAX):
            if self.in_dim < 1 or self.out_dim < 1:
                raise ShapeError(f"{self.name}: in_dim/out_dim must be positive")
        elif k is LayerKind.LSTM:
            if self.input_dim < 1 or self.hidden_dim < 1:
                raise ShapeError(f"{self.name}: input_dim/hidden_dim must be positive")
            if self.time_steps < 1:
                raise ShapeError(f"{self.name}: time_steps must be >= 1")

    # same padding: out = ceil(in / stride)
    @property
    def out_height(self) -> int:
        return -(-self.in_height // self.stride) if self.kind is LayerKind.CONV else 1

    @property
    def out_width(self) -> int:
        return -(-self.in_width // self.stride) if self.kind is LayerKind.CONV else 1

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def input_size(self) -> int:
        if self.kind is LayerKind.CONV:
            return self.in_channels * self.in_height * self.in_width
        if self.kind is LayerKind.LSTM:
            return self.input_dim
        return self.in_dim

    @property
    def output_size(self) -> int:
        if self.kind is LayerKind.CONV:
            return self.out_channels * self.out_height * self.out_width
        if self.kind is LayerKind.LSTM:
            return self.hidden_dim
        return self.out_dim

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            return (self.out_channels, self.out_height, self.out_width)
        return (self.output_size,)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind is LayerKind.LSTM:
            # gate rows stacked as [input, forget, candidate, output]
            return (4 * self.hidden_dim, self.input_dim + self.hidden_dim)
        return (self.out_dim, self.in_dim)

    @property
    def bias_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            return (self.out_channels,)
        if self.kind is LayerKind.LSTM:
            return (4 * self.hidden_dim,)
        return (self.out_dim,)


@dataclass(frozen=True)
class NetSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    per_step_conv: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        seen_lstm = False
        for i, (prev, cur) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            where = f"layer {i} ({cur.name})"
            if cur.kind is LayerKind.CONV:
                if prev.kind is not LayerKind.CONV:
                    raise ShapeError(f"{where}: conv must follow the input or another conv")
                if (cur.in_channels, cur.in_height, cur.in_width) != prev.output_shape:
                    raise ShapeError(f"{where}: expects input {(cur.in_channels, cur.in_height, cur.in_width)}, "
                                     f"previous layer gives {prev.output_shape}")
            elif cur.input_size != prev.output_size:
                raise ShapeError(f"{where}: expects {cur.input_size} inputs, previous layer gives {prev.output_size}")
            if prev.kind is LayerKind.SOFTMAX:
                raise ShapeError(f"{where}: softmax must be the last layer")
        for layer in self.layers:
            if layer.kind is LayerKind.LSTM:
                seen_lstm = True
            elif seen_lstm and layer.kind is LayerKind.CONV:
                raise ShapeError(f"{layer.name}: conv after an LSTM is not supported")
        lstms = [l for l in self.layers if l.kind is LayerKind.LSTM]
        if len({l.time_steps for l in lstms}) > 1:
            raise ShapeError("all LSTM layers must share the same time_steps")

    @property
    def time_steps(self) -> int:
        for layer in self.layers:
            if layer.kind is LayerKind.LSTM:
                return layer.time_steps
        return 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        first = self.layers[0]
        if first.kind is LayerKind.CONV:
            return (first.in_channels, first.in_height, first.in_width)
        return (first.input_size,)

    def stages(self) -> tuple[list[int], list[int], list[int]]:
        """Split layer indices into (frame stage, LSTM stack, head)."""
        idx = [i for i, l in enumerate(self.layers) if l.kind is LayerKind.LSTM]
        if not idx:
            return list(range(len(self.layers))), [], []
        first, last = idx[0], idx[-1]
        return list(range(first)), list(range(first, last + 1)), list(range(last + 1, len(self.layers)))


def eegnet_spec(conv_channels: Sequence[int] = (32, 64, 128), height: int = MESH_ROWS, width: int = MESH_COLS,
                kernel: int = 3, fc1: int = 1024, lstm_hidden: int = 64, lstm_layers: int = 2,
                time_steps: int = 30, fc2: int = 1024, classes: int = 6,
                per_step_conv: bool = False, name: str = "EEG-NET",
                conv_activation=Activation.RELU, fc_activation=Activation.TANH) -> NetSpec:
    """Build an EEG-NET-shaped network. Defaults reproduce the published topology."""
    layers = []
    cin = 1
    for i, cout in enumerate(conv_channels, start=1):
        layers.append(LayerSpec(LayerKind.CONV, f"conv{i}", conv_activation, in_channels=cin, in_height=height,
                                in_width=width, kernel=kernel, stride=1, out_channels=cout))
        cin = cout
    layers.append(LayerSpec(LayerKind.FC, "fc1", fc_activation, in_dim=cin * height * width, out_dim=fc1))
    d = fc1
    for i in range(1, lstm_layers + 1):
        layers.append(LayerSpec(LayerKind.LSTM, f"lstm{i}", Activation.TANH, input_dim=d, hidden_dim=lstm_hidden,
                                time_steps=time_steps))
        d = lstm_hidden
    layers.append(LayerSpec(LayerKind.FC, "fc2", fc_activation, in_dim=d, out_dim=fc2))
    layers.append(LayerSpec(LayerKind.SOFTMAX, "softmax", Activation.NONE, in_dim=fc2, out_dim=classes))
    return NetSpec(name, layers, per_step_conv)


@dataclass
class Model:
    """A network plus its parameters.

    ``weights[i]`` is a float32 array or, for a log-quantized model, a
    :class:`mindreading.ulq.LogTensor`. Biases always stay float32.
    """

    net: NetSpec
    weights: list
    biases: list[np.ndarray]
    weight_bits: int | None = None
    weight_offset: int | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.net.layers) or len(self.biases) != len(self.net.layers):
            raise ShapeError(f"expected parameters for {len(self.net.layers)} layers")
        for i, layer in enumerate(self.net.layers):
            w, b = self.weights[i], self.biases[i]
            if tuple(w.shape) != layer.weight_shape:
                raise ShapeError(f"layer {i} ({layer.name}): weight shape {tuple(w.shape)} != {layer.weight_shape}")
            if tuple(np.shape(b)) != layer.bias_shape:
                raise ShapeError(f"layer {i} ({layer.name}): bias shape {np.shape(b)} != {layer.bias_shape}")

    @property
    def dtype(self) -> str:
        from .ulq import LogTensor
        kinds = {"logcode" if isinstance(w, LogTensor) else "float32" for w in self.weights}
        if len(kinds) != 1:
            raise ShapeError("model mixes float and log-quantized layers")
        return kinds.pop()

    @classmethod
    def zeros(cls, net: NetSpec) -> "Model":
        return cls(net, [np.zeros(l.weight_shape, np.float32) for l in net.layers],
                   [np.zeros(l.bias_shape, np.float32) for l in net.layers])

    @classmethod
    def random(cls, net: NetSpec, rng: np.random.Generator | int = 0, scale: float = 1.0) -> "Model":
        """Uniform fan-in-scaled init; only used for tests and demos."""
        rng = np.random.default_rng(rng)
        ws, bs = [], []
        for layer in net.layers:
            fan_in = int(np.prod(layer.weight_shape[1:]))
            lim = scale / np.sqrt(fan_in)
            ws.append(rng.uniform(-lim, lim, layer.weight_shape).astype(np.float32))
            bs.append(rng.uniform(-lim, lim, layer.bias_shape).astype(np.float32))
        return cls(net, ws, bs)


# -- electrode placement ---------------------------------------------------------

@dataclass(frozen=True)
class ElectrodeMap:
    """64 (channel, row, col) triples placing electrodes on the 10x11 mesh; channels are 1-based."""

    entries: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(tuple(int(v) for v in e) for e in self.entries))
        self.validate()

    def validate(self) -> None:
        if len(self.entries) != N_ELECTRODES:
            raise ValueError(f"electrode map needs {N_ELECTRODES} entries, got {len(self.entries)}")
        chans = [c for c, _, _ in self.entries]
        cells = [(r, c) for _, r, c in self.entries]
        if sorted(chans) != list(range(1, N_ELECTRODES + 1)):
            raise ValueError("electrode map channels must be exactly 1..64")
        if len(set(cells)) != len(cells):
            raise ValueError("electrode map assigns two channels to the same cell")
        for ch, r, c in self.entries:
            if not (0 <= r < MESH_ROWS and 0 <= c < MESH_COLS):
                raise ValueError(f"channel {ch}: cell ({r}, {c}) outside the {MESH_ROWS}x{MESH_COLS} mesh")

    @classmethod
    def from_csv(cls, text: str) -> "ElectrodeMap":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["channel", "row", "col"]:
            raise ValueError("electrode map CSV must start with the header 'channel,row,col'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise ValueError(f"electrode map line {lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append(tuple(int(v) for v in row))
            except ValueError:
                raise ValueError(f"electrode map line {lineno}: non-integer field in {row}") from None
        return cls(tuple(rows))

    @classmethod
    def load(cls, path) -> "ElectrodeMap":
        with open(path, newline="") as fh:
            return cls.from_csv(fh.read())

    @classmethod
    def default(cls) -> "ElectrodeMap":
        text = resources.files("mindreading.data").joinpath("electrode_map.csv").read_text()
        return cls.from_csv(text)

    def to_csv(self) -> str:
        lines = ["channel,row,col"] + [f"{c},{r},{k}" for c, r, k in sorted(self.entries)]
        return "\n".join(lines) + "\n"

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        e = np.array(self.entries, dtype=np.int64)
        return e[:, 0] - 1, e[:, 1], e[:, 2]


def mesh_map(raw, emap: ElectrodeMap) -> np.ndarray:
    """Place one 64-channel sample on the 10x11 mesh; unmapped cells are 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (N_ELECTRODES,):
        raise ShapeError(f"expected a vector of {N_ELECTRODES} channel values, got shape {raw.shape}")
    return mesh_map_frames(raw[None, :], emap)[0]


def mesh_map_frames(samples, emap: ElectrodeMap) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != N_ELECTRODES:
        raise ShapeError(f"expected samples of shape (T, {N_ELECTRODES}), got {samples.shape}")
    ch, r, c = emap.index_arrays()
    out = np.zeros((samples.shape[0], MESH_ROWS, MESH_COLS))
    out[:, r, c] = samples[:, ch]
    return out


# -- float reference layers ---------------------------------------------------------

def activate(x, act: Activation):
    act = Activation(act)
    if act is Activation.RELU:
        return np.maximum(x, 0.0)
    if act is Activation.TANH:
        return np.tanh(x)
    if act is Activation.SIGMOID:
        return sigmoid(x)
    return x


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-x))


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(C, H, W) -> (out_h*out_w, C*K*K); columns ordered (channel, ky, kx)."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    ci, ky, kx = np.meshgrid(np.arange(c), np.arange(kernel), np.arange(kernel), indexing="ij")
    oy, ox = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    rows = oy.reshape(-1, 1) + ky.reshape(1, -1)
    cols = ox.reshape(-1, 1) + kx.reshape(1, -1)
    return xp[ci.reshape(1, -1), rows, cols]


def conv_forward(x, weight, bias, layer: LayerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_channels, layer.in_height, layer.in_width):
        raise ShapeError(f"{layer.name}: input shape {x.shape} != "
                         f"{(layer.in_channels, layer.in_height, layer.in_width)}")
    cols = im2col(x, layer.kernel, layer.stride, layer.padding)
    w = np.asarray(weight, dtype=np.float64).reshape(layer.out_channels, -1)
    out = w @ cols.T + np.asarray(bias, dtype=np.float64)[:, None]
    return activate(out.reshape(layer.output_shape), layer.activation)


def fc_forward(x, weight, bias, layer: LayerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != layer.in_dim:
        raise ShapeError(f"{layer.name}: expected {layer.in_dim} inputs, got {x.size}")
    out = np.asarray(weight, dtype=np.float64) @ x + np.asarray(bias, dtype=np.float64)
    return activate(out, layer.activation)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(np.zeros(hidden), np.zeros(hidden))


def lstm_cell_step(state: LstmState, x, weight, bias, layer: LayerSpec) -> tuple[LstmState, np.ndarray]:
    n = layer.hidden_dim
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != layer.input_dim or state.h.shape != (n,) or state.c.shape != (n,):
        raise ShapeError(f"{layer.name}: expected x[{layer.input_dim}] and state[{n}]")
    z = np.asarray(weight, dtype=np.float64) @ np.concatenate([x, state.h]) + np.asarray(bias, dtype=np.float64)
    i_g, f_g, j_g, o_g = sigmoid(z[:n]), sigmoid(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sigmoid(z[3 * n:])
    c = f_g * state.c + i_g * j_g
    h = o_g * np.tanh(c)
    return LstmState(h, c), h


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def _frames_for(net: NetSpec, frames) -> list[np.ndarray]:
    """Pick the frames the frame stage consumes, as arrays of ``net.input_shape``."""
    frames = np.asarray(frames, dtype=np.float64)
    shape = net.input_shape
    if frames.shape == shape or (len(shape) == 3 and shape[0] == 1 and frames.shape == shape[1:]):
        frames = frames.reshape((1,) + shape)
    elif len(shape) == 3 and shape[0] == 1 and frames.shape[1:] == shape[1:]:
        frames = frames.reshape((frames.shape[0],) + shape)
    elif frames.shape[1:] != shape:
        raise ShapeError(f"input frames of shape {frames.shape} do not match network input {shape}")
    if frames.shape[0] == 0:
        raise ShapeError("no input frames")
    t = net.time_steps
    if not net.per_step_conv or not net.stages()[1]:
        return [frames[-1]]
    if frames.shape[0] < t:
        raise ShapeError(f"per-step frame stage needs {t} frames, got {frames.shape[0]}")
    return list(frames[-t:])


def run_layer_float(layer: LayerSpec, x, weight, bias):
    if layer.kind is LayerKind.CONV:
        return conv_forward(x, weight, bias, layer)
    if layer.kind is LayerKind.FC:
        return fc_forward(x, weight, bias, layer)
    if layer.kind is LayerKind.SOFTMAX:
        return softmax(fc_forward(x, weight, bias, replace(layer, activation=Activation.NONE)))
    raise ShapeError(f"{layer.name}: LSTM layers are run by the sequence stage")


def infer_float(model: Model, frames) -> np.ndarray:
    """Full-precision forward pass; returns class probabilities."""
    net = model.net
    if model.dtype != "float32":
        raise TypeError("infer_float needs float weights")
    front, lstm, head = net.stages()
    params = [(np.asarray(w, np.float64), np.asarray(b, np.float64)) for w, b in zip(model.weights, model.biases)]

    seq = []
    for frame in _frames_for(net, frames):
        x = frame
        for i in front:
            try:
                x = run_layer_float(net.layers[i], x, *params[i])
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}") from None
        seq.append(np.asarray(x).reshape(-1))
    if lstm:
        if len(seq) == 1:
            seq = seq * net.time_steps
        for i in lstm:
            layer = net.layers[i]
            state = LstmState.zeros(layer.hidden_dim)
            out = []
            for x in seq:
                state, h = lstm_cell_step(state, x, *params[i], layer)
                out.append(h)
            seq = out
    x = seq[-1]
    for i in head:
        x = run_layer_float(net.layers[i], x, *params[i])
    if net.layers[-1].kind is not LayerKind.SOFTMAX:
        x = softmax(x)
    return np.asarray(x)
