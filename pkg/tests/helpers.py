"""Random tiny networks and a driver that runs :class:`oracles.Oracle` over them."""

from __future__ import annotations

import numpy as np

from mindreading.eegnet import Activation, LayerKind, LayerSpec, Model, NetSpec
from mindreading.logmac import QuantConfig, quantize_model
from oracles import Oracle, softmax

ACTS = [Activation.TANH, Activation.SIGMOID, Activation.RELU, Activation.NONE]


def random_tiny_model(rng: np.random.Generator):
    """A small conv/FC/LSTM/softmax net with log-coded weights and a random quantizer config."""
    h, w = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    k = int(rng.choice([1, 3]))
    c1, c2 = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    f1, hid, t = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    f2, classes = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    layers = [
        LayerSpec(LayerKind.CONV, "c1", Activation.RELU, in_channels=1, in_height=h, in_width=w, kernel=k,
                  out_channels=c1),
        LayerSpec(LayerKind.CONV, "c2", ACTS[rng.integers(4)], in_channels=c1, in_height=h, in_width=w, kernel=k,
                  out_channels=c2),
        LayerSpec(LayerKind.FC, "f1", ACTS[rng.integers(4)], in_dim=c2 * h * w, out_dim=f1),
        LayerSpec(LayerKind.LSTM, "l1", Activation.TANH, input_dim=f1, hidden_dim=hid, time_steps=t),
    ]
    d = hid
    if rng.random() < 0.5:
        hid2 = int(rng.integers(1, 4))
        layers.append(LayerSpec(LayerKind.LSTM, "l2", Activation.TANH, input_dim=hid, hidden_dim=hid2, time_steps=t))
        d = hid2
    layers += [
        LayerSpec(LayerKind.FC, "f2", ACTS[rng.integers(4)], in_dim=d, out_dim=f2),
        LayerSpec(LayerKind.SOFTMAX, "sm", Activation.NONE, in_dim=f2, out_dim=classes),
    ]
    net = NetSpec("tiny", layers, per_step_conv=bool(rng.random() < 0.5))
    scale = float(rng.choice([0.5, 2.0, 8.0]))
    ws = [rng.normal(0, scale, l.weight_shape).astype(np.float32) for l in layers]
    # occasional exact zeros and large biases that push the accumulator into saturation
    for a in ws:
        a[rng.random(a.shape) < 0.1] = 0
    bs = [(rng.normal(0, float(rng.choice([0.5, 4.0, 40.0])), l.bias_shape)).astype(np.float32) for l in layers]
    bits = int(rng.integers(2, 6))
    model = quantize_model(Model(net, ws, bs), bits, int(rng.integers(-1, 2)))
    qcfg = QuantConfig(int(rng.integers(2, 6)), int(rng.integers(-1, 2)), int(rng.integers(0, 3)),
                       int(rng.integers(-2, 1)))
    n_frames = t + int(rng.integers(0, 3))
    frames = rng.uniform(-1.2, 1.2, (n_frames, h, w))
    return model, qcfg, frames


def _codes(t, shape):
    z = t.is_zero.reshape(shape)
    s = t.sign.reshape(shape)
    e = t.exponent.reshape(shape)
    return {idx: (bool(z[idx]), int(s[idx]), int(e[idx])) for idx in np.ndindex(*shape)}


def oracle_infer(model: Model, frames, qcfg: QuantConfig, log_acts: bool = True):
    """Returns (raw logits, class probabilities)."""
    o = Oracle(qcfg.bits, qcfg.alpha, qcfg.beta, qcfg.theta, log_acts)
    net = model.net
    w = [_codes(t, l.weight_shape) for t, l in zip(model.weights, net.layers)]
    b = [[float(v) for v in np.ravel(bb)] for bb in model.biases]
    lstm_idx = [i for i, l in enumerate(net.layers) if l.kind is LayerKind.LSTM]
    first_lstm = lstm_idx[0]
    t_steps = net.layers[first_lstm].time_steps
    frames = np.asarray(frames, dtype=np.float64)
    chosen = list(frames[-t_steps:]) if net.per_step_conv else [frames[-1]]

    seq = []
    for fr in chosen:
        x = {(0, y, xx): o.ingest(float(fr[y, xx])) for y in range(fr.shape[0]) for xx in range(fr.shape[1])}
        for i in range(first_lstm):
            l = net.layers[i]
            if l.kind is LayerKind.CONV:
                x = o.conv(x, w[i], b[i], l.in_channels, l.in_height, l.in_width, l.out_channels, l.kernel,
                           l.activation.value)
            else:
                flat = [x[k] for k in sorted(x)] if isinstance(x, dict) else x
                x = o.fc(flat, w[i], b[i], l.out_dim, l.activation.value)
        seq.append(x)
    if len(seq) == 1:
        seq = seq * t_steps
    for i in lstm_idx:
        l = net.layers[i]
        h = [o.zero_act()] * l.hidden_dim
        c = [0] * l.hidden_dim
        out = []
        for x in seq:
            h, c = o.lstm_step(x, h, c, w[i], b[i], l.hidden_dim)
            out.append(h)
        seq = out
    x = seq[-1]
    for i in range(lstm_idx[-1] + 1, len(net.layers)):
        l = net.layers[i]
        if l.kind is LayerKind.SOFTMAX:
            logits = o.dense_acc(x, w[i], b[i], l.out_dim)
            return logits, softmax([v / 1024 for v in logits])
        x = o.fc(x, w[i], b[i], l.out_dim, l.activation.value)
    raise AssertionError("network has no softmax layer")
