"""Fully-connected network with exact input jets and parameter gradients.

Derivatives with respect to the inputs are carried forward layer by layer as
extra channels: for every direction s in (t, x, y) the first derivative, and
for x and y the second derivative. Parameter gradients of any objective that
depends on those channels are obtained by a reverse sweep over the same tape.

Inputs are scaled before the first layer (t/T, x/Lx, y/Ly) and the raw output
is mapped through a fixed affine ``shift + scale * out``; both are part of
:class:`MlpParams` so checkpoints are self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "tgnn-mlp"
CHECKPOINT_VERSION = 1

PAPER_LAYERS = (3, 50, 50, 50, 50, 50, 50, 50, 1)

# output channel layout of an order-2 tape
CHANNELS = ("value", "d_t", "d_x", "d_y", "d_xx", "d_yy")


def _tanh(a, full=True):
    z = np.tanh(a)
    d1 = 1.0 - z * z
    if not full:
        return z, d1
    d2 = -2.0 * z * d1
    d3 = -2.0 * d1 * d1 + 4.0 * z * z * d1
    return z, d1, d2, d3


def _sigmoid(a, full=True):
    z = 0.5 * (1.0 + np.tanh(0.5 * a))
    d1 = z * (1.0 - z)
    if not full:
        return z, d1
    d2 = d1 * (1.0 - 2.0 * z)
    d3 = d1 * (1.0 - 6.0 * z + 6.0 * z * z)
    return z, d1, d2, d3


def _sin(a, full=True):
    s, c = np.sin(a), np.cos(a)
    return (s, c, -s, -c) if full else (s, c)


def _identity(a, full=True):
    one = np.ones_like(a)
    zero = np.zeros_like(a)
    return (a, one, zero, zero) if full else (a, one)


ACTIVATIONS = {"tanh": _tanh, "sigmoid": _sigmoid, "sin": _sin, "identity": _identity}


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # weights[i] has shape (fan_in, fan_out)
    biases: list[np.ndarray]
    activation: str = "tanh"
    input_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    output_shift: float = 0.0
    output_scale: float = 1.0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of weight/bias arrays does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}")
        self.input_scale = tuple(float(s) for s in self.input_scale)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation, self.input_scale, self.output_shift, self.output_scale)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def zeros_like(self) -> "Gradients":
        return Gradients([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def scale_inputs(self, t, x, y) -> np.ndarray:
        st, sx, sy = self.input_scale
        return np.column_stack([np.asarray(t, float).ravel() / st,
                                np.asarray(x, float).ravel() / sx,
                                np.asarray(y, float).ravel() / sy])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])


def init_params(seed: int, layer_sizes=PAPER_LAYERS, activation: str = "tanh", **scaling) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(layer_sizes), weights, biases, activation, **scaling)


@dataclass
class NetJet:
    value: np.ndarray
    d_t: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray
    d_xx: np.ndarray
    d_yy: np.ndarray

    def to_physical(self, params: MlpParams) -> "NetJet":
        """Convert derivatives taken in scaled inputs to physical coordinates."""
        st, sx, sy = params.input_scale
        return NetJet(self.value, self.d_t / st, self.d_x / sx, self.d_y / sy,
                      self.d_xx / sx**2, self.d_yy / sy**2)


@dataclass
class Tape:
    """Per-layer activations kept for the reverse sweep.

    ``z[l]`` and ``pre[l]`` have shape (C, N, width): channel 0 the value,
    channels 1-3 first derivatives in (t, x, y), channels 4-5 second
    derivatives in (x, y). Order-0 tapes only carry channel 0.
    """

    order: int
    inputs: np.ndarray
    z: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    derivs: list[tuple] = field(default_factory=list)
    out: np.ndarray | None = None


def _forward(params: MlpParams, X: np.ndarray, order: int) -> Tape:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"expected {params.layer_sizes[0]} input columns, got {X.shape[1]}")
    act = ACTIVATIONS[params.activation]
    n = X.shape[0]
    tape = Tape(order=order, inputs=X)
    L = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == 0:
            a0 = X @ w + b
            if order == 0:
                a = a0[None]
            else:
                # d(input)/ds is the unit vector e_s; second derivatives of the input vanish
                a = np.empty((6, n, w.shape[1]))
                a[0] = a0
                a[1:4] = w[:3, None, :]
                a[4:] = 0.0
        else:
            z = tape.z[-1]
            c = z.shape[0]
            a = (z.reshape(c * n, -1) @ w).reshape(c, n, -1)
            a[0] += b
        if i == L - 1:
            tape.out = a
            break
        if order == 0:
            zz, d1 = act(a[0], full=False)
            tape.z.append(zz[None])
            tape.derivs.append((d1,))
            continue
        zz, d1, d2, d3 = act(a[0])
        out = np.empty_like(a)
        out[0] = zz
        out[1:4] = d1 * a[1:4]
        out[4:6] = d2 * a[2:4] ** 2 + d1 * a[4:6]
        tape.z.append(out)
        tape.pre.append(a)
        tape.derivs.append((d1, d2, d3))
    return tape


def forward_tape(params: MlpParams, X, order: int = 0) -> Tape:
    if order not in (0, 2):
        raise ValueError("order must be 0 (values) or 2 (full jet)")
    return _forward(params, X, order)


def tape_outputs(params: MlpParams, tape: Tape) -> dict[str, np.ndarray]:
    out = tape.out[:, :, 0]
    res = {"value": params.output_shift + params.output_scale * out[0]}
    if tape.order == 2:
        for k, ch in zip(CHANNELS[1:], range(1, 6)):
            res[k] = params.output_scale * out[ch]
    return res


def forward(params: MlpParams, X) -> np.ndarray:
    """Network output at scaled inputs ``X`` of shape (N, 3)."""
    return tape_outputs(params, _forward(params, X, 0))["value"]


def jet(params: MlpParams, X) -> NetJet:
    """Value, first derivatives and (x, y) second derivatives at scaled inputs."""
    return NetJet(**tape_outputs(params, _forward(params, X, 2)))


def predict(params: MlpParams, t, x, y) -> np.ndarray:
    """Network output at physical coordinates."""
    return forward(params, params.scale_inputs(t, x, y))


def backprop(params: MlpParams, tape: Tape, seeds: dict[str, np.ndarray], trainable=None) -> Gradients:
    """Parameter gradient of an objective given d(objective)/d(output channel).

    ``seeds`` maps channel names (see ``CHANNELS``) to per-point sensitivities
    of the objective with respect to that output channel, in the same units
    as :func:`tape_outputs` returns.

    Layers flagged False in ``trainable`` get zero gradients without the
    weight-gradient products being formed, and the sweep stops below the
    lowest trainable layer.
    """
    n = tape.inputs.shape[0]
    nch = 1 if tape.order == 0 else 6
    g_out = np.zeros((nch, n, 1))
    for k, v in seeds.items():
        if k not in CHANNELS:
            raise ValueError(f"unsupported objective primitive {k!r}")
        ch = CHANNELS.index(k)
        if ch >= nch:
            raise ValueError(f"channel {k!r} needs an order-2 tape")
        g_out[ch, :, 0] = np.broadcast_to(np.asarray(v, float), (n,))
    g_out *= params.output_scale

    L = params.n_layers
    on = [True] * L if trainable is None else [bool(f) for f in trainable]
    if len(on) != L:
        raise ValueError(f"trainable flags have {len(on)} entries for {L} layers")
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    lowest = on.index(True) if any(on) else L
    g_a = g_out
    for i in range(L - 1, lowest - 1, -1):
        c = g_a.shape[0]
        if on[i]:
            if i == 0:
                gw[0] = tape.inputs.T @ g_a[0]
                if c > 1:
                    # channels 1-3 have input derivative e_s; second-order channels have zero input
                    gw[0][0:3] += g_a[1:4].sum(axis=1)
            else:
                gw[i] = tape.z[i - 1].reshape(c * n, -1).T @ g_a.reshape(c * n, -1)
            gb[i] = g_a[0].sum(axis=0)
        if i == lowest:
            break
        g_z = (g_a.reshape(c * n, -1) @ params.weights[i].T).reshape(c, n, -1)
        g_a = _activation_vjp(tape, i - 1, g_z, tape.order)
    return Gradients(gw, gb)


def _activation_vjp(tape: Tape, layer: int, g_z: np.ndarray, order: int) -> np.ndarray:
    """Pull gradients on post-activation channels back to pre-activation channels."""
    if order == 0:
        (d1,) = tape.derivs[layer]
        return g_z * d1
    d1, d2, d3 = tape.derivs[layer]
    a = tape.pre[layer]
    g_a = np.empty_like(g_z)
    ga0 = g_z[0] * d1
    ga0 += d2 * np.einsum("cnw,cnw->nw", g_z[1:4], a[1:4])
    ga0 += g_z[4] * (d3 * a[2] ** 2 + d2 * a[4])
    ga0 += g_z[5] * (d3 * a[3] ** 2 + d2 * a[5])
    g_a[0] = ga0
    g_a[1:4] = g_z[1:4] * d1
    g_a[2:4] += 2.0 * g_z[4:6] * d2 * a[2:4]
    g_a[4:6] = g_z[4:6] * d1
    return g_a


def dumps_checkpoint(params: MlpParams) -> str:
    lines = [f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}",
             "layer_sizes " + " ".join(str(s) for s in params.layer_sizes),
             f"activation {params.activation}",
             "input_scale " + " ".join(repr(s) for s in params.input_scale),
             f"output_shift {params.output_shift!r}",
             f"output_scale {params.output_scale!r}"]
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"weights {i} {w.shape[0]} {w.shape[1]}")
        lines.append(" ".join(repr(float(v)) for v in w.ravel()))
        lines.append(f"biases {i} {b.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> MlpParams:
    lines = text.splitlines()
    head = lines[0].split()
    if head[0] != CHECKPOINT_FORMAT:
        raise ValueError("not a network checkpoint")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {head[1]}")
    sizes = tuple(int(v) for v in lines[1].split()[1:])
    activation = lines[2].split()[1]
    input_scale = tuple(float(v) for v in lines[3].split()[1:])
    shift = float(lines[4].split()[1])
    scale = float(lines[5].split()[1])
    weights, biases = [], []
    i = 6
    for _ in range(len(sizes) - 1):
        _, _, r, c = lines[i].split()
        weights.append(np.array([float(v) for v in lines[i + 1].split()]).reshape(int(r), int(c)))
        biases.append(np.array([float(v) for v in lines[i + 3].split()]))
        i += 4
    return MlpParams(sizes, weights, biases, activation, input_scale, shift, scale)


def save_checkpoint(params: MlpParams, path) -> None:
    Path(path).write_text(dumps_checkpoint(params))


def load_checkpoint(path) -> MlpParams:
    return loads_checkpoint(Path(path).read_text())
