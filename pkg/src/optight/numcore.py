"""Small dense numeric layer: an MLP with analytic backprop, RMSProp and a
finite-difference gradient checker.

Everything runs in float64.  Networks use ReLU on hidden layers and an
identity output layer, so ``forward`` returns one value per action.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass
class DenseNet:
    """Multi-layer perceptron.

    ``weights[i]`` has shape ``(widths[i + 1], widths[i])`` and maps layer
    ``i`` activations to layer ``i + 1`` pre-activations.
    """

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and one bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i + 1], self.widths[i]):
                raise ValueError(f"layer {i}: weight shape {w.shape} does not match widths")
            if b.shape != (self.widths[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match widths")

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator) -> "DenseNet":
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(widths), weights, biases)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def clone(self) -> "DenseNet":
        return DenseNet(
            self.widths,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def copy_from(self, other: "DenseNet"):
        if other.widths != self.widths:
            raise ValueError("cannot copy parameters between different architectures")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def _as_input(net: DenseNet, state) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ValueError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(net: DenseNet, x: np.ndarray):
    # Returns the activation of every layer, input first.
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(net: DenseNet, state) -> np.ndarray:
    """Q-values for a single state (1-D) or a batch of states (2-D)."""
    x = _as_input(net, state)
    return _forward_cache(net, x)[-1]


def backward(net: DenseNet, state, output_grad) -> list[np.ndarray]:
    """Gradients of ``sum(output_grad * forward(net, state))`` w.r.t. the
    parameters, in the order of ``DenseNet.params()``.  Batched inputs are
    summed over the batch.
    """
    x = _as_input(net, state)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape[-1] != net.output_dim or g.ndim != x.ndim or (x.ndim == 2 and g.shape[0] != x.shape[0]):
        raise ValueError(f"output gradient shape {g.shape} does not match outputs")
    xb = x.reshape(-1, net.input_dim)
    gb = g.reshape(-1, net.output_dim)
    acts = _forward_cache(net, xb)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    delta = gb
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            # ReLU subgradient at 0 is taken as 0.
            delta = (delta @ net.weights[i]) * (acts[i] > 0.0)
    return grads


@dataclass
class RmsPropState:
    lr: float = 2.5e-4
    decay: float = 0.95
    eps: float = 1e-6
    accumulators: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("RMSProp decay must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("RMSProp learning rate and epsilon must be positive")

    @classmethod
    def for_net(cls, net: DenseNet, **kwargs) -> "RmsPropState":
        return cls(accumulators=[np.zeros_like(p) for p in net.params()], **kwargs)


def rmsprop_step(net: DenseNet, grads: Sequence[np.ndarray], opt: RmsPropState):
    """In-place RMSProp update of ``net`` and ``opt``."""
    params = net.params()
    if not opt.accumulators:
        opt.accumulators = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(opt.accumulators) != len(params):
        raise ValueError("gradient list does not match the network parameters")
    for p, g, acc in zip(params, grads, opt.accumulators):
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, acc {acc.shape}")
        acc *= opt.decay
        acc += (1.0 - opt.decay) * g * g
        p -= opt.lr * g / np.sqrt(acc + opt.eps)


def gradient_check(
    net: DenseNet,
    inputs,
    probe: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-5,
    floor: float = 1e-6,
    grads: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probe(outputs)`` returns the scalar loss and its gradient w.r.t. the
    outputs.  ``grads`` overrides the analytic gradients (handy for checking
    that the checker itself notices a corrupted gradient).
    """
    if grads is None:
        _, out_grad = probe(forward(net, inputs))
        grads = backward(net, inputs, out_grad)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = probe(forward(net, inputs))[0]
            flat[i] = orig - step
            down = probe(forward(net, inputs))[0]
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_arrays(net: DenseNet, opt: RmsPropState | None = None) -> dict[str, np.ndarray]:
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "kind": np.array("dense"),
        "widths": np.array(net.widths, dtype=np.int64),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    if opt is not None:
        arrays["opt"] = np.array([opt.lr, opt.decay, opt.eps])
        for i, acc in enumerate(opt.accumulators):
            arrays[f"acc{i}"] = acc
    return arrays


def net_from_arrays(arrays) -> tuple[DenseNet, RmsPropState | None]:
    version = int(arrays["format_version"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    widths = tuple(int(w) for w in arrays["widths"])
    n = len(widths) - 1
    net = DenseNet(widths, [arrays[f"W{i}"].copy() for i in range(n)], [arrays[f"b{i}"].copy() for i in range(n)])
    opt = None
    if "opt" in arrays:
        lr, decay, eps = (float(v) for v in arrays["opt"])
        accs = [arrays[f"acc{i}"].copy() for i in range(2 * n) if f"acc{i}" in arrays]
        opt = RmsPropState(lr=lr, decay=decay, eps=eps, accumulators=accs)
    return net, opt


def save_arrays(path, arrays: dict[str, np.ndarray]):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def save_checkpoint(path, net: DenseNet, opt: RmsPropState | None = None):
    save_arrays(path, checkpoint_arrays(net, opt))


def load_checkpoint(path) -> tuple[DenseNet, RmsPropState | None]:
    return net_from_arrays(load_arrays(path))
