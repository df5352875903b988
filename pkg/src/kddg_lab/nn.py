"""Dense network engine: forward/backward passes, optimizers, checkpoints.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``act(x @ W + b)`` on a row-major batch ``x``.  Every array is float64.

A flat parameter vector lists, layer by layer, the weight matrix in
row-major order followed by the bias.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, RejectedInputError, RejectedParameterError

ACTIVATIONS = ("relu", "identity")

CHECKPOINT_MAGIC = b"KDDG-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise RejectedInputError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


def glorot_layer(fan_in: int, fan_out: int, rng: np.random.Generator,
                 activation: str = "relu") -> Layer:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    bias = rng.uniform(-limit, limit, size=fan_out)
    return Layer(weight, bias, activation)


def _check_finite(arr, what, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} at layer {layer}", layer=layer)


class Network:
    """Ordered stack of dense layers producing logits."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise RejectedInputError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].out_dim != layers[i].in_dim:
                raise RejectedInputError(
                    f"layer {i} expects {layers[i].in_dim} inputs, "
                    f"previous layer gives {layers[i - 1].out_dim}"
                )
        self.layers = layers

    @classmethod
    def init(cls, sizes: Sequence[int], seed=None, rng: np.random.Generator | None = None,
             hidden_activation: str = "relu", output_activation: str = "identity") -> "Network":
        """Glorot-uniform network with layer widths ``sizes`` (input first)."""
        if len(sizes) < 2:
            raise RejectedInputError("sizes needs an input and an output width")
        if rng is None:
            rng = np.random.default_rng(seed)
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(glorot_layer(a, b, rng, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(layer.size for layer in self.layers)

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])

    def params(self) -> np.ndarray:
        return flatten_layers(self.layers)

    def set_params(self, flat: np.ndarray) -> None:
        unflatten_into(self.layers, flat)

    def with_params(self, flat: np.ndarray) -> "Network":
        net = self.copy()
        net.set_params(flat)
        return net

    def __call__(self, inputs):
        return forward(self, inputs)

    def __repr__(self):
        dims = [self.in_dim] + [layer.out_dim for layer in self.layers]
        return f"Network(dims={dims})"


def flatten_layers(layers: Sequence[Layer]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts)


def unflatten_into(layers: Sequence[Layer], flat) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(layer.size for layer in layers)
    if flat.ndim != 1 or flat.shape[0] != total:
        raise RejectedInputError(f"expected {total} parameters, got shape {flat.shape}")
    pos = 0
    for layer in layers:
        n = layer.weight.size
        layer.weight = flat[pos:pos + n].reshape(layer.weight.shape).copy()
        pos += n
        n = layer.bias.size
        layer.bias = flat[pos:pos + n].copy()
        pos += n


def _as_batch(inputs, in_dim):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise RejectedInputError(f"inputs of shape {x.shape} do not fit input dimension {in_dim}")
    return x


def forward_layers(layers: Sequence[Layer], x: np.ndarray, keep: bool = False):
    """Run ``x`` through ``layers``; with ``keep`` also return each layer's input and pre-activation."""
    cache = []
    h = x
    for i, layer in enumerate(layers):
        z = h @ layer.weight + layer.bias
        out = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if keep:
            _check_finite(out, "activation", i)
            cache.append((h, z))
        h = out
    return (h, cache) if keep else h


def backward_layers(layers: Sequence[Layer], cache, dout: np.ndarray,
                    need_input_grad: bool = False):
    """Backpropagate ``dout`` through ``layers``; returns (flat grad, d input)."""
    grads = [None] * len(layers)
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h, z = cache[i]
        if layer.activation == "relu":
            delta = delta * (z > 0.0)
        gw = h.T @ delta
        gb = delta.sum(axis=0)
        _check_finite(gw, "weight gradient", i)
        _check_finite(gb, "bias gradient", i)
        grads[i] = (gw, gb)
        if i > 0 or need_input_grad:
            delta = delta @ layer.weight.T
    flat = np.concatenate([part for gw, gb in grads for part in (gw.ravel(), gb)])
    return flat, (delta if need_input_grad else None)


def forward(net: Network, inputs) -> np.ndarray:
    """Logits of ``net`` for a batch (or a single row) of inputs."""
    x = _as_batch(inputs, net.in_dim)
    return forward_layers(net.layers, x)


def forward_with_cache(net: Network, inputs):
    x = _as_batch(inputs, net.in_dim)
    return forward_layers(net.layers, x, keep=True)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def grad(net: Network, inputs, loss_fn: LossFn):
    """Gradient of a scalar loss of the logits with respect to every parameter.

    ``loss_fn(logits)`` must return ``(loss, dloss/dlogits)``.  Returns
    ``(loss, flat_gradient)``; the network is left untouched.
    """
    logits, cache = forward_with_cache(net, inputs)
    loss, dlogits = loss_fn(logits)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss", layer=len(net.layers) - 1)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != logits.shape:
        raise RejectedInputError(f"loss gradient shape {dlogits.shape} != logits {logits.shape}")
    flat, _ = backward_layers(net.layers, cache, dlogits)
    return float(loss), flat


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, computed with max subtraction."""
    if not tau > 0:
        raise RejectedParameterError(f"temperature must be positive, got {tau}")
    s = np.asarray(logits, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise RejectedParameterError(f"temperature must be positive, got {tau}")
    s = np.asarray(logits, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.05
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise RejectedParameterError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise RejectedParameterError(f"unknown schedule {self.schedule!r}")
        if not self.lr >= 0:
            raise RejectedParameterError("learning rate must be nonnegative")
        if self.weight_decay < 0:
            raise RejectedParameterError("weight decay must be nonnegative")
        if self.schedule == "cosine" and self.total_epochs < 1:
            raise RejectedParameterError("cosine schedule needs total_epochs >= 1")

    def effective_lr(self, epoch: float = 0) -> float:
        """Learning rate in force during ``epoch`` (0-based)."""
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.total_epochs))

    def fresh(self) -> "OptimizerState":
        """Same settings, zeroed step counter and moments."""
        return OptimizerState(self.kind, self.lr, self.weight_decay, self.schedule,
                              self.total_epochs, self.beta1, self.beta2, self.eps)


def optimizer_step(state: OptimizerState, params: np.ndarray, gradient: np.ndarray,
                   epoch: float = 0) -> np.ndarray:
    """Return updated parameters; advances ``state`` in place."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise RejectedInputError(f"params {params.shape} and gradient {gradient.shape} differ")
    lr = state.effective_lr(epoch)
    g = gradient + state.weight_decay * params if state.weight_decay else gradient
    state.step += 1
    if state.kind == "sgd":
        return params - lr * g
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise RejectedInputError("optimizer moments do not match parameter shape")
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ----------------------------------------------------------------------------
# checkpoints
#
# File layout:
#   line 1   b"KDDG-CKPT <version>\n"
#   line 2   JSON header terminated by b"\n":
#            {"arch": str, "dtype": "<f8", "num_params": int,
#             "layers": [{"in": int, "out": int, "activation": str}, ...]}
#   rest     num_params little-endian float64 values in flat-vector order

def write_checkpoint(path, layers: Sequence[Layer], arch: str = "dense", extra: dict | None = None):
    header = {
        "arch": arch,
        "dtype": "<f8",
        "num_params": int(sum(layer.size for layer in layers)),
        "layers": [
            {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
            for layer in layers
        ],
    }
    if extra:
        header["extra"] = extra
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(flatten_layers(layers).astype("<f8").tobytes())


def read_checkpoint(path):
    """Return ``(arch, layers, header)`` from a checkpoint file."""
    with Path(path).open("rb") as fh:
        magic = fh.readline().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise RejectedInputError(f"{path} is not a network checkpoint")
        if int(magic[1]) > CHECKPOINT_VERSION:
            raise RejectedInputError(f"checkpoint version {magic[1].decode()} is newer than supported")
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if data.shape[0] != header["num_params"]:
        raise RejectedInputError(f"{path}: expected {header['num_params']} values, found {data.shape[0]}")
    layers = [
        Layer(np.zeros((spec["in"], spec["out"])), np.zeros(spec["out"]), spec["activation"])
        for spec in header["layers"]
    ]
    unflatten_into(layers, data)
    return header["arch"], layers, header


def save_network(path, net: Network) -> None:
    write_checkpoint(path, net.layers, arch="dense")


def load_network(path) -> Network:
    arch, layers, _ = read_checkpoint(path)
    if arch != "dense":
        raise RejectedInputError(f"{path} holds a {arch!r} network, not a dense one")
    return Network(layers)
