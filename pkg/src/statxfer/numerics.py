"""Dense MLP substrate: forward/backward passes, cross-entropy, SGD, persistence.

Everything is float64. Arrays are row-major numpy arrays; a weight matrix has
shape ``(out_dim, in_dim)`` and a batch of inputs has shape ``(batch, in_dim)``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolationError, DataError, RejectedInputError

MAGIC = b"PAUG"
FORMAT_VERSION = 1

_TAG_IDENTITY = 0
_TAG_RELU = 1
_TAG_LEAKY = 2


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "relu", "leaky_relu"):
            raise RejectedInputError(f"unknown activation {self.kind!r}")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return z
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return np.where(z > 0.0, z, self.slope * z)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "relu":
            return (z > 0.0).astype(np.float64)
        return np.where(z > 0.0, 1.0, self.slope)

    @property
    def tag(self) -> int:
        return {"identity": _TAG_IDENTITY, "relu": _TAG_RELU, "leaky_relu": _TAG_LEAKY}[self.kind]


IDENTITY = Activation("identity")
RELU = Activation("relu")


def leaky_relu(slope: float = 0.1) -> Activation:
    return Activation("leaky_relu", float(slope))


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = IDENTITY

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class MlpModel:
    """Sequential stack of affine layers, each followed by an activation.

    The final layer must use the identity activation so the model emits raw
    outputs (regression targets, generated features or logits).
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise RejectedInputError("an MLP needs at least one layer")
        layers = [
            Layer(np.array(l.weight, dtype=np.float64, copy=True),
                  np.array(l.bias, dtype=np.float64, copy=True),
                  l.activation)
            for l in layers
        ]
        for i, layer in enumerate(layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise RejectedInputError(f"layer {i}: weight/bias shapes disagree")
            if i and layers[i - 1].out_dim != layer.in_dim:
                raise RejectedInputError(
                    f"layer {i}: input dim {layer.in_dim} != previous output dim {layers[i - 1].out_dim}")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise RejectedInputError(f"layer {i}: non-finite parameters")
        if layers[-1].activation.kind != "identity":
            raise RejectedInputError("final layer activation must be identity")
        self.layers = layers
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def decay_mask(self) -> list[bool]:
        return [True, False] * len(self.layers)

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise RejectedInputError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise RejectedInputError(f"layer {i}: parameter shape mismatch")
            layer.weight = np.array(w, dtype=np.float64, copy=True)
            layer.bias = np.array(b, dtype=np.float64, copy=True)
        self.version += 1

    def copy(self) -> "MlpModel":
        return MlpModel(self.layers)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


def init_mlp(sizes: Sequence[int], hidden_activation: Activation, rng: np.random.Generator) -> MlpModel:
    """Glorot-uniform weights, zero biases; identity on the last layer."""
    if len(sizes) < 2:
        raise RejectedInputError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = IDENTITY if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(layers)


@dataclass
class GradientTape:
    model_id: int
    version: int
    batched: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def mlp_forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    """Evaluate the model on one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != model.in_dim:
        raise RejectedInputError(f"input shape {x.shape} does not match input dim {model.in_dim}")
    a = x if batched else x[None, :]
    tape = GradientTape(id(model), model.version, batched)
    for layer in model.layers:
        tape.inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        tape.preacts.append(z)
        a = layer.activation(z)
    return (a if batched else a[0]), tape


def mlp_backward(model: MlpModel, tape: GradientTape, grad_output: np.ndarray
                 ) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass over ``tape``; batch gradients are summed over rows."""
    if tape.model_id != id(model) or tape.version != model.version:
        raise ContractViolationError("tape does not belong to the current model state")
    g = np.asarray(grad_output, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise RejectedInputError(f"grad_output shape {g.shape} != output shape {tape.preacts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(model.layers))  # type: ignore[list-item]
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dz = g * layer.activation.derivative(tape.preacts[i])
        grads[2 * i] = dz.T @ tape.inputs[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.weight
    return grads, (g if tape.batched else g[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise RejectedInputError(f"label {label} out of range for {logits.shape[0]} logits")
    shifted = logits - logits.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[label])
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return max(loss, 0.0), grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over rows and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= k)):
        raise RejectedInputError("labels out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.sum(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    factor: float = 0.2
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise RejectedInputError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise RejectedInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise RejectedInputError("weight decay must be non-negative")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for m in self.milestones if iteration >= m)
        return self.learning_rate * self.factor ** passed


def default_milestones(budget: int) -> tuple[int, ...]:
    return (int(0.5 * budget), int(0.8 * budget))


def sgd_step(state: SgdState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             iteration: int, decay_mask: Sequence[bool] | None = None) -> list[np.ndarray]:
    """One momentum-SGD update; returns new parameter arrays and updates ``state.velocity``.

    v <- momentum * v + grad + weight_decay * param   (decay only where ``decay_mask``)
    param <- param - lr(iteration) * v
    """
    if len(params) != len(grads):
        raise RejectedInputError("params and grads differ in length")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p, dtype=np.float64) for p in params]
    if len(state.velocity) != len(params):
        raise RejectedInputError("velocity buffers do not match parameters")
    lr = state.lr_at(iteration)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.velocity[i].shape != p.shape:
            raise RejectedInputError(f"shape mismatch at parameter {i}")
        step = g + state.weight_decay * p if decay_mask[i] else g
        v = state.momentum * state.velocity[i] + step
        state.velocity[i] = v
        out.append(p - lr * v)
    return out


# -- persistence -----------------------------------------------------------

def dump_model(model: MlpModel, role: bytes = b"M", noise_dim: int | None = None) -> bytes:
    if len(role) != 1:
        raise RejectedInputError("role tag must be a single byte")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), role]
    if role == b"G":
        if noise_dim is None:
            raise RejectedInputError("generator files need a noise dimension")
        parts.append(struct.pack("<I", noise_dim))
    parts.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, layer.activation.tag))
        if layer.activation.kind == "leaky_relu":
            parts.append(struct.pack("<d", layer.activation.slope))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_model(blob: bytes) -> tuple[MlpModel, bytes, int | None]:
    """Inverse of :func:`dump_model`; returns ``(model, role, noise_dim)``."""
    try:
        if blob[:4] != MAGIC:
            raise DataError("not a PAUG model file")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported model format version {version}")
        role = blob[6:7]
        pos = 7
        noise_dim = None
        if role == b"G":
            (noise_dim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        layers = []
        for _ in range(count):
            n_in, n_out, tag = struct.unpack_from("<IIB", blob, pos)
            pos += 9
            if tag == _TAG_LEAKY:
                (slope,) = struct.unpack_from("<d", blob, pos)
                pos += 8
                act = leaky_relu(slope)
            elif tag == _TAG_RELU:
                act = RELU
            elif tag == _TAG_IDENTITY:
                act = IDENTITY
            else:
                raise DataError(f"unknown activation tag {tag}")
            w = np.frombuffer(blob, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_out, n_in)
            pos += 8 * n_in * n_out
            b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=pos)
            pos += 8 * n_out
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
        if pos != len(blob):
            raise DataError("trailing bytes after model payload")
    except struct.error as exc:
        raise DataError(f"truncated model file: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"truncated model file: {exc}") from exc
    return MlpModel(layers), role, noise_dim


def save_model(path: str | Path, model: MlpModel, role: bytes = b"M", noise_dim: int | None = None) -> None:
    Path(path).write_bytes(dump_model(model, role, noise_dim))


def load_model(path: str | Path) -> tuple[MlpModel, bytes, int | None]:
    return parse_model(Path(path).read_bytes())
