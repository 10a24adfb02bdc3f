"""Class-mean regression: learn x -> mean(class(x)) on many-shot classes and use it
to estimate few-shot class means by averaging per-sample predictions."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabeledSample, Role, UnbalancedDataset
from .errors import RejectedInputError, TrainingSetupError
from .numerics import (Layer, MlpModel, SgdState, default_milestones, init_mlp, leaky_relu,
                       mlp_backward, mlp_forward, sgd_step)


class MeanSource(enum.Enum):
    EMPIRICAL = "empirical"
    REGRESSED = "regressed"


@dataclass(frozen=True)
class MeanEntry:
    mean: np.ndarray
    source: MeanSource


@dataclass
class ClassMeanTable:
    entries: dict[int, MeanEntry]

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    def mean(self, cls: int) -> np.ndarray:
        return self.entries[cls].mean

    def matrix(self, classes: Sequence[int] | None = None) -> np.ndarray:
        classes = self.classes if classes is None else classes
        return np.stack([self.entries[c].mean for c in classes])


@dataclass
class RegressorConfig:
    hidden_mult: int = 2
    slope: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    factor: float = 0.2
    residual: bool = True  # learn f(x) = x + g(x), g regressing the offset mu - x


@dataclass
class RegressorModel:
    net: MlpModel
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.net.in_dim != self.net.out_dim:
            raise RejectedInputError("regressor input and output dimensions must agree")

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, x)[0]


def empirical_class_mean(samples: Sequence[LabeledSample]) -> np.ndarray:
    if not samples:
        raise RejectedInputError("cannot average an empty sample list")
    labels = {s.label for s in samples}
    if len(labels) != 1:
        raise RejectedInputError(f"samples come from several classes: {sorted(labels)}")
    stacked = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    return stacked.mean(axis=0)


def _fold_standardization(net: MlpModel, shift: np.ndarray, scale: float) -> MlpModel:
    """Rewrite ``x -> scale * net((x - shift) / scale) + shift`` as a plain MLP."""
    layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in net.layers]
    first = layers[0]
    first.bias = first.bias - first.weight @ shift / scale
    first.weight = first.weight / scale
    last = layers[-1]
    last.weight = last.weight * scale
    last.bias = last.bias * scale + shift
    return MlpModel(layers)


def _fold_residual(net: MlpModel) -> MlpModel:
    """Rewrite ``x -> x + net(x)`` for a one-hidden-layer leaky net as a plain MLP.

    The skip path rides on 2d extra hidden units: LReLU(u) - LReLU(-u) = (1 + a) u.
    """
    (hidden, out) = net.layers
    if hidden.activation.kind != "leaky_relu" or hidden.activation.slope == -1.0:
        raise RejectedInputError("residual folding needs a leaky hidden layer")
    d = net.in_dim
    eye = np.eye(d)
    w1 = np.vstack([hidden.weight, eye, -eye])
    b1 = np.concatenate([hidden.bias, np.zeros(2 * d)])
    w2 = np.hstack([out.weight, eye / (1.0 + hidden.activation.slope), -eye / (1.0 + hidden.activation.slope)])
    return MlpModel([Layer(w1, b1, hidden.activation), Layer(w2, out.bias.copy(), out.activation)])


def train_regressor(dataset: UnbalancedDataset, config: RegressorConfig,
                    rng: np.random.Generator) -> RegressorModel:
    """Minibatch momentum-SGD on mean squared error against each sample's class mean.

    With ``config.residual`` the network learns the offset from a sample to its
    class mean and the returned model adds the sample back, so an untrained
    correction starts from the raw sample rather than from an arbitrary point.

    Only many-shot classes are read. Inputs and targets are standardised with
    many-shot statistics during training; the transform is folded into the
    returned network so it acts on raw features.
    """
    many = dataset.many_shot
    if len(many) < 2:
        raise TrainingSetupError(f"regressor needs >= 2 many-shot classes, got {len(many)}")
    x = np.concatenate([dataset.samples_of(c) for c in many])
    targets = np.concatenate([
        np.broadcast_to(dataset.samples_of(c).mean(axis=0), (dataset.count(c), dataset.dim))
        for c in many])
    shift = x.mean(axis=0)
    scale = float(np.sqrt(np.mean((x - shift) ** 2))) or 1.0
    xs = (x - shift) / scale
    ts = (targets - shift) / scale
    if config.residual:
        ts = ts - xs

    d = dataset.dim
    net = init_mlp([d, config.hidden_mult * d, d], leaky_relu(config.slope), rng)
    if config.residual:  # zero correction at start: f begins as the identity
        w1, b1, w2, b2 = net.parameters()
        net.set_parameters([w1, b1, np.zeros_like(w2), b2])
    steps_per_epoch = max(1, int(np.ceil(len(xs) / config.batch_size)))
    budget = config.epochs * steps_per_epoch
    opt = SgdState(config.learning_rate, config.momentum, config.weight_decay,
                   default_milestones(budget), config.factor)
    history = []
    it = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(xs), config.batch_size):
            batch = order[start:start + config.batch_size]
            out, tape = mlp_forward(net, xs[batch])
            err = out - ts[batch]
            total += float(np.sum(err ** 2)) / d
            grads, _ = mlp_backward(net, tape, 2.0 * err / (d * len(batch)))
            net.set_parameters(sgd_step(opt, net.parameters(), grads, it, net.decay_mask()))
            it += 1
        history.append(total / len(xs))
    if config.residual:
        net = _fold_residual(net)
    return RegressorModel(_fold_standardization(net, shift, scale), history)


def predict_class_mean(model: RegressorModel, samples: np.ndarray | Sequence[LabeledSample]) -> np.ndarray:
    """Average of the per-sample regressor outputs."""
    if len(samples) == 0:
        raise RejectedInputError("need at least one sample")
    if isinstance(samples[0], LabeledSample):
        samples = np.stack([s.features for s in samples])
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise RejectedInputError(f"sample dimension {x.shape[1]} != regressor dimension {model.dim}")
    return model(x).mean(axis=0)


def build_mean_table(dataset: UnbalancedDataset, model: RegressorModel | None,
                     use_regressor: bool = True) -> ClassMeanTable:
    """Empirical means for many-shot classes; regressed means for few-shot ones.

    With ``use_regressor=False`` few-shot classes fall back to the average of
    their own samples (the raw sample itself in the one-shot case).
    """
    entries = {}
    for c in dataset.classes:
        xs = dataset.samples_of(c)
        if dataset.roles[c] is Role.FEW and use_regressor:
            if model is None:
                raise TrainingSetupError("few-shot classes present but no regressor supplied")
            entries[c] = MeanEntry(predict_class_mean(model, xs), MeanSource.REGRESSED)
        else:
            entries[c] = MeanEntry(xs.mean(axis=0), MeanSource.EMPIRICAL)
    return ClassMeanTable(entries)
