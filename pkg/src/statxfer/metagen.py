"""Conditional feature generator trained end-to-end through a downstream classifier.

The generator maps ``[x | mu | sigma | z]`` to a new feature vector carrying x's
label. Each outer step augments an episode's support set to ``n_aug`` samples
per class, trains a fresh linear classifier for ``T`` unrolled full-batch
momentum-SGD steps, scores the query set, and backpropagates the query loss
through the whole inner trajectory into the generated samples and then into
the generator weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Episode, UnbalancedDataset, sample_episode
from .errors import EvaluationSetupError, RejectedInputError
from .hierarchy import InheritedStats, SuperclassTree, inherit
from .numerics import (GradientTape, MlpModel, SgdState, cross_entropy_batch, default_milestones,
                       init_mlp, leaky_relu, mlp_backward, mlp_forward, sgd_step, softmax)

# (class id, that class's support samples) -> statistics fed to the generator
StatsProvider = Callable[[int, np.ndarray], InheritedStats]


def tree_stats(tree: SuperclassTree) -> StatsProvider:
    return lambda cls, support: inherit(tree, cls)


@dataclass
class GeneratorModel:
    net: MlpModel
    dim: int
    noise_dim: int
    mask_stats: bool = False

    def __post_init__(self):
        if self.net.in_dim != 3 * self.dim + self.noise_dim or self.net.out_dim != self.dim:
            raise RejectedInputError("generator net must map 3d + d_z inputs to d outputs")

    def build_input(self, x: np.ndarray, mu: np.ndarray, sigma: np.ndarray, z: np.ndarray) -> np.ndarray:
        x, mu, sigma, z = (np.asarray(a, dtype=np.float64) for a in (x, mu, sigma, z))
        if x.shape[-1] != self.dim or mu.shape[-1] != self.dim or sigma.shape[-1] != self.dim:
            raise RejectedInputError(f"x, mu and sigma must have dimension {self.dim}")
        if z.shape[-1] != self.noise_dim:
            raise RejectedInputError(f"z must have dimension {self.noise_dim}")
        if self.mask_stats:
            mu = np.zeros_like(mu)
            sigma = np.zeros_like(sigma)
        batch = np.broadcast_shapes(x.shape[:-1], mu.shape[:-1], sigma.shape[:-1], z.shape[:-1])
        parts = [np.broadcast_to(a, batch + (a.shape[-1],)) for a in (x, mu, sigma, z)]
        return np.concatenate(parts, axis=-1)

    def forward(self, x, mu, sigma, z) -> tuple[np.ndarray, GradientTape]:
        return mlp_forward(self.net, self.build_input(x, mu, sigma, z))


def init_generator(dim: int, noise_dim: int, rng: np.random.Generator, hidden_mult: int = 4,
                   slope: float = 0.1, mask_stats: bool = False, seed_passthrough: bool = True,
                   init_scale: float = 0.1) -> GeneratorModel:
    """Glorot-initialized generator. With ``seed_passthrough`` the first 2d hidden
    units start as a +x/-x pair that the output layer recombines into x exactly
    (LReLU(u) - LReLU(-u) = (1 + slope) u), while every other weight is scaled by
    ``init_scale``; a fresh generator then returns roughly its seed sample."""
    if seed_passthrough and hidden_mult < 2:
        raise RejectedInputError("seed passthrough needs hidden_mult >= 2")
    net = init_mlp([3 * dim + noise_dim, hidden_mult * dim, dim], leaky_relu(slope), rng)
    if seed_passthrough:
        (w1, b1), (w2, b2) = [(layer.weight * init_scale, layer.bias) for layer in net.layers]
        eye = np.eye(dim)
        w1[:dim] = 0.0
        w1[dim:2 * dim] = 0.0
        w1[:dim, :dim] = eye
        w1[dim:2 * dim, :dim] = -eye
        w2[:, :2 * dim] = np.hstack([eye, -eye]) / (1.0 + slope)
        net.set_parameters([w1, b1, w2, b2])
    return GeneratorModel(net, dim, noise_dim, mask_stats)


def generate(G: GeneratorModel, x: np.ndarray, stats: InheritedStats, z: np.ndarray | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
    if z is None:
        if rng is None:
            raise RejectedInputError("supply z or an rng to draw it")
        z = rng.standard_normal(G.noise_dim)
    return G.forward(x, stats.mean, stats.deviation, z)[0]


@dataclass
class AugmentedSet:
    """Balanced per-class sample set; rows of each class are seeds first, then generated."""
    classes: list[int]
    features: np.ndarray
    labels: np.ndarray
    generated: np.ndarray
    n_aug: int
    gen_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    gen_tape: GradientTape | None = None

    def per_class(self, cls: int) -> np.ndarray:
        return self.features[self.labels == cls]

    def check(self, support: Mapping[int, np.ndarray] | None = None) -> None:
        for c in self.classes:
            assert np.sum(self.labels == c) == self.n_aug, f"class {c} is not balanced at n_aug"
        if support is not None:
            for c, seeds in support.items():
                kept = self.features[(self.labels == c) & ~self.generated]
                assert kept.shape == seeds.shape and np.array_equal(kept, seeds), f"seeds of {c} not retained"


def augment(G: GeneratorModel | None, support: Mapping[int, np.ndarray], stats_for: StatsProvider,
            n_aug: int, rng: np.random.Generator) -> AugmentedSet:
    """Top every class up to ``n_aug`` samples with generator output.

    Each generated sample uses a seed drawn uniformly (with replacement) from
    its class's support, the class's inherited statistics and fresh noise.
    """
    classes = sorted(support)
    feats, labels, flags = [], [], []
    gen_inputs = []
    gen_positions = []
    row = 0
    for c in classes:
        seeds = np.asarray(support[c], dtype=np.float64)
        k = len(seeds)
        if k == 0:
            raise RejectedInputError(f"class {c} has no seed samples")
        if k > n_aug:
            raise RejectedInputError(f"class {c} has {k} seeds, more than n_aug={n_aug}")
        feats.append(seeds)
        labels.append(np.full(k, c))
        flags.append(np.zeros(k, dtype=bool))
        m = n_aug - k
        row += k
        if m:
            if G is None:
                raise RejectedInputError("augmentation requested without a generator")
            stats = stats_for(c, seeds)
            pick = rng.integers(k, size=m)
            z = rng.standard_normal((m, G.noise_dim))
            gen_inputs.append(G.build_input(seeds[pick], stats.mean, stats.deviation, z))
            gen_positions.append(np.arange(row, row + m))
            feats.append(np.zeros((m, seeds.shape[1])))
            labels.append(np.full(m, c))
            flags.append(np.ones(m, dtype=bool))
            row += m
    features = np.concatenate(feats)
    gen_rows = np.concatenate(gen_positions) if gen_positions else np.empty(0, dtype=np.int64)
    tape = None
    if gen_inputs:
        out, tape = mlp_forward(G.net, np.concatenate(gen_inputs))
        features[gen_rows] = out
    aug = AugmentedSet(classes, features, np.concatenate(labels), np.concatenate(flags),
                       n_aug, gen_rows, tape)
    aug.check(support)
    return aug


# -- classifier ----------------------------------------------------------------

@dataclass
class ClassifierModel:
    net: MlpModel
    classes: list[int]

    def __post_init__(self):
        if self.net.out_dim != len(self.classes):
            raise RejectedInputError("logit count must equal the number of mapped classes")
        self._index = {c: i for i, c in enumerate(self.classes)}

    def index_of(self, labels: np.ndarray) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise RejectedInputError(f"label {exc.args[0]} outside classifier label space") from None

    def logits(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, x)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.classes)[self.logits(np.atleast_2d(x)).argmax(axis=1)]


def init_classifier(dim: int, classes: Sequence[int], rng: np.random.Generator,
                    hidden: Sequence[int] = (), slope: float = 0.1) -> ClassifierModel:
    return ClassifierModel(init_mlp([dim, *hidden, len(classes)], leaky_relu(slope), rng), list(classes))


@dataclass
class InnerConfig:
    steps: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    factor: float = 0.2
    milestones: tuple[float, ...] = ()  # fractions of ``steps``

    def optimizer(self) -> SgdState:
        return SgdState(self.learning_rate, self.momentum, self.weight_decay,
                        tuple(int(f * self.steps) for f in self.milestones), self.factor)


@dataclass
class InnerStep:
    weight: np.ndarray
    bias: np.ndarray
    probs: np.ndarray
    residual: np.ndarray
    lr: float


def _as_xy(data: AugmentedSet | tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, AugmentedSet):
        return data.features, data.labels
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def fit_classifier(h: ClassifierModel, data: AugmentedSet | tuple[np.ndarray, np.ndarray],
                   inner: InnerConfig, record_tapes: bool = False
                   ) -> tuple[ClassifierModel, list[InnerStep] | None]:
    """Full-batch momentum SGD on the summed cross-entropy of ``data``.

    With ``record_tapes`` the classifier must be linear; every step's weights
    and softmax outputs are kept for :func:`unrolled_input_grad`.
    """
    if inner.steps < 1:
        raise RejectedInputError("the inner loop needs at least one step")
    x, y = _as_xy(data)
    if len(x) == 0:
        raise RejectedInputError("cannot fit a classifier on an empty set")
    missing = set(h.classes) - set(np.unique(y).tolist())
    if missing:
        raise RejectedInputError(f"classes without samples: {sorted(missing)}")
    target = h.index_of(y)
    opt = inner.optimizer()
    if record_tapes:
        if len(h.net.layers) != 1:
            raise RejectedInputError("unrolled differentiation supports linear classifiers only")
        w, b = h.net.layers[0].weight, h.net.layers[0].bias
        onehot = np.eye(len(h.classes))[target]
        vw = np.zeros_like(w)
        vb = np.zeros_like(b)
        tapes = []
        for t in range(inner.steps):
            p = softmax(x @ w.T + b)
            r = p - onehot
            lr = opt.lr_at(t)
            tapes.append(InnerStep(w, b, p, r, lr))
            vw = opt.momentum * vw + r.T @ x + opt.weight_decay * w
            vb = opt.momentum * vb + r.sum(axis=0)
            w = w - lr * vw
            b = b - lr * vb
        h.net.set_parameters([w, b])
        return h, tapes
    for t in range(inner.steps):
        logits, tape = mlp_forward(h.net, x)
        _, g = cross_entropy_batch(logits, target)
        grads, _ = mlp_backward(h.net, tape, g)
        h.net.set_parameters(sgd_step(opt, h.net.parameters(), grads, t, h.net.decay_mask()))
    return h, None


def unrolled_input_grad(tapes: Sequence[InnerStep], x: np.ndarray, grad_w: np.ndarray,
                        grad_b: np.ndarray, momentum: float, weight_decay: float,
                        first_order: bool = False) -> np.ndarray:
    """Gradient of a loss on the final classifier weights with respect to the inner training inputs.

    ``grad_w``/``grad_b`` are the loss gradients at the final weights. The
    recursion walks the inner steps backwards, carrying adjoints for the
    weights and the momentum buffers. ``first_order`` keeps only the last
    step's dependence on the inputs.
    """
    gx = np.zeros_like(x)
    gw, gb = grad_w.copy(), grad_b.copy()
    vw_adj = np.zeros_like(gw)
    vb_adj = np.zeros_like(gb)
    for step in reversed(tapes):
        vw_tot = vw_adj - step.lr * gw
        vb_tot = vb_adj - step.lr * gb
        # adjoint of the residual (probs - onehot) through grad_w = r^T x, grad_b = r^T 1
        r_adj = x @ vw_tot.T + vb_tot[None, :]
        gx += step.residual @ vw_tot
        p = step.probs
        a_adj = p * (r_adj - np.sum(p * r_adj, axis=1, keepdims=True))
        gx += a_adj @ step.weight
        gw = gw + weight_decay * vw_tot + a_adj.T @ x
        gb = gb + a_adj.sum(axis=0)
        vw_adj = momentum * vw_tot
        vb_adj = momentum * vb_tot
        if first_order:
            break
    return gx


# -- outer loop ----------------------------------------------------------------

@dataclass
class MetaTrainConfig:
    n: int = 1
    n_aug: int = 20
    classes_per_episode: int = 5
    query_per_class: int = 15
    inner: InnerConfig = field(default_factory=InnerConfig)
    outer_lr: float = 0.01
    outer_momentum: float = 0.9
    outer_weight_decay: float = 5e-4
    outer_factor: float = 0.2
    iterations: int = 2000
    first_order: bool = False
    grad_clip: float = 0.0  # global norm bound on the outer gradient; 0 disables

    def __post_init__(self):
        if self.n_aug < self.n:
            raise RejectedInputError("n_aug must be at least n")
        if self.inner.steps < 1:
            raise RejectedInputError("inner steps T must be >= 1")
        if self.outer_lr < 0:
            raise RejectedInputError("outer learning rate must be non-negative")

    def outer_optimizer(self) -> SgdState | None:
        """Outer SGD state; ``None`` when the outer learning rate is zero (theta stays frozen)."""
        if self.outer_lr == 0:
            return None
        return SgdState(self.outer_lr, self.outer_momentum, self.outer_weight_decay,
                        default_milestones(self.iterations), self.outer_factor)


def meta_loss_and_grad(G: GeneratorModel, support: Mapping[int, np.ndarray], query: np.ndarray,
                       query_labels: np.ndarray, stats_for: StatsProvider, config: MetaTrainConfig,
                       rng: np.random.Generator) -> tuple[float, list[np.ndarray]]:
    """Query loss of a classifier trained on the augmented support, and its gradient in theta."""
    aug = augment(G, support, stats_for, config.n_aug, rng)
    h = init_classifier(G.dim, aug.classes, rng)
    h, tapes = fit_classifier(h, aug, config.inner, record_tapes=True)
    w, b = h.net.layers[0].weight, h.net.layers[0].bias
    loss, g_logits = cross_entropy_batch(query @ w.T + b, h.index_of(query_labels))
    # mean over the query set keeps the outer step size independent of its size
    loss, g_logits = loss / len(query), g_logits / len(query)
    if aug.gen_tape is None:
        return loss, [np.zeros_like(p) for p in G.net.parameters()]
    gx = unrolled_input_grad(tapes, aug.features, g_logits.T @ query, g_logits.sum(axis=0),
                             config.inner.momentum, config.inner.weight_decay, config.first_order)
    grads, _ = mlp_backward(G.net, aug.gen_tape, gx[aug.gen_rows])
    return loss, grads


def outer_step(G: GeneratorModel, episode: Episode, stats_for: StatsProvider, config: MetaTrainConfig,
               rng: np.random.Generator, optimizer: SgdState | None, iteration: int) -> tuple[GeneratorModel, float]:
    loss, grads = meta_loss_and_grad(G, episode.support, episode.query, episode.query_labels,
                                     stats_for, config, rng)
    if optimizer is None:
        return G, loss
    if config.grad_clip > 0:
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
        if norm > config.grad_clip:
            grads = [g * (config.grad_clip / norm) for g in grads]
    G.net.set_parameters(sgd_step(optimizer, G.net.parameters(), grads, iteration, G.net.decay_mask()))
    return G, loss


def meta_train(G: GeneratorModel, dataset: UnbalancedDataset, stats_for: StatsProvider,
               config: MetaTrainConfig, rng: np.random.Generator,
               classes: Sequence[int] | None = None) -> tuple[GeneratorModel, list[float]]:
    """Run ``config.iterations`` outer steps on episodes drawn from ``classes``
    (many-shot classes by default). Returns the generator and per-step meta-losses."""
    pool = list(dataset.many_shot if classes is None else classes)
    optimizer = config.outer_optimizer()
    history = []
    for it in range(config.iterations):
        ep = sample_episode(dataset, config.n, config.classes_per_episode, config.query_per_class,
                            rng, classes=pool)
        G, loss = outer_step(G, ep, stats_for, config, rng, optimizer, it)
        history.append(loss)
    return G, history


# -- evaluation ----------------------------------------------------------------

@dataclass
class MetaTestConfig:
    n_aug: int = 20
    inner: InnerConfig = field(default_factory=lambda: InnerConfig(
        steps=300, learning_rate=0.01, momentum=0.9, weight_decay=5e-4, milestones=(0.5, 0.8)))


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    queries: int


def meta_test(G: GeneratorModel | None, support: Mapping[int, np.ndarray], query: np.ndarray,
              query_labels: np.ndarray, stats_for: StatsProvider | None, config: MetaTestConfig,
              rng: np.random.Generator) -> EvalResult:
    """Augment the support with a frozen generator (``None`` disables augmentation),
    train a fresh classifier and report top-1 accuracy on the query set."""
    query_labels = np.asarray(query_labels)
    absent = set(query_labels.tolist()) - set(support)
    if absent:
        raise EvaluationSetupError(f"query labels without support: {sorted(absent)}")
    before = G.net.checksum() if G is not None else None
    if G is None:
        classes = sorted(support)
        data = (np.concatenate([support[c] for c in classes]),
                np.concatenate([np.full(len(support[c]), c) for c in classes]))
    else:
        data = augment(G, support, stats_for, config.n_aug, rng)
        classes = data.classes
    dim = query.shape[1]
    h = init_classifier(dim, classes, rng)
    if config.inner.steps > 0:
        h, _ = fit_classifier(h, data, config.inner)
    if G is not None:
        assert G.net.checksum() == before, "generator parameters changed during evaluation"
    return score(h.predict(query), query_labels)


def score(predicted: np.ndarray, labels: np.ndarray) -> EvalResult:
    correct = predicted == labels
    per_class = {int(c): float(correct[labels == c].mean()) for c in np.unique(labels)}
    acc = float(correct.mean()) if len(labels) else 0.0
    return EvalResult(acc, per_class, int(len(labels)))
