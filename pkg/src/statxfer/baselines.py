"""Reference methods: nearest-prototype classification, the statistics-free
hallucination generator, and K-nearest-class statistics transfer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import UnbalancedDataset
from .errors import RejectedInputError
from .hierarchy import InheritedStats
from .metagen import GeneratorModel, StatsProvider, init_generator
from .regressor import ClassMeanTable


@dataclass
class PrototypeClassifier:
    prototypes: dict[int, np.ndarray]

    @classmethod
    def from_support(cls, support: Mapping[int, np.ndarray]) -> "PrototypeClassifier":
        return cls({int(c): np.asarray(x, dtype=np.float64).mean(axis=0) for c, x in support.items()})

    def predict(self, x: np.ndarray) -> np.ndarray:
        classes = sorted(self.prototypes)
        protos = np.stack([self.prototypes[c] for c in classes])
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != protos.shape[1]:
            raise RejectedInputError("query dimension does not match prototypes")
        d2 = ((x[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
        # argmin returns the first minimum; classes are sorted, so ties go to the lowest id
        return np.asarray(classes)[d2.argmin(axis=1)]


def proto_predict(clf: PrototypeClassifier, x: np.ndarray) -> int:
    if not clf.prototypes:
        raise RejectedInputError("no prototypes")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInputError("proto_predict takes a single vector")
    return int(clf.predict(x)[0])


def init_hallucinator(dim: int, noise_dim: int, rng: np.random.Generator, **kwargs) -> GeneratorModel:
    return init_generator(dim, noise_dim, rng, mask_stats=True, **kwargs)


def hallucinate_baseline(G_h: GeneratorModel, x: np.ndarray, z: np.ndarray | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Generate from a seed and noise alone; statistics slots are zero."""
    if not G_h.mask_stats:
        raise RejectedInputError("hallucination baseline needs a stats-masked generator")
    if z is None:
        if rng is None:
            raise RejectedInputError("supply z or an rng to draw it")
        z = rng.standard_normal(G_h.noise_dim)
    zeros = np.zeros(G_h.dim)
    return G_h.forward(x, zeros, zeros, z)[0]


def nearest_classes(sample: np.ndarray, means: ClassMeanTable, candidates: Sequence[int], k: int) -> list[int]:
    if k > len(candidates):
        raise RejectedInputError(f"K={k} exceeds the {len(candidates)} candidate classes")
    if k < 1:
        raise RejectedInputError("K must be positive")
    cands = sorted(candidates)
    d2 = ((means.matrix(cands) - np.asarray(sample)[None, :]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")[:k]
    return [cands[i] for i in order]


def knn_transfer_stats(sample: np.ndarray, means: ClassMeanTable, dataset: UnbalancedDataset, k: int = 5,
                       exclude: Sequence[int] = ()) -> InheritedStats:
    """Pooled mean/standard deviation over all samples of the K many-shot classes
    whose means lie closest to ``sample``."""
    candidates = [c for c in dataset.many_shot if c in means.entries and c not in set(exclude)]
    chosen = nearest_classes(sample, means, candidates, k)
    xs = np.concatenate([dataset.samples_of(c) for c in chosen])
    mu = xs.mean(axis=0)
    return InheritedStats(mu, np.sqrt(((xs - mu) ** 2).mean(axis=0)))


def knn_stats_provider(means: ClassMeanTable, dataset: UnbalancedDataset, k: int = 5,
                       exclude_self: bool = True) -> StatsProvider:
    """Stats provider keyed on each class's support mean; a class never borrows from itself."""
    def provider(cls: int, support: np.ndarray) -> InheritedStats:
        return knn_transfer_stats(np.asarray(support).mean(axis=0), means, dataset, k,
                                  exclude=(cls,) if exclude_self else ())
    return provider
