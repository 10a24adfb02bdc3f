"""Superclass tree: k-means over class means, round-robin balancing, pooled statistics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import UnbalancedDataset
from .errors import RejectedInputError
from .regressor import ClassMeanTable


class DegenerateStatisticsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InheritedStats:
    mean: np.ndarray
    deviation: np.ndarray


@dataclass
class Superclass:
    id: int
    center: np.ndarray
    deviation: np.ndarray
    members: list[int]


@dataclass
class SuperclassTree:
    superclasses: list[Superclass]
    assignment: dict[int, int]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_sup(self) -> int:
        return len(self.superclasses)

    def member_counts(self) -> list[int]:
        return [len(s.members) for s in self.superclasses]

    def to_json(self) -> dict:
        return {
            "n_sup": self.n_sup,
            "assignments": {str(c): j for c, j in sorted(self.assignment.items())},
            "stats": {str(s.id): {"mu": s.center.tolist(), "sigma": s.deviation.tolist()}
                      for s in self.superclasses},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SuperclassTree":
        assignment = {int(c): int(j) for c, j in doc["assignments"].items()}
        sups = []
        for j in range(int(doc["n_sup"])):
            st = doc["stats"][str(j)]
            members = sorted(c for c, s in assignment.items() if s == j)
            sups.append(Superclass(j, np.array(st["mu"], dtype=np.float64),
                                   np.array(st["sigma"], dtype=np.float64), members))
        return cls(sups, assignment)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SuperclassTree":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++: first centre uniform, the rest with probability proportional to D^2.
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = _sq_dists(points, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            centers.append(points[rng.integers(len(points))])
        else:
            centers.append(points[rng.choice(len(points), p=d2 / total)])
    return np.array(centers)


@dataclass
class ClusterResult:
    centers: np.ndarray
    labels: np.ndarray
    cost_history: list[float]


def lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> ClusterResult:
    """k-means with k-means++ seeding. Asserts the cost never increases."""
    centers = _seed_centers(points, k, rng)
    history: list[float] = []
    labels = np.zeros(len(points), dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        labels = d2.argmin(axis=1)
        cost = float(d2[np.arange(len(points)), labels].sum())
        if history:
            assert cost <= history[-1] * (1 + 1e-12) + 1e-12, "Lloyd cost increased"
        history.append(cost)
        new = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # Re-seed an empty cluster at the worst-served point.
                far = d2[np.arange(len(points)), labels].argmax()
                new[j] = points[far]
                labels[far] = j
        if np.array_equal(new, centers):
            break
        centers = new
    return ClusterResult(centers, labels, history)


def cluster_superclasses(means: ClassMeanTable, n_sup: int, rng: np.random.Generator,
                         classes: Sequence[int] | None = None, max_iter: int = 100,
                         restarts: int = 10) -> np.ndarray:
    """Centres of the lowest-cost run among ``restarts`` seeded Lloyd runs."""
    classes = means.classes if classes is None else list(classes)
    if not 1 <= n_sup <= len(classes):
        raise RejectedInputError(f"n_sup={n_sup} must lie in [1, {len(classes)}]")
    if restarts < 1:
        raise RejectedInputError("restarts must be >= 1")
    points = means.matrix(classes)
    runs = [lloyd(points, n_sup, rng, max_iter) for _ in range(restarts)]
    # strict < keeps the earliest run on ties
    best = runs[0]
    for run in runs[1:]:
        if run.cost_history[-1] < best.cost_history[-1]:
            best = run
    return best.centers


def balance_assign(means: ClassMeanTable, centers: np.ndarray, balanced: bool = True,
                   classes: Sequence[int] | None = None) -> dict[int, int]:
    """Map classes to superclasses.

    Balanced mode runs ceil(N / N_sup) rounds; in each round every superclass,
    in ascending id order, claims its nearest still-unassigned class. Otherwise
    every class goes to its nearest centre.
    """
    classes = means.classes if classes is None else list(classes)
    d2 = _sq_dists(means.matrix(classes), centers)
    if not balanced:
        return {c: int(j) for c, j in zip(classes, d2.argmin(axis=1))}
    unassigned = np.ones(len(classes), dtype=bool)
    out: dict[int, int] = {}
    for _ in range(math.ceil(len(classes) / len(centers))):
        for j in range(len(centers)):
            if not unassigned.any():
                break
            cand = np.where(unassigned, d2[:, j], np.inf)
            i = int(cand.argmin())
            out[classes[i]] = j
            unassigned[i] = False
    return out


def superclass_stats(assignment: Mapping[int, int], dataset: UnbalancedDataset,
                     n_sup: int | None = None) -> SuperclassTree:
    """Pooled mean and population standard deviation of all member samples."""
    n_sup = (max(assignment.values()) + 1) if n_sup is None else n_sup
    sups, notes = [], []
    for j in range(n_sup):
        members = sorted(c for c, s in assignment.items() if s == j)
        if not members:
            raise RejectedInputError(f"superclass {j} has no member classes")
        xs = np.concatenate([dataset.samples_of(c) for c in members])
        mu = xs.mean(axis=0)
        if len(xs) < 2:
            sigma = np.zeros(dataset.dim)
            msg = f"superclass {j} pools {len(xs)} sample(s); deviation set to zero"
            notes.append(msg)
            warnings.warn(msg, DegenerateStatisticsWarning, stacklevel=2)
        else:
            sigma = np.sqrt(((xs - mu) ** 2).mean(axis=0))
        sups.append(Superclass(j, mu, sigma, members))
    return SuperclassTree(sups, dict(sorted(assignment.items())), notes)


def build_tree(means: ClassMeanTable, dataset: UnbalancedDataset, n_sup: int,
               rng: np.random.Generator, balanced: bool = True,
               base_only: bool = False) -> SuperclassTree:
    """Cluster, assign and pool statistics.

    With ``base_only`` only many-shot class means are clustered and balanced;
    each few-shot class is then attached to its nearest centre.
    """
    if base_only:
        base = [c for c in dataset.many_shot if c in means.entries]
        centers = cluster_superclasses(means, n_sup, rng, classes=base)
        assignment = balance_assign(means, centers, balanced, classes=base)
        novel = [c for c in means.classes if c not in assignment]
        if novel:
            assignment.update(balance_assign(means, centers, False, classes=novel))
    else:
        centers = cluster_superclasses(means, n_sup, rng)
        assignment = balance_assign(means, centers, balanced)
    return superclass_stats(assignment, dataset, n_sup)


def inherit(tree: SuperclassTree, cls: int) -> InheritedStats:
    try:
        sup = tree.superclasses[tree.assignment[cls]]
    except KeyError:
        raise KeyError(f"class {cls} is not assigned in the superclass tree") from None
    return InheritedStats(sup.center, sup.deviation)
