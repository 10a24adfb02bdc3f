"""Datasets of labelled embeddings, CSV ingestion, episode sampling, synthetic benchmarks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, RejectedInputError, SamplingError


class Role(enum.Enum):
    MANY = "many"
    FEW = "few"


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


class UnbalancedDataset:
    """Immutable collection of labelled feature vectors with a many/few class partition."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, roles: Mapping[int, Role]):
        features = np.array(features, dtype=np.float64, copy=True)
        labels = np.array(labels, dtype=np.int64, copy=True)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise RejectedInputError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(features)):
            raise RejectedInputError("features must be finite")
        roles = {int(c): Role(r) for c, r in roles.items()}
        present = set(np.unique(labels).tolist())
        if present != set(roles):
            missing = sorted(set(roles) - present)
            unknown = sorted(present - set(roles))
            raise RejectedInputError(f"class registry mismatch (empty: {missing}, unregistered: {unknown})")
        if any(c < 0 for c in roles):
            raise RejectedInputError("class ids must be non-negative")
        features.flags.writeable = False
        labels.flags.writeable = False
        self.features = features
        self.labels = labels
        self.roles = dict(sorted(roles.items()))
        self._index = {c: np.flatnonzero(labels == c) for c in self.roles}

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> list[int]:
        return list(self.roles)

    @property
    def many_shot(self) -> list[int]:
        return [c for c, r in self.roles.items() if r is Role.MANY]

    @property
    def few_shot(self) -> list[int]:
        return [c for c, r in self.roles.items() if r is Role.FEW]

    def indices_of(self, cls: int) -> np.ndarray:
        return self._index[cls]

    def samples_of(self, cls: int) -> np.ndarray:
        return self.features[self._index[cls]]

    def count(self, cls: int) -> int:
        return len(self._index[cls])

    def labeled(self, cls: int) -> list[LabeledSample]:
        return [LabeledSample(x, cls) for x in self.samples_of(cls)]

    def truncate_few_shot(self, n: int) -> "UnbalancedDataset":
        """Keep only the first ``n`` samples of every few-shot class."""
        keep = np.ones(len(self.labels), dtype=bool)
        for c in self.few_shot:
            keep[self._index[c][n:]] = False
        return UnbalancedDataset(self.features[keep], self.labels[keep], self.roles)

    def subset_classes(self, classes: Iterable[int]) -> "UnbalancedDataset":
        classes = set(classes)
        keep = np.isin(self.labels, sorted(classes))
        return UnbalancedDataset(self.features[keep], self.labels[keep],
                                 {c: r for c, r in self.roles.items() if c in classes})

    def with_features(self, features: np.ndarray) -> "UnbalancedDataset":
        return UnbalancedDataset(features, self.labels, self.roles)

    def __eq__(self, other):
        if not isinstance(other, UnbalancedDataset):
            return NotImplemented
        return (self.roles == other.roles and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features))

    def __repr__(self):
        return (f"UnbalancedDataset(n={len(self.labels)}, d={self.dim}, "
                f"many={len(self.many_shot)}, few={len(self.few_shot)})")


# -- CSV ingestion -----------------------------------------------------------

def _parse_label(text: str, path, lineno: int) -> int:
    text = text.strip()
    if not text.isdigit():
        raise ParseError(path, lineno, f"label {text!r} is not a non-negative integer")
    return int(text)


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def read_embedding_rows(path: str | Path, extra_columns: int = 0
                        ) -> tuple[np.ndarray, np.ndarray, list[list[str]]]:
    """Parse ``label,f_0,...,f_{d-1}[,extra...]`` rows; returns features, labels and extras."""
    path = Path(path)
    labels, rows, extras = [], [], []
    dim = None
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if extra_columns:
            extras.append([c.strip() for c in cells[-extra_columns:]])
            cells = cells[:-extra_columns]
        if len(cells) < 2:
            raise ParseError(path, lineno, "row needs a label and at least one feature")
        label = _parse_label(cells[0], path, lineno)
        try:
            feats = [float(c) for c in cells[1:]]
        except ValueError:
            raise ParseError(path, lineno, "feature is not a decimal number") from None
        if not all(np.isfinite(feats)):
            raise ParseError(path, lineno, "non-finite feature")
        if dim is None:
            dim = len(feats)
        elif len(feats) != dim:
            raise ParseError(path, lineno, f"expected {dim} features, found {len(feats)}")
        labels.append(label)
        rows.append(feats)
    if not rows:
        raise ParseError(path, 0, "no data rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), extras


def read_split(path: str | Path) -> dict[int, Role]:
    path = Path(path)
    roles: dict[int, Role] = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            kind, sep, cls = token.partition(":")
            if not sep or kind not in ("many", "few"):
                raise ParseError(path, lineno, f"expected many:<id> or few:<id>, got {token!r}")
            c = _parse_label(cls, path, lineno)
            if c in roles:
                raise ParseError(path, lineno, f"class {c} listed more than once")
            roles[c] = Role(kind)
    return roles


def load_embeddings(data_path: str | Path, split_path: str | Path) -> UnbalancedDataset:
    features, labels, _ = read_embedding_rows(data_path)
    roles = read_split(split_path)
    for row, label in enumerate(labels.tolist()):
        if label not in roles:
            raise ParseError(split_path, 0, f"class {label} (data row {row + 1}) missing from split file")
    present = set(labels.tolist())
    for c in roles:
        if c not in present:
            raise ParseError(split_path, 0, f"class {c} in split file has no samples")
    return UnbalancedDataset(features, labels, roles)


def format_row(label: int, features: np.ndarray, extra: Sequence[str] = ()) -> str:
    return ",".join([str(int(label)), *(repr(float(v)) for v in features), *extra])


def save_embeddings(dataset: UnbalancedDataset, data_path: str | Path, split_path: str | Path) -> None:
    with Path(data_path).open("w", encoding="utf-8", newline="\n") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(format_row(y, x) + "\n")
    with Path(split_path).open("w", encoding="utf-8", newline="\n") as fh:
        for c, role in dataset.roles.items():
            fh.write(f"{role.value}:{c}\n")


# -- episodes ----------------------------------------------------------------

@dataclass
class Episode:
    """Support sets per class plus a query set, both referencing dataset rows."""
    support_idx: dict[int, np.ndarray]
    query_idx: np.ndarray
    support: dict[int, np.ndarray]
    query: np.ndarray
    query_labels: np.ndarray

    @property
    def classes(self) -> list[int]:
        return list(self.support)

    def check(self, n: int) -> None:
        """Assert the episode invariants."""
        used = np.concatenate(list(self.support_idx.values()))
        assert all(len(v) <= n for v in self.support_idx.values()), "support exceeds n shots"
        assert len(np.intersect1d(used, self.query_idx)) == 0, "support and query overlap"
        assert set(self.query_labels.tolist()) <= set(self.support), "query label without support"


def sample_episode(dataset: UnbalancedDataset, n: int, class_count: int, query_per_class: int,
                   rng: np.random.Generator, classes: Sequence[int] | None = None) -> Episode:
    """Draw ``class_count`` classes uniformly, then up to ``n`` support and
    ``query_per_class`` query samples from each (support is filled first)."""
    pool = list(dataset.classes if classes is None else classes)
    if n < 1 or class_count < 1:
        raise SamplingError("n and class_count must be positive")
    if len(pool) < class_count:
        raise SamplingError(f"need {class_count} classes, only {len(pool)} available")
    chosen = sorted(rng.choice(pool, size=class_count, replace=False).tolist())
    support_idx, query_parts, label_parts = {}, [], []
    for c in chosen:
        idx = rng.permutation(dataset.indices_of(c))
        k = min(n, len(idx))
        if query_per_class > 0 and len(idx) - k < 1:
            raise SamplingError(f"class {c} has no samples left for the query set")
        support_idx[c] = idx[:k]
        q = idx[k:k + query_per_class]
        query_parts.append(q)
        label_parts.append(np.full(len(q), c, dtype=np.int64))
    query_idx = np.concatenate(query_parts) if query_parts else np.empty(0, dtype=np.int64)
    ep = Episode(
        support_idx=support_idx,
        query_idx=query_idx,
        support={c: dataset.features[i] for c, i in support_idx.items()},
        query=dataset.features[query_idx],
        query_labels=np.concatenate(label_parts) if label_parts else np.empty(0, dtype=np.int64),
    )
    ep.check(n)
    return ep


# -- synthetic benchmark -----------------------------------------------------

@dataclass
class SyntheticSpec:
    """Hierarchical Gaussian world: superclass centres, class centres, per-superclass noise.

    Within-class noise is diagonal with standard deviation
    ``deviation * exp(global_profile + superclass_profile)``; the two log-profiles
    are drawn from ``N(0, anisotropy_global^2)`` and ``N(0, anisotropy_superclass^2)``
    so that classes in one superclass share their noise shape. Both spreads at
    zero give isotropic noise of scale ``deviation``.
    """
    dim: int = 16
    n_superclasses: int = 8
    classes_per_superclass: int = 5
    superclass_scale: float = 10.0
    class_scale: float = 1.5
    deviation: float | Sequence[float] = 0.6
    anisotropy_global: float = 0.0
    anisotropy_superclass: float = 0.0
    n_few_classes: int = 10
    many_shots: int = 200
    few_shots: int = 5
    heldout_per_class: int = 0
    pareto_alpha: float | None = None
    min_shots: int = 1
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.n_superclasses * self.classes_per_superclass

    def validate(self) -> None:
        if not self.superclass_scale > self.class_scale > 0:
            raise RejectedInputError("need superclass_scale > class_scale > 0")
        if min(self.many_shots, self.few_shots, self.min_shots) < 1:
            raise RejectedInputError("shot counts must be >= 1")
        if not 0 <= self.n_few_classes < self.n_classes:
            raise RejectedInputError("n_few_classes must leave at least one many-shot class")
        dev = np.asarray(self.deviation, dtype=np.float64)
        if np.any(dev < 0):
            raise RejectedInputError("deviation must be non-negative")
        if dev.ndim == 1 and dev.shape[0] not in (self.dim,):
            raise RejectedInputError("vector deviation must have length dim")
        if dev.ndim == 2 and dev.shape != (self.n_superclasses, self.dim):
            raise RejectedInputError("matrix deviation must be (n_superclasses, dim)")
        if self.pareto_alpha is not None and self.pareto_alpha <= 0:
            raise RejectedInputError("pareto_alpha must be positive")


@dataclass
class GroundTruth:
    class_means: dict[int, np.ndarray]
    superclass_of: dict[int, int]
    superclass_centers: np.ndarray
    deviations: np.ndarray
    heldout: UnbalancedDataset | None = None
    shot_counts: dict[int, int] = field(default_factory=dict)

    def membership(self, classes: Sequence[int]) -> list[int]:
        return [self.superclass_of[c] for c in classes]


def _shot_counts(spec: SyntheticSpec, rng: np.random.Generator, few: set[int]) -> dict[int, int]:
    if spec.pareto_alpha is None:
        return {c: spec.few_shots if c in few else spec.many_shots for c in range(spec.n_classes)}
    # Long-tailed counts: Pareto(alpha) tail scaled from min_shots, capped at many_shots.
    raw = spec.min_shots * (1.0 + rng.pareto(spec.pareto_alpha, size=spec.n_classes))
    counts = np.clip(np.floor(raw), spec.min_shots, spec.many_shots).astype(int)
    return {c: int(counts[c]) for c in range(spec.n_classes)}


def make_synthetic(spec: SyntheticSpec) -> tuple[UnbalancedDataset, GroundTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, S, K = spec.dim, spec.n_superclasses, spec.classes_per_superclass
    sup_centers = spec.superclass_scale * rng.standard_normal((S, d))
    dev = np.asarray(spec.deviation, dtype=np.float64)
    base = np.broadcast_to(dev, (S, d)) if dev.ndim < 2 else dev
    profile = (spec.anisotropy_global * rng.standard_normal(d)[None, :]
               + spec.anisotropy_superclass * rng.standard_normal((S, d)))
    deviations = base * np.exp(profile)

    class_means, superclass_of = {}, {}
    for j in range(S):
        offsets = spec.class_scale * rng.standard_normal((K, d))
        for k in range(K):
            c = j * K + k
            class_means[c] = sup_centers[j] + offsets[k]
            superclass_of[c] = j

    few = set(rng.choice(spec.n_classes, size=spec.n_few_classes, replace=False).tolist())
    counts = _shot_counts(spec, rng, few)
    if spec.pareto_alpha is not None:
        few = {c for c, m in counts.items() if m <= spec.few_shots}
        if len(few) == spec.n_classes:
            raise RejectedInputError("long-tail draw produced no many-shot class")

    def draw(per_class: Mapping[int, int]):
        feats, labs = [], []
        for c in range(spec.n_classes):
            m = per_class[c]
            noise = rng.standard_normal((m, d)) * deviations[superclass_of[c]]
            feats.append(class_means[c] + noise)
            labs.append(np.full(m, c))
        return np.concatenate(feats), np.concatenate(labs)

    roles = {c: (Role.FEW if c in few else Role.MANY) for c in range(spec.n_classes)}
    x, y = draw(counts)
    dataset = UnbalancedDataset(x, y, roles)
    heldout = None
    if spec.heldout_per_class > 0:
        hx, hy = draw({c: spec.heldout_per_class for c in range(spec.n_classes)})
        heldout = UnbalancedDataset(hx, hy, roles)
    truth = GroundTruth(class_means, superclass_of, sup_centers, deviations, heldout, counts)
    return dataset, truth
