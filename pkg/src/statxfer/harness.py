"""End-to-end experiment runner: data -> regressor -> superclass tree -> generator -> evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import baselines
from .config import METHODS, ExperimentConfig
from .data import (GroundTruth, SyntheticSpec, UnbalancedDataset, format_row, load_embeddings,
                   make_synthetic, read_embedding_rows)
from .errors import DataError, EvaluationSetupError, StatXferError
from .hierarchy import SuperclassTree, build_tree
from .metagen import (AugmentedSet, GeneratorModel, InnerConfig, MetaTestConfig, MetaTrainConfig,
                      StatsProvider, augment, init_generator, meta_test, meta_train, score, tree_stats)
from .numerics import save_model
from .projection import project_2d
from .regressor import ClassMeanTable, RegressorConfig, RegressorModel, build_mean_table, train_regressor

log = logging.getLogger(__name__)

_STAGES = {"regressor": 1, "tree": 2, "generator": 3, "meta": 4, "battery": 5, "eval": 6}
_GENERATIVE = ("ours", "hallucination", "knn_transfer")


class StageError(StatXferError):
    def __init__(self, stage: str, seed: int, cause: Exception):
        self.stage = stage
        self.seed = seed
        super().__init__(f"stage {stage!r} failed for seed {seed}: {cause}")


def stage_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    """Independent stream per (seed, stage, ...) so toggling one stage leaves the others untouched."""
    return np.random.default_rng([seed, _STAGES[stage], *extra])


@dataclass
class Standardizer:
    shift: np.ndarray
    scale: float

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        shift = x.mean(axis=0)
        scale = float(np.sqrt(np.mean((x - shift) ** 2))) or 1.0
        return cls(shift, scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), 1.0)

    def __call__(self, ds: UnbalancedDataset) -> UnbalancedDataset:
        return ds.with_features((ds.features - self.shift) / self.scale)


@dataclass
class SeedData:
    train: UnbalancedDataset
    test: UnbalancedDataset
    truth: GroundTruth | None = None


def synthetic_spec(config: ExperimentConfig, seed: int) -> SyntheticSpec:
    s = config.synthetic
    kwargs = dataclasses.asdict(s)
    kwargs["pareto_alpha"] = s.pareto_alpha or None
    return SyntheticSpec(**kwargs, few_shots=max(config.experiment.shots), seed=seed)


def prepare_data(config: ExperimentConfig, seed: int) -> SeedData:
    if config.synthetic is not None:
        train, truth = make_synthetic(synthetic_spec(config, seed))
        test = truth.heldout
    else:
        train = load_embeddings(config.data.embeddings, config.data.split)
        x, y, _ = read_embedding_rows(config.data.test_embeddings)
        unknown = set(y.tolist()) - set(train.roles)
        if unknown:
            raise DataError(f"test embeddings contain unknown classes {sorted(unknown)}")
        if x.shape[1] != train.dim:
            raise DataError("test embeddings dimension differs from training embeddings")
        test = UnbalancedDataset(x, y, {c: r for c, r in train.roles.items() if c in set(y.tolist())})
        truth = None
    std = Standardizer.fit(train.features) if config.experiment.standardize else Standardizer.identity(train.dim)
    return SeedData(std(train), std(test), truth)


def n_superclasses(config: ExperimentConfig) -> int:
    if config.experiment.n_sup > 0:
        return config.experiment.n_sup
    return config.synthetic.n_superclasses


def regressor_config(config: ExperimentConfig) -> RegressorConfig:
    o, r = config.optimizer, config.regressor
    return RegressorConfig(hidden_mult=r.hidden_mult, slope=r.slope, epochs=r.epochs, batch_size=r.batch_size,
                           learning_rate=o.learning_rate, momentum=o.momentum, weight_decay=o.weight_decay,
                           factor=o.factor)


def meta_train_config(config: ExperimentConfig, n: int) -> MetaTrainConfig:
    e, o, m = config.experiment, config.optimizer, config.meta
    return MetaTrainConfig(
        n=n, n_aug=e.n_aug, classes_per_episode=e.classes_per_episode, query_per_class=m.query_per_class,
        inner=InnerConfig(steps=m.inner_steps, learning_rate=m.inner_lr, momentum=m.inner_momentum,
                          weight_decay=m.inner_weight_decay),
        outer_lr=m.outer_lr, outer_momentum=o.momentum, outer_weight_decay=o.weight_decay,
        outer_factor=o.factor, iterations=m.iterations, first_order=m.first_order, grad_clip=m.grad_clip)


def meta_test_config(config: ExperimentConfig) -> MetaTestConfig:
    o = config.optimizer
    return MetaTestConfig(config.experiment.n_aug, InnerConfig(
        steps=config.evaluation.inner_steps, learning_rate=o.learning_rate, momentum=o.momentum,
        weight_decay=o.weight_decay, factor=o.factor, milestones=tuple(o.milestones)))


@dataclass
class BatteryEpisode:
    support: dict[int, np.ndarray]
    query: np.ndarray
    query_labels: np.ndarray


def build_battery(train: UnbalancedDataset, test: UnbalancedDataset, config: ExperimentConfig,
                  rng: np.random.Generator) -> list[BatteryEpisode]:
    """Fixed evaluation episodes over few-shot classes: all of a class's training
    shots as support, held-out samples as queries."""
    e = config.experiment
    pool = [c for c in train.few_shot if c in test.roles]
    if len(pool) < e.classes_per_episode:
        raise EvaluationSetupError(
            f"{len(pool)} few-shot classes with test data, episodes need {e.classes_per_episode}")
    battery = []
    for _ in range(e.episodes):
        chosen = sorted(rng.choice(pool, size=e.classes_per_episode, replace=False).tolist())
        q_parts, l_parts = [], []
        for c in chosen:
            idx = test.indices_of(c)
            pick = rng.choice(idx, size=min(e.query_per_class, len(idx)), replace=False)
            q_parts.append(test.features[pick])
            l_parts.append(np.full(len(pick), c))
        battery.append(BatteryEpisode({c: train.samples_of(c) for c in chosen},
                                      np.concatenate(q_parts), np.concatenate(l_parts)))
    return battery


def stats_provider(method: str, tree: SuperclassTree, means: ClassMeanTable, train: UnbalancedDataset,
                   config: ExperimentConfig) -> StatsProvider:
    if method == "knn_transfer":
        return baselines.knn_stats_provider(means, train, config.experiment.knn_k)
    return tree_stats(tree)


def train_generator(method: str, train: UnbalancedDataset, stats: StatsProvider, config: ExperimentConfig,
                    seed: int, n: int) -> tuple[GeneratorModel, list[float]]:
    g = config.generator
    G = init_generator(train.dim, g.noise_dim, stage_rng(seed, "generator", n), g.hidden_mult, g.slope,
                       mask_stats=(method == "hallucination"))
    return meta_train(G, train, stats, meta_train_config(config, n), stage_rng(seed, "meta", n))


def evaluate(method: str, G: GeneratorModel | None, battery: Sequence[BatteryEpisode],
             stats: StatsProvider | None, config: ExperimentConfig, seed: int, n: int) -> tuple[float, int]:
    correct = 0
    total = 0
    rng = stage_rng(seed, "eval", n)
    tcfg = meta_test_config(config)
    for ep in battery:
        if method == "prototypical":
            clf = baselines.PrototypeClassifier.from_support(ep.support)
            res = score(clf.predict(ep.query), ep.query_labels)
        else:
            res = meta_test(G, ep.support, ep.query, ep.query_labels, stats, tcfg, rng)
        correct += round(res.accuracy * res.queries)
        total += res.queries
    return correct / total, total


@dataclass
class SeedArtifacts:
    regressor: RegressorModel | None = None
    trees: dict[int, SuperclassTree] = field(default_factory=dict)
    means: dict[int, ClassMeanTable] = field(default_factory=dict)
    generators: dict[tuple[str, int], GeneratorModel] = field(default_factory=dict)
    meta_losses: dict[tuple[str, int], list[float]] = field(default_factory=dict)
    showcase: AugmentedSet | None = None
    showcase_query: tuple[np.ndarray, np.ndarray] | None = None


def _stage(name: str, seed: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StatXferError, AssertionError, FloatingPointError, ValueError) as exc:
        if isinstance(exc, (StageError, DataError)):
            raise
        raise StageError(name, seed, exc) from exc


def run_seed(config: ExperimentConfig, seed: int, data: SeedData | None = None
             ) -> tuple[list[dict[str, Any]], SeedArtifacts]:
    e = config.experiment
    data = data or prepare_data(config, seed)
    art = SeedArtifacts()
    needs_tree = any(m in _GENERATIVE for m in e.methods)
    if needs_tree and e.use_regressor and data.train.few_shot:
        art.regressor = _stage("regressor", seed, train_regressor, data.train, regressor_config(config),
                               stage_rng(seed, "regressor"))
    rows = []
    for n in e.shots:
        train = data.train.truncate_few_shot(n)
        battery = build_battery(train, data.test, config, stage_rng(seed, "battery", n))
        tree = means = None
        if needs_tree:
            means = build_mean_table(train, art.regressor, use_regressor=e.use_regressor)
            tree = _stage("tree", seed, build_tree, means, train, n_superclasses(config),
                          stage_rng(seed, "tree", n), e.balanced, e.base_only_tree)
            art.trees[n], art.means[n] = tree, means
        for method in e.methods:
            start = time.perf_counter()
            G = stats = None
            if method in _GENERATIVE:
                stats = stats_provider(method, tree, means, train, config)
                G, losses = _stage("meta-train", seed, train_generator, method, train, stats, config, seed, n)
                art.generators[(method, n)] = G
                art.meta_losses[(method, n)] = losses
                if method == "ours" and art.showcase is None:
                    ep = battery[0]
                    art.showcase = augment(G, ep.support, stats, e.n_aug, stage_rng(seed, "eval", n, 1))
                    art.showcase_query = (ep.query, ep.query_labels)
            acc, queries = _stage("evaluate", seed, evaluate, method, G, battery, stats, config, seed, n)
            elapsed = time.perf_counter() - start
            log.info("seed=%d n=%d method=%s accuracy=%.4f (%.1fs)", seed, n, method, acc, elapsed)
            rows.append({"method": method, "n": n, "seed": seed, "accuracy": acc, "queries": queries,
                         "seconds": round(elapsed, 3) if e.record_timing else None})
    return rows, art


@dataclass
class MetricsReport:
    config: dict[str, Any]
    rows: list[dict[str, Any]]
    aggregates: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    def to_json(self) -> dict[str, Any]:
        return {"config": self.config, "rows": self.rows, "aggregates": self.aggregates}

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "MetricsReport":
        return cls(doc["config"], doc["rows"], doc["aggregates"])

    def mean(self, method: str, n: int) -> float:
        for agg in self.aggregates:
            if agg["method"] == method and agg["n"] == n:
                return agg["mean"]
        raise KeyError((method, n))


def aggregate(rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean and sample standard deviation across seeds per (method, n)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["n"]), []).append(r["accuracy"])
    out = []
    for (method, n), accs in groups.items():
        a = np.array(accs)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        out.append({"method": method, "n": n, "mean": float(a.mean()), "std": std})
    return out


def _row_key(config: ExperimentConfig):
    order = {m: i for i, m in enumerate(config.experiment.methods)}
    return lambda r: (order.get(r["method"], len(METHODS)), r["n"], r["seed"])


def run_experiment(config: ExperimentConfig, artifacts: dict[int, SeedArtifacts] | None = None) -> MetricsReport:
    """Run every seed in order. Per-seed artifacts are stored into ``artifacts`` when given."""
    config.validate()
    rows = []
    for seed in config.experiment.seeds:
        seed_rows, art = run_seed(config, seed)
        rows.extend(seed_rows)
        if artifacts is not None:
            artifacts[seed] = art
    rows.sort(key=_row_key(config))
    return MetricsReport(config.to_dict(), rows)


def save_artifacts(artifacts: dict[int, SeedArtifacts], out_dir: str | Path) -> None:
    root = Path(out_dir) / "models"
    for seed, art in artifacts.items():
        seed_dir = root / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        if art.regressor is not None:
            save_model(seed_dir / "regressor.paug", art.regressor.net, b"R")
        for n, tree in art.trees.items():
            d = seed_dir / f"n{n}"
            d.mkdir(exist_ok=True)
            tree.save(d / "tree.json")
        for (method, n), G in art.generators.items():
            d = seed_dir / f"n{n}"
            d.mkdir(exist_ok=True)
            save_model(d / f"generator_{method}.paug", G.net, b"G", G.noise_dim)


def write_augmented_csv(aug: AugmentedSet, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for x, y, g in zip(aug.features, aug.labels, aug.generated):
            fh.write(format_row(y, x, ("gen" if g else "seed",)) + "\n")


def emit_report(report: MetricsReport, out_dir: str | Path, artifacts: dict[int, SeedArtifacts] | None = None,
                figures: bool = True, projection: bool = True) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        p = out / "metrics.json"
        p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=False) + "\n", encoding="utf-8")
        written.append(p)
        p = out / "metrics.csv"
        with p.open("w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "n", "seed", "accuracy", "queries", "seconds"],
                               lineterminator="\n")
            w.writeheader()
            for r in report.rows:
                w.writerow({**r, "accuracy": repr(float(r["accuracy"])),
                            "seconds": "" if r["seconds"] is None else r["seconds"]})
        written.append(p)
        showcase = None
        if artifacts:
            first = next(iter(artifacts.values()))
            if first.showcase is not None:
                showcase = first
        if projection and showcase is not None:
            p = out / "augmented.csv"
            write_augmented_csv(showcase.showcase, p)
            written.append(p)
            aug = showcase.showcase
            qx, qy = showcase.showcase_query
            feats = np.concatenate([aug.features, qx])
            labels = np.concatenate([aug.labels, qy])
            prov = ["gen" if g else "seed" for g in aug.generated] + ["real"] * len(qy)
            proj = project_2d(feats, labels, prov)
            p = out / "projection.csv"
            proj.to_csv(p)
            written.append(p)
        if figures:
            from . import plotting
            written.extend(plotting.render_report(report, out))
            if projection and showcase is not None:
                written.append(plotting.render_projection(proj, out / "projection.png"))
    except OSError as exc:
        raise DataError(f"cannot write report to {out}: {exc}") from exc
    return written
