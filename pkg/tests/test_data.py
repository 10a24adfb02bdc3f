import numpy as np
import pytest

from statxfer.data import (Role, SyntheticSpec, UnbalancedDataset, load_embeddings, make_synthetic,
                           read_embedding_rows, read_split, sample_episode, save_embeddings)
from statxfer.errors import ParseError, RejectedInputError, SamplingError


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_two_row_dataset(tmp_path):
    ds = load_embeddings(_write(tmp_path / "e.csv", "0,1.0,2.0\n1,3.0,4.0\n"),
                         _write(tmp_path / "s.txt", "many:0\nfew:1\n"))
    assert ds.dim == 2
    assert ds.many_shot == [0] and ds.few_shot == [1]
    np.testing.assert_array_equal(ds.samples_of(1), [[3.0, 4.0]])


def test_split_tokens_may_share_a_line_and_carry_comments(tmp_path):
    roles = read_split(_write(tmp_path / "s.txt", "# header\nmany:0 few:1  # trailing\n\nmany:5\n"))
    assert roles == {0: Role.MANY, 1: Role.FEW, 5: Role.MANY}


def test_inconsistent_row_width_names_line_two(tmp_path):
    path = _write(tmp_path / "e.csv", "0,1.0,2.0\n1,3.0,4.0,5.0\n")
    with pytest.raises(ParseError) as info:
        read_embedding_rows(path)
    assert info.value.line == 2
    assert ":2:" in str(info.value)


@pytest.mark.parametrize("row", ["x,1.0", "-1,1.0", "0,abc", "0,nan", "0"])
def test_malformed_rows_are_parse_errors(tmp_path, row):
    with pytest.raises(ParseError) as info:
        read_embedding_rows(_write(tmp_path / "e.csv", f"0,1.0\n{row}\n"))
    assert info.value.line == 2


def test_split_errors(tmp_path):
    data = _write(tmp_path / "e.csv", "0,1.0\n1,2.0\n")
    with pytest.raises(ParseError):
        read_split(_write(tmp_path / "dup.txt", "many:0\nfew:0\n"))
    with pytest.raises(ParseError):
        read_split(_write(tmp_path / "bad.txt", "some:0\n"))
    with pytest.raises(ParseError):
        load_embeddings(data, _write(tmp_path / "missing.txt", "many:0\n"))
    with pytest.raises(ParseError):
        load_embeddings(data, _write(tmp_path / "extra.txt", "many:0\nfew:1\nfew:2\n"))


def test_save_load_roundtrip(tmp_path):
    ds, _ = make_synthetic(SyntheticSpec(dim=5, n_superclasses=2, classes_per_superclass=3, n_few_classes=2,
                                         many_shots=7, few_shots=2, seed=3))
    save_embeddings(ds, tmp_path / "e.csv", tmp_path / "s.txt")
    again = load_embeddings(tmp_path / "e.csv", tmp_path / "s.txt")
    assert again == ds
    assert again.features.tobytes() == ds.features.tobytes()


def test_dataset_is_immutable_and_partitioned():
    ds = UnbalancedDataset(np.zeros((3, 2)), [0, 1, 1], {0: Role.MANY, 1: Role.FEW})
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    assert set(ds.many_shot) | set(ds.few_shot) == set(ds.classes)
    assert not set(ds.many_shot) & set(ds.few_shot)


def test_dataset_rejects_empty_or_unregistered_classes():
    with pytest.raises(RejectedInputError):
        UnbalancedDataset(np.zeros((2, 2)), [0, 0], {0: Role.MANY, 1: Role.FEW})
    with pytest.raises(RejectedInputError):
        UnbalancedDataset(np.zeros((2, 2)), [0, 2], {0: Role.MANY})


def test_truncate_few_shot_keeps_many_shot_classes():
    ds, _ = make_synthetic(SyntheticSpec(dim=3, n_superclasses=2, classes_per_superclass=2, n_few_classes=1,
                                         many_shots=6, few_shots=5, seed=0))
    t = ds.truncate_few_shot(2)
    for c in ds.classes:
        assert t.count(c) == (2 if c in ds.few_shot else 6)


# -- synthetic -----------------------------------------------------------------

def test_zero_deviation_samples_equal_class_means():
    ds, truth = make_synthetic(SyntheticSpec(deviation=0.0, seed=1))
    for c in ds.classes:
        assert np.all(ds.samples_of(c) == truth.class_means[c])


def test_synthetic_is_deterministic():
    a, ta = make_synthetic(SyntheticSpec(seed=5, anisotropy_superclass=1.0, heldout_per_class=3))
    b, tb = make_synthetic(SyntheticSpec(seed=5, anisotropy_superclass=1.0, heldout_per_class=3))
    assert a.features.tobytes() == b.features.tobytes()
    assert ta.heldout.features.tobytes() == tb.heldout.features.tobytes()


def test_empirical_means_converge_to_true_means():
    spec = SyntheticSpec(dim=16, superclass_scale=10, class_scale=1, deviation=0.2, many_shots=500, seed=2)
    ds, truth = make_synthetic(spec)
    for c in ds.many_shot:
        assert np.linalg.norm(ds.samples_of(c).mean(axis=0) - truth.class_means[c]) < 0.1


def test_superclass_noise_shape_is_shared():
    ds, truth = make_synthetic(SyntheticSpec(anisotropy_superclass=1.0, many_shots=2000, n_few_classes=0, seed=4))
    for c in ds.classes:
        sd = ds.samples_of(c).std(axis=0)
        np.testing.assert_allclose(sd, truth.deviations[truth.superclass_of[c]], rtol=0.1)


def test_nearest_center_recovers_membership_without_noise():
    ds, truth = make_synthetic(SyntheticSpec(deviation=0.0, superclass_scale=100.0, class_scale=1.0, seed=9))
    for c in ds.classes:
        d = np.linalg.norm(truth.superclass_centers - truth.class_means[c], axis=1)
        assert int(d.argmin()) == truth.superclass_of[c]


def test_long_tailed_counts():
    ds, truth = make_synthetic(SyntheticSpec(pareto_alpha=1.0, min_shots=1, many_shots=300, few_shots=5, seed=0))
    counts = np.array([ds.count(c) for c in ds.classes])
    assert counts.min() >= 1 and counts.max() <= 300
    assert set(ds.few_shot) == {c for c in ds.classes if ds.count(c) <= 5}


@pytest.mark.parametrize("kwargs", [{"superclass_scale": 1.0, "class_scale": 2.0}, {"many_shots": 0},
                                    {"deviation": -1.0}, {"n_few_classes": 40}])
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(RejectedInputError):
        make_synthetic(SyntheticSpec(**kwargs))


# -- episodes ------------------------------------------------------------------

def _toy(counts):
    feats, labels = [], []
    for c, m in enumerate(counts):
        feats.append(np.full((m, 2), float(c)) + np.arange(m)[:, None] * 0.01)
        labels += [c] * m
    return UnbalancedDataset(np.concatenate(feats), labels, {c: Role.MANY for c in range(len(counts))})


def test_single_sample_class_gives_one_support_and_no_query():
    ds = _toy([1, 8, 8])
    ep = sample_episode(ds, 5, 3, 0, np.random.default_rng(0))
    assert len(ep.support[0]) == 1


def test_class_without_query_candidates_is_a_sampling_error():
    ds = _toy([1, 8, 8])
    with pytest.raises(SamplingError, match="class 0"):
        sample_episode(ds, 5, 3, 2, np.random.default_rng(0))


def test_too_few_classes():
    with pytest.raises(SamplingError):
        sample_episode(_toy([4, 4]), 1, 3, 1, np.random.default_rng(0))


def test_support_and_query_are_disjoint_over_many_episodes():
    ds = _toy([10] * 8)
    rng = np.random.default_rng(1)
    for _ in range(200):
        ep = sample_episode(ds, 3, 4, 5, rng)
        used = np.concatenate(list(ep.support_idx.values()))
        assert not np.intersect1d(used, ep.query_idx).size
        assert all(len(v) <= 3 for v in ep.support.values())
        assert set(ep.query_labels.tolist()) <= set(ep.support)


def test_class_frequency_is_uniform():
    ds = _toy([4] * 20)
    rng = np.random.default_rng(2024)
    hits = np.zeros(20)
    for _ in range(1000):
        ep = sample_episode(ds, 1, 5, 1, rng)
        hits[ep.classes] += 1
    freq = hits / 1000
    assert np.all(np.abs(freq - 0.25) <= 0.05)
