import numpy as np
import pytest

from statxfer.data import Role, SyntheticSpec, UnbalancedDataset, make_synthetic, sample_episode
from statxfer.errors import EvaluationSetupError, RejectedInputError
from statxfer.hierarchy import InheritedStats
from statxfer.metagen import (ClassifierModel, GeneratorModel, InnerConfig, MetaTestConfig, MetaTrainConfig,
                              augment, fit_classifier, generate, init_classifier, init_generator,
                              meta_loss_and_grad, meta_test, meta_train, outer_step)
from statxfer.numerics import IDENTITY, Layer, MlpModel, cross_entropy_batch

from _oracles import central_diff, rel_err


def _const_stats(d, mu=0.0, sd=1.0):
    s = InheritedStats(np.full(d, mu), np.full(d, sd))
    return lambda cls, support: s


def _stub_generator(d, dz):
    w = np.zeros((d, 3 * d + dz))
    w[:, :d] = np.eye(d)
    return GeneratorModel(MlpModel([Layer(w, np.zeros(d), IDENTITY)]), d, dz)


# -- generate ------------------------------------------------------------------

def test_output_has_feature_dimension():
    G = init_generator(6, 3, np.random.default_rng(0))
    out = generate(G, np.ones(6), InheritedStats(np.zeros(6), np.ones(6)), rng=np.random.default_rng(1))
    assert out.shape == (6,)


def test_stub_generator_returns_seed():
    G = _stub_generator(4, 2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(4)
    for _ in range(5):
        st = InheritedStats(rng.standard_normal(4), rng.random(4))
        np.testing.assert_array_equal(generate(G, x, st, rng=rng), x)


def test_generate_rejects_bad_dimensions():
    G = init_generator(3, 2, np.random.default_rng(0))
    st = InheritedStats(np.zeros(3), np.ones(3))
    with pytest.raises(RejectedInputError):
        generate(G, np.ones(4), st, z=np.zeros(2))
    with pytest.raises(RejectedInputError):
        generate(G, np.ones(3), st, z=np.zeros(3))
    with pytest.raises(RejectedInputError):
        generate(G, np.ones(3), InheritedStats(np.zeros(2), np.ones(3)), z=np.zeros(2))


def test_input_layout_is_x_mu_sigma_z():
    G = init_generator(2, 1, np.random.default_rng(0))
    row = G.build_input([1, 2], [3, 4], [5, 6], [7])
    assert row.tolist() == [1, 2, 3, 4, 5, 6, 7]
    masked = GeneratorModel(G.net, 2, 1, mask_stats=True).build_input([1, 2], [3, 4], [5, 6], [7])
    assert masked.tolist() == [1, 2, 0, 0, 0, 0, 7]


def test_fresh_generator_roughly_returns_its_seed():
    G = init_generator(16, 8, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200, 16))
    out = G.forward(x, np.zeros(16), np.ones(16), rng.standard_normal((200, 8)))[0]
    assert np.mean(np.linalg.norm(out - x, axis=1)) < 0.5 * np.mean(np.linalg.norm(x, axis=1))


def test_noise_draws_give_distinct_outputs():
    ds, _ = make_synthetic(SyntheticSpec(seed=0))
    cfg = MetaTrainConfig(iterations=30)
    G, _ = meta_train(init_generator(ds.dim, 8, np.random.default_rng(0)), ds, _const_stats(ds.dim), cfg,
                      np.random.default_rng(1))
    rng = np.random.default_rng(2)
    x, st = ds.features[0], InheritedStats(np.zeros(ds.dim), np.ones(ds.dim))
    distinct = sum(np.linalg.norm(generate(G, x, st, rng=rng) - generate(G, x, st, rng=rng)) > 0
                   for _ in range(100))
    assert distinct >= 99


# -- augment -------------------------------------------------------------------

def _support(counts, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return {c: rng.standard_normal((k, d)) + 3 * c for c, k in enumerate(counts)}


def test_mixed_seed_counts_balance_to_n_aug():
    support = _support([1, 1, 2, 3, 5])
    G = init_generator(3, 2, np.random.default_rng(0))
    aug = augment(G, support, _const_stats(3), 5, np.random.default_rng(1))
    assert len(aug.labels) == 25
    for c, seeds in support.items():
        assert len(aug.per_class(c)) == 5
        assert int(aug.generated[aug.labels == c].sum()) == 5 - len(seeds)


def test_full_class_passes_seeds_through():
    support = _support([4])
    aug = augment(None, support, None, 4, np.random.default_rng(0))
    assert not aug.generated.any()
    np.testing.assert_array_equal(aug.per_class(0), support[0])


def test_too_many_seeds_rejected():
    with pytest.raises(RejectedInputError):
        augment(init_generator(3, 2, np.random.default_rng(0)), _support([6]), _const_stats(3), 5,
                np.random.default_rng(0))


def test_generated_rows_come_from_own_seeds():
    # the stub copies its seed, so every generated row must be one of its class's seeds
    support = _support([2, 3, 1], d=4)
    aug = augment(_stub_generator(4, 2), support, _const_stats(4), 7, np.random.default_rng(5))
    for c, seeds in support.items():
        for row in aug.features[(aug.labels == c) & aug.generated]:
            assert any(np.array_equal(row, s) for s in seeds)


def test_augment_uses_class_stats():
    seen = []

    def stats(cls, support):
        seen.append(cls)
        return InheritedStats(np.zeros(3), np.ones(3))
    augment(init_generator(3, 2, np.random.default_rng(0)), _support([1, 2, 5]), stats, 5,
            np.random.default_rng(0))
    assert seen == [0, 1]


# -- classifier ----------------------------------------------------------------

def _toy_two_class(seed=0, m=20):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-5, 0.1, (m, 2)), rng.normal(5, 0.1, (m, 2))])
    return x, np.repeat([3, 8], m)


def test_separable_toy_reaches_full_training_accuracy():
    x, y = _toy_two_class()
    h = init_classifier(2, [3, 8], np.random.default_rng(0))
    h, _ = fit_classifier(h, (x, y), InnerConfig(steps=100))
    assert np.all(h.predict(x) == y)


def test_small_step_training_loss_never_increases():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 5))
    y = rng.integers(0, 3, 40)
    h = init_classifier(5, [0, 1, 2], rng)
    losses = []
    for _ in range(30):
        losses.append(cross_entropy_batch(h.logits(x), h.index_of(y))[0])
        h, _ = fit_classifier(h, (x, y), InnerConfig(steps=1, learning_rate=0.01))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_one_step_is_one_sgd_update():
    x, y = _toy_two_class(m=3)
    h = init_classifier(2, [3, 8], np.random.default_rng(0))
    w0, b0 = (p.copy() for p in h.net.parameters())
    p = h.net.layers[0]
    probs = np.exp(x @ w0.T + b0)
    probs /= probs.sum(axis=1, keepdims=True)
    r = probs - np.eye(2)[h.index_of(y)]
    h, _ = fit_classifier(h, (x, y), InnerConfig(steps=1, learning_rate=0.05))
    np.testing.assert_allclose(p.weight, w0 - 0.05 * r.T @ x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p.bias, b0 - 0.05 * r.sum(axis=0), rtol=0, atol=1e-12)


def test_taped_and_untaped_training_agree():
    x, y = _toy_two_class(m=4)
    cfg = InnerConfig(steps=6, learning_rate=0.02, momentum=0.9, weight_decay=0.01)
    a, _ = fit_classifier(init_classifier(2, [3, 8], np.random.default_rng(0)), (x, y), cfg, record_tapes=True)
    b, _ = fit_classifier(init_classifier(2, [3, 8], np.random.default_rng(0)), (x, y), cfg)
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        np.testing.assert_allclose(p, q, rtol=0, atol=1e-12)


def test_zero_steps_and_missing_classes_rejected():
    x, y = _toy_two_class(m=2)
    with pytest.raises(RejectedInputError):
        fit_classifier(init_classifier(2, [3, 8], np.random.default_rng(0)), (x, y), InnerConfig(steps=0))
    with pytest.raises(RejectedInputError):
        fit_classifier(init_classifier(2, [3, 8, 9], np.random.default_rng(0)), (x, y), InnerConfig())
    with pytest.raises(RejectedInputError):
        ClassifierModel(init_classifier(2, [3, 8], np.random.default_rng(0)).net, [1, 2, 3])


# -- meta-gradient -------------------------------------------------------------

def _micro(momentum, weight_decay, steps=2, first_order=False):
    rng = np.random.default_rng(0)
    G = init_generator(3, 2, rng, seed_passthrough=False)
    for layer in G.net.layers:
        layer.bias = rng.standard_normal(layer.bias.shape) * 0.2
    support = {0: rng.standard_normal((2, 3)) - 1, 1: rng.standard_normal((2, 3)) + 1}
    query = rng.standard_normal((6, 3))
    labels = np.array([0, 1] * 3)
    stats = lambda c, s: InheritedStats(np.full(3, c - 0.5), np.full(3, 0.5 + c))
    cfg = MetaTrainConfig(n=2, n_aug=4, inner=InnerConfig(steps=steps, learning_rate=0.5, momentum=momentum,
                                                          weight_decay=weight_decay),
                          first_order=first_order)
    run = lambda: meta_loss_and_grad(G, support, query, labels, stats, cfg, np.random.default_rng(7))
    return G, run


@pytest.mark.parametrize("momentum,weight_decay", [(0.0, 0.0), (0.9, 0.0), (0.9, 0.05)])
def test_meta_gradient_matches_central_differences(momentum, weight_decay):
    G, run = _micro(momentum, weight_decay)
    _, grads = run()
    params = [p.copy() for p in G.net.parameters()]
    errs = []
    for i, p in enumerate(params):
        def f(v, i=i):
            trial = [q.copy() for q in params]
            trial[i] = v
            G.net.set_parameters(trial)
            return run()[0]
        fd = central_diff(f, p)
        G.net.set_parameters(params)
        errs.append(rel_err(grads[i], fd).ravel())
    errs = np.concatenate(errs)
    assert np.mean(errs <= 1e-3) >= 0.99


def test_first_order_equals_full_for_a_single_inner_step():
    _, full = _micro(0.9, 0.01, steps=1)
    _, first = _micro(0.9, 0.01, steps=1, first_order=True)
    for a, b in zip(full()[1], first()[1]):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    _, full = _micro(0.9, 0.01, steps=3)
    _, first = _micro(0.9, 0.01, steps=3, first_order=True)
    assert any(not np.allclose(a, b) for a, b in zip(full()[1], first()[1]))


# -- outer loop ----------------------------------------------------------------

def test_zero_outer_learning_rate_keeps_theta():
    ds, _ = make_synthetic(SyntheticSpec(seed=1))
    G = init_generator(ds.dim, 8, np.random.default_rng(0))
    before = G.net.checksum()
    cfg = MetaTrainConfig(outer_lr=0.0)
    ep = sample_episode(ds, 1, 5, 15, np.random.default_rng(2), classes=ds.many_shot)
    G, loss = outer_step(G, ep, _const_stats(ds.dim), cfg, np.random.default_rng(3), cfg.outer_optimizer(), 0)
    assert G.net.checksum() == before
    assert np.isfinite(loss) and loss > 0


def test_zero_iterations_returns_initial_generator():
    ds, _ = make_synthetic(SyntheticSpec(seed=1))
    G = init_generator(ds.dim, 8, np.random.default_rng(0))
    before = G.net.checksum()
    G, hist = meta_train(G, ds, _const_stats(ds.dim), MetaTrainConfig(iterations=0), np.random.default_rng(1))
    assert G.net.checksum() == before and hist == []


def test_meta_training_is_deterministic():
    ds, _ = make_synthetic(SyntheticSpec(seed=2))
    out = []
    for _ in range(2):
        G, _ = meta_train(init_generator(ds.dim, 8, np.random.default_rng(0)), ds, _const_stats(ds.dim),
                          MetaTrainConfig(iterations=20, grad_clip=1.0), np.random.default_rng(1))
        out.append(G.net.checksum())
    assert out[0] == out[1]


def test_grad_clip_bounds_the_update():
    ds, _ = make_synthetic(SyntheticSpec(seed=2))
    ep = sample_episode(ds, 1, 5, 15, np.random.default_rng(2), classes=ds.many_shot)
    G = init_generator(ds.dim, 8, np.random.default_rng(0))
    p0 = G.net.parameters()
    cfg = MetaTrainConfig(outer_lr=1.0, outer_weight_decay=0.0, grad_clip=1e-3)
    G, _ = outer_step(G, ep, _const_stats(ds.dim), cfg, np.random.default_rng(3), cfg.outer_optimizer(), 0)
    step = np.sqrt(sum(((a - b) ** 2).sum() for a, b in zip(G.net.parameters(), p0)))
    assert step == pytest.approx(1e-3, rel=1e-9)


@pytest.mark.slow
def test_meta_loss_moving_average_decreases():
    from statxfer.config import ExperimentConfig
    from statxfer.harness import meta_train_config, prepare_data, stage_rng
    cfg = ExperimentConfig().validate()
    down = 0
    for seed in range(10):
        train = prepare_data(cfg, seed).train.truncate_few_shot(1)
        mc = meta_train_config(cfg, 1)
        mc.iterations = 200
        _, hist = meta_train(init_generator(train.dim, 8, stage_rng(seed, "generator", 1)), train,
                             _const_stats(train.dim), mc, stage_rng(seed, "meta", 1))
        avg = np.convolve(hist, np.ones(50) / 50, mode="valid")
        down += avg[-1] < avg[0]
    assert down >= 8


# -- meta-test -----------------------------------------------------------------

def test_query_equal_to_support_on_separable_task():
    x, y = _toy_two_class(m=5)
    support = {3: x[y == 3], 8: x[y == 8]}
    res = meta_test(None, support, x, y, None, MetaTestConfig(), np.random.default_rng(0))
    assert res.accuracy == 1.0 and res.per_class == {3: 1.0, 8: 1.0}


def test_untrained_classifier_is_at_chance():
    rng = np.random.default_rng(0)
    M = 5
    support = {c: rng.standard_normal((1, 8)) for c in range(M)}
    query = rng.standard_normal((1000, 8))
    labels = rng.integers(0, M, 1000)
    cfg = MetaTestConfig(inner=InnerConfig(steps=0))
    res = meta_test(None, support, query, labels, None, cfg, np.random.default_rng(1))
    assert abs(res.accuracy - 1 / M) <= 0.1


def test_meta_test_leaves_generator_frozen():
    support = _support([1, 1, 1], d=4)
    G = init_generator(4, 2, np.random.default_rng(0))
    before = G.net.checksum()
    q = np.concatenate(list(support.values()))
    meta_test(G, support, q, np.arange(3), _const_stats(4), MetaTestConfig(), np.random.default_rng(0))
    assert G.net.checksum() == before


def test_query_label_without_support_is_a_setup_error():
    with pytest.raises(EvaluationSetupError):
        meta_test(None, _support([1, 1]), np.zeros((1, 3)), np.array([5]), None, MetaTestConfig(),
                  np.random.default_rng(0))


@pytest.mark.slow
def test_trained_generator_beats_initial_generator():
    from statxfer.config import ExperimentConfig
    from statxfer.harness import (build_battery, evaluate, n_superclasses, prepare_data, regressor_config,
                                  stage_rng, stats_provider, train_generator)
    from statxfer.hierarchy import build_tree
    from statxfer.regressor import build_mean_table, train_regressor
    cfg = ExperimentConfig().validate()
    gains = []
    for seed in range(3):
        data = prepare_data(cfg, seed)
        train = data.train.truncate_few_shot(1)
        reg = train_regressor(train, regressor_config(cfg), stage_rng(seed, "regressor"))
        tree = build_tree(build_mean_table(train, reg), train, n_superclasses(cfg), stage_rng(seed, "tree", 1))
        means = build_mean_table(train, reg)
        stats = stats_provider("ours", tree, means, train, cfg)
        battery = build_battery(train, data.test, cfg, stage_rng(seed, "battery", 1))[:40]
        G0 = init_generator(train.dim, cfg.generator.noise_dim, stage_rng(seed, "generator", 1))
        G1, _ = train_generator("ours", train, stats, cfg, seed, 1)
        gains.append(evaluate("ours", G1, battery, stats, cfg, seed, 1)[0]
                     - evaluate("ours", G0, battery, stats, cfg, seed, 1)[0])
    assert np.mean(gains) > 0
