"""Clip calibration, minibatch draws, private optimizer steps, training loop."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgraph import rng
from dpgraph.accountant import PrivacySpec, rdp_to_dp
from dpgraph.graph import GraphDataset, generate_sbm
from dpgraph.model import (GradientBundle, ModelConfig, ModelParams,
                           clip_per_layer, init_params, per_example_gradient)
from dpgraph.sampler import (SamplerConfig, Subgraph, TreeNode, n_bound,
                             sample_subgraphs)
from dpgraph.trainer import (AdamMoments, TrainConfig, calibrate_clip_thresholds,
                             dp_adam_step, dp_sgd_step, evaluate,
                             nearest_rank, sample_minibatch, train)


def _leaf_sub(node_id):
    return Subgraph(root=node_id, tree=TreeNode(node_id, ()), nodes=(node_id,),
                    contains=frozenset({node_id}))


def _bundle(values, root=0):
    """One-layer-per-block bundle over 2x2 weights, filled with `values`."""
    a = np.full((2, 2), values[0]), np.full(2, values[1])
    b = np.full((2, 2), values[2]), np.full(2, values[3])
    c = np.full((2, 2), values[4]), np.full(2, values[5])
    return GradientBundle(enc_layers=(a,), agg=b, dec_layers=(c,), root=root)


def _small_params(seed=0):
    return init_params(ModelConfig(hidden=2), feature_dim=2, num_classes=2,
                       seed=seed)


NO_CLIP = {"enc": 1e9, "agg": 1e9, "dec": 1e9}


# ---------------------------------------------------------------------------
# config


def test_train_config_validation():
    good = dict(batch_size=4, learning_rate=0.1, iterations=5,
                noise_multiplier=1.0)
    TrainConfig(**good)
    for bad in (dict(batch_size=0), dict(learning_rate=0.0),
                dict(iterations=0), dict(noise_multiplier=-0.1),
                dict(clip_percentile=0.0), dict(clip_percentile=101.0),
                dict(optimizer="rmsprop"), dict(adam_betas=(1.0, 0.999)),
                dict(adam_eps=0.0), dict(eval_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**{**good, **bad})


# ---------------------------------------------------------------------------
# nearest-rank percentile


def test_nearest_rank_examples():
    values = list(range(1, 11))
    assert nearest_rank(values, 75.0) == 8.0
    assert nearest_rank(values, 100.0) == 10.0
    assert nearest_rank(values, 1.0) == 1.0
    assert nearest_rank([3.0, 1.0, 2.0], 50.0) == 2.0
    assert nearest_rank([5.0], 75.0) == 5.0


def test_nearest_rank_validation():
    with pytest.raises(ValueError):
        nearest_rank([], 50.0)
    with pytest.raises(ValueError):
        nearest_rank([1.0], 0.0)
    with pytest.raises(ValueError):
        nearest_rank([1.0], 100.5)


@settings(deadline=None, max_examples=50)
@given(data=st.data())
def test_nearest_rank_picks_an_element_and_grows_with_p(data):
    values = data.draw(st.lists(st.floats(min_value=-1e6, max_value=1e6),
                                min_size=1, max_size=30))
    p = data.draw(st.floats(min_value=0.01, max_value=100.0))
    q = data.draw(st.floats(min_value=0.01, max_value=100.0))
    lo, hi = sorted((p, q))
    assert nearest_rank(values, p) in values
    assert nearest_rank(values, lo) <= nearest_rank(values, hi)


# ---------------------------------------------------------------------------
# clip calibration


def test_calibration_at_full_percentile_is_the_max_norm():
    g = generate_sbm(n=40, num_classes=2, p_in=0.3, p_out=0.05, feature_dim=3,
                     feature_noise=1.0, seed=5)
    subs = sample_subgraphs(g, SamplerConfig(k=2, r=1, seed=0))
    params = init_params(ModelConfig(hidden=4), g.feature_dim, g.num_classes,
                         seed=3)
    thresholds = calibrate_clip_thresholds(subs, g.features, g.labels, params,
                                           percentile=100.0)
    for block in ("enc", "agg", "dec"):
        expected = max(
            per_example_gradient(s, g.features, int(g.labels[s.root]),
                                 params).block_norm(block) for s in subs)
        assert thresholds[block] == pytest.approx(expected, rel=1e-12)
        assert thresholds[block] > 0


def test_calibration_rejects_degenerate_initialization():
    # Dead ReLU everywhere: encoder pre-activations are all negative, so every
    # per-example encoder gradient is exactly zero.
    params = ModelParams(
        enc_layers=((np.zeros((2, 2)), np.array([-1.0, -1.0])),),
        agg=(np.zeros((2, 2)), np.array([-1.0, -1.0])),
        dec_layers=((np.zeros((2, 2)), np.zeros(2)),),
        activation="relu")
    X = np.ones((3, 2))
    Y = np.zeros(3, dtype=np.int64)
    subs = [_leaf_sub(i) for i in range(3)]
    with pytest.raises(ValueError, match="degenerate initialization"):
        calibrate_clip_thresholds(subs, X, Y, params)


def test_calibration_requires_subgraphs():
    with pytest.raises(ValueError):
        calibrate_clip_thresholds([], np.ones((1, 2)),
                                  np.zeros(1, dtype=np.int64), _small_params())


def test_calibration_subsamples_large_pools():
    params = init_params(ModelConfig(hidden=1), feature_dim=1, num_classes=2,
                         seed=0)
    X = np.ones((1, 1))
    Y = np.zeros(1, dtype=np.int64)
    pool = [_leaf_sub(0)] * 10_500
    thresholds = calibrate_clip_thresholds(pool, X, Y, params)
    assert set(thresholds) == {"enc", "agg", "dec"}
    assert all(c > 0 for c in thresholds.values())


# ---------------------------------------------------------------------------
# minibatch sampling


@settings(deadline=None, max_examples=50)
@given(data=st.data())
def test_minibatch_is_a_sorted_subset(data):
    num_train = data.draw(st.integers(min_value=1, max_value=50))
    m = data.draw(st.integers(min_value=1, max_value=num_train))
    seed = data.draw(st.integers(min_value=0, max_value=2 ** 32 - 1))
    idx = sample_minibatch(num_train, m, np.random.default_rng(seed))
    assert idx.shape == (m,)
    assert len(set(idx.tolist())) == m
    assert idx.tolist() == sorted(idx.tolist())
    assert 0 <= idx.min() and idx.max() < num_train


def test_minibatch_full_batch_is_the_identity():
    idx = sample_minibatch(6, 6, np.random.default_rng(0))
    assert idx.tolist() == list(range(6))


def test_minibatch_validation():
    gen = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_minibatch(5, 0, gen)
    with pytest.raises(ValueError):
        sample_minibatch(5, 6, gen)


def test_minibatch_single_draws_are_uniform():
    # 1e6 singleton draws from 4 items: each frequency lands within 2e-3 of
    # 1/4 (observed max deviation 7.2e-4) and the chi-square statistic stays
    # far under the 16.27 cutoff at the 99.9th percentile of chi2(3).
    gen = rng.generator(0, 17)
    counts = np.zeros(4, dtype=np.int64)
    for _ in range(1_000_000):
        counts[sample_minibatch(4, 1, gen)[0]] += 1
    freqs = counts / 1_000_000
    assert np.max(np.abs(freqs - 0.25)) <= 2e-3
    chi2 = float(np.sum((counts - 250_000.0) ** 2 / 250_000.0))
    assert chi2 < 16.27


# ---------------------------------------------------------------------------
# optimizer steps


def test_sgd_step_without_noise_is_plain_clipped_descent():
    params = _small_params()
    g = _bundle([0.3, -0.1, 0.5, 0.2, -0.4, 0.1], root=2)
    got = dp_sgd_step(params, [g], NO_CLIP, noise_multiplier=0.0,
                      learning_rate=0.5, batch_size=2, occurrence_bound=3,
                      gen=rng.generator(0, 1))
    for (name, new), (_, old) in zip(got.named_arrays(), params.named_arrays()):
        block = name.split(".")[0]
        grad = dict(enc=g.enc_layers[0], agg=g.agg, dec=g.dec_layers[0])[block]
        expected = old - 0.25 * (grad[0] if name.endswith("W") else grad[1])
        np.testing.assert_allclose(new, expected, rtol=1e-15)


def test_sgd_step_applies_clipping_before_the_sum():
    params = _small_params()
    g = _bundle([3.0, 1.0, 2.0, -2.0, 5.0, 0.5], root=0)
    thresholds = {"enc": 0.5, "agg": 1.0, "dec": 0.25}
    got = dp_sgd_step(params, [g], thresholds, noise_multiplier=0.0,
                      learning_rate=1.0, batch_size=1, occurrence_bound=1,
                      gen=rng.generator(0, 1))
    clipped = clip_per_layer(g, thresholds)
    for (name, new), (_, old), (_, cg) in zip(got.named_arrays(),
                                              params.named_arrays(),
                                              clipped.named_arrays()):
        np.testing.assert_allclose(new, old - cg, rtol=1e-15)


def test_sgd_step_sums_in_root_order_regardless_of_input_order():
    params = _small_params()
    g3 = _bundle([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], root=3)
    g7 = _bundle([-0.2, 0.1, 0.7, -0.3, 0.2, 0.9], root=7)
    kwargs = dict(thresholds=NO_CLIP, noise_multiplier=0.0, learning_rate=0.3,
                  batch_size=2, occurrence_bound=2)
    a = dp_sgd_step(params, [g3, g7], gen=rng.generator(0, 1), **kwargs)
    b = dp_sgd_step(params, [g7, g3], gen=rng.generator(0, 1), **kwargs)
    for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
        assert np.array_equal(x, y)


def test_sgd_step_rejects_non_finite_gradients():
    g = _bundle([np.inf, 0, 0, 0, 0, 0], root=7)
    with pytest.raises(ValueError, match="root node 7"):
        dp_sgd_step(_small_params(), [g], NO_CLIP, 0.0, 0.1, 1, 1,
                    rng.generator(0, 1))


def test_sgd_step_noise_is_reproducible_and_nonzero():
    params = _small_params()
    g = _bundle([0.1] * 6, root=0)
    a = dp_sgd_step(params, [g], NO_CLIP, 1.0, 0.1, 1, 2, rng.generator(9, 0))
    b = dp_sgd_step(params, [g], NO_CLIP, 1.0, 0.1, 1, 2, rng.generator(9, 0))
    quiet = dp_sgd_step(params, [g], NO_CLIP, 0.0, 0.1, 1, 2, rng.generator(9, 0))
    for (_, x), (_, y), (_, q) in zip(a.named_arrays(), b.named_arrays(),
                                      quiet.named_arrays()):
        assert np.array_equal(x, y)
        assert not np.array_equal(x, q)


def test_adam_first_step_matches_the_closed_form():
    # From zero moments the bias corrections cancel: the step is
    # (eta/m) * u / (|u| + eps) elementwise.
    params = _small_params()
    g = _bundle([0.4, -0.2, 0.8, 0.1, -0.6, 0.3], root=1)
    eta, m, eps = 0.5, 2, 1e-8
    got, moments = dp_adam_step(params, AdamMoments.zeros(params), [g],
                                NO_CLIP, 0.0, eta, (0.9, 0.999), eps, 1, m, 1,
                                rng.generator(0, 1))
    for (name, new), (_, old) in zip(got.named_arrays(), params.named_arrays()):
        block = name.split(".")[0]
        grad = dict(enc=g.enc_layers[0], agg=g.agg, dec=g.dec_layers[0])[block]
        u = grad[0] if name.endswith("W") else grad[1]
        expected = old - (eta / m) * u / (np.abs(u) + eps)
        np.testing.assert_allclose(new, expected, rtol=1e-12)
        np.testing.assert_allclose(moments.first[name], 0.1 * u, rtol=1e-12)
        np.testing.assert_allclose(moments.second[name], 0.001 * u * u,
                                   rtol=1e-12)


def test_adam_second_step_follows_the_recurrence():
    params = _small_params()
    g1 = _bundle([0.4, -0.2, 0.8, 0.1, -0.6, 0.3], root=0)
    g2 = _bundle([-0.1, 0.5, 0.2, -0.7, 0.9, -0.3], root=0)
    b1, b2, eps, eta, m = 0.9, 0.999, 1e-8, 0.25, 1
    p1, mom = dp_adam_step(params, AdamMoments.zeros(params), [g1], NO_CLIP,
                           0.0, eta, (b1, b2), eps, 1, m, 1, rng.generator(0, 1))
    p2, mom2 = dp_adam_step(p1, mom, [g2], NO_CLIP, 0.0, eta, (b1, b2), eps,
                            2, m, 1, rng.generator(0, 1))
    for (name, new), (_, mid) in zip(p2.named_arrays(), p1.named_arrays()):
        block = name.split(".")[0]
        u1 = dict(enc=g1.enc_layers[0], agg=g1.agg, dec=g1.dec_layers[0])[block]
        u2 = dict(enc=g2.enc_layers[0], agg=g2.agg, dec=g2.dec_layers[0])[block]
        u1 = u1[0] if name.endswith("W") else u1[1]
        u2 = u2[0] if name.endswith("W") else u2[1]
        f = b1 * (1 - b1) * u1 + (1 - b1) * u2
        s = b2 * (1 - b2) * u1 * u1 + (1 - b2) * u2 * u2
        step = eta * (f / (1 - b1 ** 2)) / (np.sqrt(s / (1 - b2 ** 2)) + eps)
        np.testing.assert_allclose(new, mid - step, rtol=1e-12)
        np.testing.assert_allclose(mom2.first[name], f, rtol=1e-12)


def test_adam_rejects_bad_step_index():
    with pytest.raises(ValueError):
        dp_adam_step(_small_params(), AdamMoments.zeros(_small_params()),
                     [_bundle([0.1] * 6)], NO_CLIP, 0.0, 0.1, (0.9, 0.999),
                     1e-8, 0, 1, 1, rng.generator(0, 1))


# ---------------------------------------------------------------------------
# evaluation


def _eval_graph():
    """Six nodes, three classes; class 1 dominates the training counts."""
    return GraphDataset(features=np.zeros((6, 2)),
                        labels=np.array([1, 1, 0, 0, 1, 2], dtype=np.int64),
                        edges=np.zeros((0, 2), dtype=np.int64),
                        train_set=frozenset({0, 1, 5}), val_set=frozenset(),
                        test_set=frozenset({2, 3, 4}), num_classes=3)


def test_evaluate_constant_predictor():
    # Zero weights and a loaded decoder bias force class 0 on every node.
    params = ModelParams(
        enc_layers=((np.zeros((2, 2)), np.zeros(2)),),
        agg=(np.zeros((2, 2)), np.zeros(2)),
        dec_layers=((np.zeros((3, 2)), np.array([10.0, 0.0, 0.0])),),
        activation="tanh")
    g = _eval_graph()
    res = evaluate(params, g, g.test_set, ModelConfig(hidden=2, layers_r=0))
    assert res.accuracy == pytest.approx(2.0 / 3.0)
    # training counts: class 1 twice, class 2 once, class 0 never
    assert [(r.label, r.train_count, r.eval_count) for r in res.per_class] == [
        (1, 2, 1), (2, 1, 0), (0, 0, 2)]
    by_label = {r.label: r for r in res.per_class}
    assert by_label[0].accuracy == 1.0
    assert by_label[1].accuracy == 0.0
    assert math.isnan(by_label[2].accuracy)


def test_evaluate_validation():
    params = _small_params()
    g = _eval_graph()
    with pytest.raises(ValueError):
        evaluate(params, g, frozenset(), ModelConfig(hidden=2))


# ---------------------------------------------------------------------------
# the full loop


def _toy():
    g = generate_sbm(n=60, num_classes=2, p_in=0.3, p_out=0.05, feature_dim=3,
                     feature_noise=1.0, seed=5)
    sampler_cfg = SamplerConfig(k=2, r=1, seed=0)
    model_cfg = ModelConfig(hidden=4, layers_r=1)
    return g, sampler_cfg, model_cfg


def test_train_logs_on_schedule_and_at_the_end():
    g, sampler_cfg, model_cfg = _toy()
    cfg = TrainConfig(batch_size=8, learning_rate=0.1, iterations=5,
                      noise_multiplier=0.0, eval_every=2, seed=1)
    params, log = train(g, sampler_cfg, model_cfg, cfg)
    params.validate()
    assert [row.step for row in log.rows] == [2, 4, 5]
    for row in log.rows:
        assert math.isfinite(row.train_loss) and row.train_loss >= 0.0
        assert 0.0 <= row.val_accuracy <= 1.0
        assert 0.0 <= row.test_accuracy <= 1.0
        assert math.isinf(row.epsilon)  # non-private mode
    assert {r.label for r in log.per_class} == {0, 1}
    assert sum(r.eval_count for r in log.per_class) == len(g.test_set)


def test_train_epsilon_column_matches_the_accountant():
    g, sampler_cfg, model_cfg = _toy()
    lam = 2.0
    cfg = TrainConfig(batch_size=8, learning_rate=0.1, iterations=2,
                      noise_multiplier=lam, eval_every=1, seed=0)
    _, log = train(g, sampler_cfg, model_cfg, cfg, delta=1e-5)
    bound = n_bound(sampler_cfg.k, sampler_cfg.r)
    for row in log.rows:
        spec = PrivacySpec(n_train=len(g.train_set), k=sampler_cfg.k,
                           r=sampler_cfg.r, batch_size=8, clip=1.0,
                           sigma=lam * 2.0 * bound, steps=row.step, delta=1e-5)
        assert row.epsilon == pytest.approx(rdp_to_dp(spec).epsilon, rel=1e-12)
    assert log.rows[0].epsilon < log.rows[1].epsilon


def test_train_is_deterministic_in_its_seeds():
    g, sampler_cfg, model_cfg = _toy()
    cfg = TrainConfig(batch_size=8, learning_rate=0.1, iterations=3,
                      noise_multiplier=1.0, eval_every=3, seed=4)
    p1, log1 = train(g, sampler_cfg, model_cfg, cfg)
    p2, log2 = train(g, sampler_cfg, model_cfg, cfg)
    for (_, a), (_, b) in zip(p1.named_arrays(), p2.named_arrays()):
        assert np.array_equal(a, b)
    assert log1 == log2
    p3, _ = train(g, sampler_cfg, model_cfg,
                  TrainConfig(batch_size=8, learning_rate=0.1, iterations=3,
                              noise_multiplier=1.0, eval_every=3, seed=5))
    assert any(not np.array_equal(a, b) for (_, a), (_, b)
               in zip(p1.named_arrays(), p3.named_arrays()))


def test_train_adam_takes_a_different_path():
    g, sampler_cfg, model_cfg = _toy()
    base = dict(batch_size=8, learning_rate=0.1, iterations=2,
                noise_multiplier=0.5, eval_every=2, seed=0)
    p_sgd, _ = train(g, sampler_cfg, model_cfg, TrainConfig(**base))
    p_adam, log = train(g, sampler_cfg, model_cfg,
                        TrainConfig(**{**base, "optimizer": "adam"}))
    assert any(not np.array_equal(a, b) for (_, a), (_, b)
               in zip(p_sgd.named_arrays(), p_adam.named_arrays()))
    assert log.rows[-1].step == 2


def test_train_validation():
    g, sampler_cfg, model_cfg = _toy()
    with pytest.raises(ValueError, match="batch_size"):
        train(g, sampler_cfg, model_cfg,
              TrainConfig(batch_size=1000, learning_rate=0.1, iterations=1,
                          noise_multiplier=0.0))
