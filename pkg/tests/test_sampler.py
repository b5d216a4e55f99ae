"""Capped in-edge sampler, rooted trees, and the occurrence bound."""

from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgraph import rng
from dpgraph.graph import GraphDataset
from dpgraph.sampler import (EdgeLists, SamplerConfig, Subgraph, TreeNode,
                             dfs_tree, inference_tree, max_occurrence, n_bound,
                             sample_edgelists, sample_subgraphs)


def _graph(n, edges, train=None):
    train = frozenset(range(n)) if train is None else frozenset(train)
    labels = np.where(np.isin(np.arange(n), sorted(train)), 0, -1).astype(np.int64)
    return GraphDataset(features=np.zeros((n, 2)), labels=labels,
                        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
                        train_set=train, val_set=frozenset(),
                        test_set=frozenset(), num_classes=1)


def _star(d):
    """Training sources 0..d-1 all pointing at center node d."""
    return _graph(d + 1, [(u, d) for u in range(d)])


def _er(n, p, gen):
    mask = gen.random((n, n)) < p
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return _graph(n, np.stack([src, dst], axis=1))


# ---------------------------------------------------------------------------
# n_bound


def test_n_bound_known_values():
    assert n_bound(7, 1) == 8
    assert n_bound(3, 0) == 1
    assert n_bound(3, 1) == 4
    assert n_bound(3, 2) == 13
    assert n_bound(2, 1) == 3
    assert n_bound(2, 2) == 7
    assert n_bound(10, 1) == 11
    assert n_bound(1, 5) == 6


def test_n_bound_exact_at_large_size():
    assert n_bound(10, 50) == (10 ** 51 - 1) // 9


def test_n_bound_rejects_bad_arguments():
    with pytest.raises(ValueError):
        n_bound(0, 1)
    with pytest.raises(ValueError):
        n_bound(3, -1)


@settings(deadline=None, max_examples=50)
@given(k=st.integers(min_value=1, max_value=50),
       r=st.integers(min_value=0, max_value=40))
def test_n_bound_matches_geometric_closed_form(k, r):
    expected = r + 1 if k == 1 else (k ** (r + 1) - 1) // (k - 1)
    assert n_bound(k, r) == expected


# ---------------------------------------------------------------------------
# sample_edgelists


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(k=0, r=1, seed=0)
    with pytest.raises(ValueError):
        SamplerConfig(k=1, r=-1, seed=0)


def test_keep_probability_clamps_to_one_at_low_degree():
    # p = min(1, k / (2 d)) = 1 whenever d <= k / 2, so every edge survives.
    el = sample_edgelists(_star(2), SamplerConfig(k=4, r=1, seed=123))
    assert el.incoming[2].tolist() == [0, 1]
    assert not el.dropped
    el = sample_edgelists(_star(1), SamplerConfig(k=3, r=1, seed=7))
    assert el.incoming[1].tolist() == [0]


def test_star_center_kept_or_dropped_by_seed():
    # d = 30, k = 2: seed 15 keeps exactly 2 sources; under seed 0 three
    # survive the coin flips, which exceeds the cap, so the center is dropped.
    g = _star(30)
    el = sample_edgelists(g, SamplerConfig(k=2, r=1, seed=15))
    assert len(el.incoming[30]) == 2
    assert 30 not in el.dropped
    assert set(el.incoming[30].tolist()) <= set(range(30))

    el = sample_edgelists(g, SamplerConfig(k=2, r=1, seed=0))
    assert 30 in el.dropped
    assert len(el.incoming[30]) == 0


def test_dropped_node_keeps_its_outgoing_role():
    # Node 30 is dropped (in-degree 30, k=2, seed 0) but its single out-edge
    # to node 31 survives: 31 has training in-degree 1, so p = 1 there.
    edges = [(i, 30) for i in range(30)] + [(30, 31)]
    g = _graph(32, edges)
    el = sample_edgelists(g, SamplerConfig(k=2, r=1, seed=0))
    assert 30 in el.dropped
    assert el.incoming[30].size == 0
    assert el.incoming[31].tolist() == [30]
    assert el.outgoing[30].tolist() == [31]


def test_decisions_ignore_edges_of_other_nodes():
    edges_a = [(i, 8) for i in range(5)] + [(i, 9) for i in range(5)]
    edges_b = [(i, 8) for i in range(5)]
    cfg = SamplerConfig(k=2, r=1, seed=3)
    el_a = sample_edgelists(_graph(10, edges_a), cfg)
    el_b = sample_edgelists(_graph(10, edges_b), cfg)
    assert el_a.incoming[8].tolist() == el_b.incoming[8].tolist()
    assert (8 in el_a.dropped) == (8 in el_b.dropped)


def test_non_training_sources_never_sampled():
    g = _graph(4, [(0, 3), (1, 3), (2, 3)], train=[0, 3])
    el = sample_edgelists(g, SamplerConfig(k=5, r=1, seed=0))
    assert el.incoming[3].tolist() == [0]


def test_sampled_lists_are_capped_sorted_subsets():
    gen = np.random.default_rng(2024)
    for _ in range(5):
        g = _er(40, 0.2, gen)
        for seed in (0, 1, 2):
            for k in (1, 2, 3):
                el = sample_edgelists(g, SamplerConfig(k=k, r=1, seed=seed))
                rebuilt = [[] for _ in range(40)]
                for v in range(40):
                    kept = el.incoming[v]
                    assert len(kept) <= k
                    assert list(kept) == sorted(set(kept.tolist()))
                    assert np.all(np.isin(kept, g.train_in_sources(v)))
                    if v in el.dropped:
                        assert kept.size == 0
                    for u in kept:
                        rebuilt[int(u)].append(v)
                for u in range(40):
                    assert el.outgoing[u].tolist() == sorted(rebuilt[u])


def test_sampler_is_deterministic():
    g = _er(30, 0.3, np.random.default_rng(5))
    cfg = SamplerConfig(k=2, r=1, seed=77)
    a = sample_edgelists(g, cfg)
    b = sample_edgelists(g, cfg)
    assert a.dropped == b.dropped
    for v in range(30):
        assert a.incoming[v].tolist() == b.incoming[v].tolist()


def test_star_mean_sampled_in_degree_is_half_the_cap():
    # d = 1000, k = 10: each edge survives the coin flip with p = 10/2000, so
    # the pre-cap kept count is Binomial(1000, 0.005) with mean k/2 = 5.
    # Averaged over 10000 seeds the empirical mean lands at 5.0106.
    d, k = 1000, 10
    sources = np.arange(d)
    p = k / (2.0 * d)
    counts = [int(np.sum(rng.edge_uniforms(seed, d, sources) < p))
              for seed in range(10000)]
    mean = float(np.mean(counts))
    assert 4.9 <= mean <= 5.1


def test_star_sampler_consistent_with_edge_coins():
    # The sampler's kept list must equal the raw coin-flip survivors exactly,
    # and the drop flag must fire precisely when those survivors exceed k.
    d, k = 1000, 10
    g = _star(d)
    sources = np.arange(d)
    p = k / (2.0 * d)
    for seed in range(400):
        survivors = sources[rng.edge_uniforms(seed, d, sources) < p]
        el = sample_edgelists(g, SamplerConfig(k=k, r=1, seed=seed))
        if len(survivors) > k:
            assert d in el.dropped
            assert el.incoming[d].size == 0
        else:
            assert d not in el.dropped
            assert el.incoming[d].tolist() == survivors.tolist()


# ---------------------------------------------------------------------------
# trees


def _hand_el(out_lists):
    n = len(out_lists)
    incoming = [[] for _ in range(n)]
    for u, targets in enumerate(out_lists):
        for v in targets:
            incoming[v].append(u)
    return EdgeLists(
        incoming=tuple(np.array(sorted(l), dtype=np.int64) for l in incoming),
        outgoing=tuple(np.array(l, dtype=np.int64) for l in out_lists),
        dropped=frozenset())


def test_dfs_tree_depth_zero_is_single_node():
    el = _hand_el([[1], [2], []])
    sg = dfs_tree(0, el, 0)
    assert sg.nodes == (0,)
    assert sg.contains == {0}
    assert sg.size == 1
    assert sg.depth() == 0
    assert sg.max_fanout() == 0
    assert sg.tree == TreeNode(0, ())


def test_dfs_tree_follows_out_lists_to_depth_r():
    el = _hand_el([[1], [2], []])
    assert dfs_tree(0, el, 1).nodes == (0, 1)
    sg = dfs_tree(0, el, 2)
    assert sg.nodes == (0, 1, 2)
    assert sg.depth() == 2


def test_dfs_tree_stops_early_when_lists_run_out():
    el = _hand_el([[1], [2], []])
    sg = dfs_tree(0, el, 5)
    assert sg.nodes == (0, 1, 2)
    assert sg.depth() == 2


def test_dfs_tree_repeats_shared_descendants():
    el = _hand_el([[1, 2], [3], [3], []])
    sg = dfs_tree(0, el, 2)
    assert sg.nodes == (0, 1, 3, 2, 3)
    assert sg.contains == {0, 1, 2, 3}
    assert sg.size == 4
    assert sg.max_fanout() == 2
    assert sg.depth() == 2


def test_dfs_tree_validation():
    el = _hand_el([[1], []])
    with pytest.raises(ValueError):
        dfs_tree(0, el, -1)
    with pytest.raises(ValueError):
        dfs_tree(2, el, 1)


def test_sample_subgraphs_one_tree_per_training_node():
    g = _graph(6, [(0, 1), (1, 2), (3, 4)], train=[0, 1, 3, 5])
    subs = sample_subgraphs(g, SamplerConfig(k=2, r=1, seed=0))
    assert [sg.root for sg in subs] == [0, 1, 3, 5]
    for sg in subs:
        assert sg.depth() <= 1


def test_sample_subgraphs_respects_occurrence_bound():
    g = _er(60, 0.15, np.random.default_rng(8))
    for k, r in ((1, 2), (2, 1), (3, 2)):
        subs = sample_subgraphs(g, SamplerConfig(k=k, r=r, seed=4))
        _, count = max_occurrence(subs)
        assert count <= n_bound(k, r)


# ---------------------------------------------------------------------------
# max_occurrence


def _leaf_sg(root, contains):
    return Subgraph(root=root, tree=TreeNode(root, ()), nodes=(root,),
                    contains=frozenset(contains))


def test_max_occurrence_empty_input():
    assert max_occurrence([]) == (-1, 0)


def test_max_occurrence_counts_each_subgraph_once():
    # Node 1 repeats inside one tree but the tree contributes a single count.
    el = _hand_el([[1, 2], [3], [3], []])
    sg = dfs_tree(0, el, 2)
    assert max_occurrence([sg])[1] == 1


def test_max_occurrence_breaks_ties_toward_smaller_id():
    subs = [_leaf_sg(0, {0, 1}), _leaf_sg(1, {0, 1})]
    assert max_occurrence(subs) == (0, 2)


def test_max_occurrence_finds_the_hot_node():
    subs = [_leaf_sg(0, {0, 7}), _leaf_sg(1, {1, 7}), _leaf_sg(2, {2})]
    assert max_occurrence(subs) == (7, 2)


# ---------------------------------------------------------------------------
# inference_tree


def test_inference_tree_uses_full_out_neighborhood():
    g = _graph(4, [(0, 1), (0, 2), (2, 3)], train=[0])
    sg = inference_tree(g, 0, 2)
    assert sg.nodes == (0, 1, 2, 3)
    assert sg.max_fanout() == 2


def test_inference_tree_crosses_split_boundaries():
    # Evaluation sees the whole graph: the child here is not a training node.
    n = 3
    g = GraphDataset(features=np.zeros((n, 2)),
                     labels=np.array([0, -1, -1], dtype=np.int64),
                     edges=np.array([(0, 1), (1, 2)]),
                     train_set=frozenset({0}), val_set=frozenset({1}),
                     test_set=frozenset({2}), num_classes=1)
    sg = inference_tree(g, 0, 2)
    assert sg.nodes == (0, 1, 2)


def test_inference_tree_truncates_wide_fanout(caplog):
    edges = [(0, j) for j in range(1, 301)]
    g = _graph(301, edges, train=[0])
    with caplog.at_level(logging.WARNING, logger="dpgraph.sampler"):
        sg = inference_tree(g, 0, 1, max_children=256)
    assert sg.max_fanout() == 256
    assert sg.nodes[1:] == tuple(range(1, 257))
    assert any("truncated" in rec.message for rec in caplog.records)

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="dpgraph.sampler"):
        full = inference_tree(g, 0, 1, max_children=300)
    assert full.max_fanout() == 300
    assert not caplog.records
