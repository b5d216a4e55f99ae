"""Randomized property suites behind `dpgraph verify`.

Two claims get hammered on generated instances: the occurrence bound (no
node appears in more than n_bound(k, r) sampled trees, and no kept in-list
exceeds k), and the sensitivity bound (on node-level adjacent graph pairs the
full-batch clipped gradient sums differ by at most 2 C_l n_bound(k, r) per
block). The acceptance tests call the same entry points, so the CLI and the
test suite can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .graph import GraphDataset
from .model import ModelConfig, init_params, per_example_gradient
from .sampler import SamplerConfig, dfs_tree, n_bound, max_occurrence, sample_edgelists
from .trainer import _sum_clipped, calibrate_clip_thresholds

_K_CHOICES = (1, 2, 3, 5)
_R_CHOICES = (0, 1, 2)
_EDGE_PROBS = (0.05, 0.2)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    cases: int
    violations: int
    worst_ratio: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def describe(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (f"{self.name}: {self.cases} cases, {self.violations} violations, "
                f"worst ratio {self.worst_ratio:.4f} [{status}]")


def _random_digraph(n: int, p: float, gen: np.random.Generator,
                    feature_dim: int = 1, num_classes: int = 1) -> GraphDataset:
    """Erdos-Renyi digraph with a random 60% training split, all labeled."""
    u = gen.random((n, n))
    adj = u < p
    np.fill_diagonal(adj, False)
    edges = np.argwhere(adj).astype(np.int64)
    feats = gen.standard_normal((n, feature_dim))
    labels = gen.integers(0, num_classes, size=n).astype(np.int64)
    perm = gen.permutation(n)
    cut = max(1, int(0.6 * n))
    train = frozenset(int(v) for v in perm[:cut])
    return GraphDataset(features=feats, labels=labels, edges=edges,
                        train_set=train, val_set=frozenset(),
                        test_set=frozenset(), num_classes=num_classes)


def run_occurrence_suite(trials: int = 200, seed: int = 0,
                         seeds_per_graph: int = 3
                         ) -> tuple[SuiteResult, SuiteResult]:
    """Occurrence bound and in-degree cap on random ER digraphs.

    Cycles edge density, k, and r across `trials` graphs with
    `seeds_per_graph` sampler seeds each. Returns (occurrence, cap) results;
    a case is one (graph, k, r, sampler seed) combination.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    occ_cases = occ_violations = 0
    cap_cases = cap_violations = 0
    occ_worst = 0.0
    cap_worst = 0.0
    for i in range(trials):
        gen = rng.generator(seed, 21, i)
        n = int(gen.integers(10, 101))
        p = _EDGE_PROBS[i % len(_EDGE_PROBS)]
        k = _K_CHOICES[i % len(_K_CHOICES)]
        r = _R_CHOICES[(i // len(_K_CHOICES)) % len(_R_CHOICES)]
        g = _random_digraph(n, p, gen)
        bound = n_bound(k, r)
        for s in range(seeds_per_graph):
            cfg = SamplerConfig(k=k, r=r, seed=seed * 1000 + i * 10 + s)
            el = sample_edgelists(g, cfg)

            cap_cases += 1
            max_len = max((len(l) for l in el.incoming), default=0)
            cap_worst = max(cap_worst, max_len / k)
            if max_len > k:
                cap_violations += 1

            occ_cases += 1
            subs = [dfs_tree(int(v), el, r) for v in g.train_nodes]
            _, occ = max_occurrence(subs)
            occ_worst = max(occ_worst, occ / bound)
            if occ > bound:
                occ_violations += 1
    return (SuiteResult("occurrence-bound", occ_cases, occ_violations, occ_worst),
            SuiteResult("in-degree-cap", cap_cases, cap_violations, cap_worst))


def _adjacent_pair(n: int, p: float, gen: np.random.Generator,
                   feature_dim: int, num_classes: int
                   ) -> tuple[GraphDataset, GraphDataset, int]:
    """A graph and its node-level neighbor: one node stripped of everything.

    The removed node keeps its id (so every other node's keyed random
    decisions are shared between the two graphs) but loses all incident
    edges and its split membership.
    """
    g = _random_digraph(n, p, gen, feature_dim, num_classes)
    w = int(gen.integers(0, n))
    mask = (g.edges[:, 0] != w) & (g.edges[:, 1] != w)
    g_adj = GraphDataset(features=g.features, labels=g.labels,
                         edges=g.edges[mask],
                         train_set=g.train_set - {w},
                         val_set=frozenset(), test_set=frozenset(),
                         num_classes=num_classes)
    return g, g_adj, w


def run_sensitivity_suite(pairs: int = 50, seed: int = 0) -> SuiteResult:
    """Full-batch gradient-sum sensitivity on adjacent graph pairs.

    For each pair, thresholds are calibrated once on the larger graph and the
    per-block difference of the clipped full-batch sums is checked against
    2 C_l n_bound(k, r) (+1e-9 slack). Uses a small feature_dim=4, hidden=8,
    3-class model.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    violations = 0
    worst = 0.0
    k_r = [(k, r) for k in _K_CHOICES for r in (1, 2)]
    for i in range(pairs):
        gen = rng.generator(seed, 22, i)
        n = int(gen.integers(12, 31))
        p = float(gen.uniform(0.1, 0.3))
        k, r = k_r[i % len(k_r)]
        g, g_adj, _ = _adjacent_pair(n, p, gen, feature_dim=4, num_classes=3)
        if not g_adj.train_set:
            continue
        cfg = SamplerConfig(k=k, r=r, seed=seed * 777 + i)
        mcfg = ModelConfig(n_enc=1, n_dec=1, hidden=8, activation="tanh",
                           layers_r=r)
        params = init_params(mcfg, 4, 3, seed=seed * 31 + i)

        def full_batch_sum(graph: GraphDataset, thresholds):
            el = sample_edgelists(graph, cfg)
            grads = [per_example_gradient(dfs_tree(int(v), el, r),
                                          graph.features,
                                          int(graph.labels[v]), params)
                     for v in graph.train_nodes]
            return _sum_clipped(grads, thresholds)

        el0 = sample_edgelists(g, cfg)
        cal_grads = [dfs_tree(int(v), el0, r) for v in g.train_nodes]
        thresholds = calibrate_clip_thresholds(cal_grads, g.features, g.labels,
                                               params, 75.0)
        u = full_batch_sum(g, thresholds)
        u_adj = full_batch_sum(g_adj, thresholds)
        bound_nodes = n_bound(k, r)
        for block in ("enc", "agg", "dec"):
            diff_sq = 0.0
            for name in u:
                if name.split(".")[0] == block:
                    d = u[name] - u_adj[name]
                    diff_sq += float(np.sum(d * d))
            diff = float(np.sqrt(diff_sq))
            allowed = 2.0 * thresholds[block] * bound_nodes
            worst = max(worst, diff / allowed if allowed > 0 else 0.0)
            if diff > allowed + 1e-9:
                violations += 1
    return SuiteResult("sensitivity-bound", pairs, violations, worst)
