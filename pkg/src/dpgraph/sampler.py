"""In-degree-capped edge sampling and rooted subgraph construction.

The sampler keeps each training in-edge of a node v independently with
probability min(1, K/(2 d_v)), so the expected kept in-degree is K/2, then
drops (empties the in-list of) any node whose kept in-degree still exceeds K.
The kept lists are reversed into per-node out-lists, and each training node
gets a rooted tree of depth r whose children are those out-lists. The payoff
is a hard occurrence bound: no node can appear in more than
n_bound(K, r) = sum_{i<=r} K^i of the trees, which is what the sensitivity
argument of the private training step charges for.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import rng
from .graph import GraphDataset
from .parallel import parallel_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """In-degree cap k >= 1, tree depth r >= 0, and the sampling seed."""

    k: int
    r: int
    seed: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.r < 0:
            raise ValueError("r must be >= 0")


@dataclass(frozen=True)
class EdgeLists:
    """Sampled per-node in-lists, their reversal, and the dropped-node set.

    incoming[v] holds the kept training sources of v (sorted, length <= k);
    outgoing[v] holds exactly the targets u with v in incoming[u]. A dropped
    node has an empty in-list but keeps its appearances as a source.
    """

    incoming: tuple[np.ndarray, ...]
    outgoing: tuple[np.ndarray, ...]
    dropped: frozenset[int]

    @property
    def num_nodes(self) -> int:
        return len(self.incoming)


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    children: tuple["TreeNode", ...]


@dataclass(frozen=True)
class Subgraph:
    """Rooted tree for one training node.

    `nodes` is the DFS pre-order listing (repeats allowed: the same graph node
    may appear in several branches); `contains` is the distinct-id set used by
    the occurrence bound.
    """

    root: int
    tree: TreeNode
    nodes: tuple[int, ...]
    contains: frozenset[int]

    @property
    def size(self) -> int:
        return len(self.contains)

    def depth(self) -> int:
        def _d(t: TreeNode) -> int:
            return 1 + max((_d(c) for c in t.children), default=-1)
        return _d(self.tree)

    def max_fanout(self) -> int:
        best = 0
        stack = [self.tree]
        while stack:
            t = stack.pop()
            best = max(best, len(t.children))
            stack.extend(t.children)
        return best


def n_bound(k: int, r: int) -> int:
    """Occurrence bound sum_{i=0}^{r} k^i, computed by iterated sum.

    Equals (k^(r+1) - 1) / (k - 1) for k >= 2 and r + 1 for k = 1. Exact at
    any size: Python integers do not wrap.
    """
    if k < 1 or r < 0:
        raise ValueError("need k >= 1 and r >= 0")
    total, term = 0, 1
    for _ in range(r + 1):
        total += term
        term *= k
    return total


def sample_edgelists(g: GraphDataset, cfg: SamplerConfig) -> EdgeLists:
    """Run the capped in-edge sampler over every node of g.

    Each in-edge (u, v) with u in the training set is kept independently with
    probability min(1, k/(2 d_v)) where d_v is v's training in-degree. The
    keep decision is keyed by (seed, v, u), so it does not depend on iteration
    order, thread count, or the presence of other edges.
    """
    n = g.num_nodes
    k = cfg.k

    def _sample_one(v: int) -> tuple[np.ndarray, bool]:
        sources = g.train_in_sources(v)
        d = len(sources)
        if d == 0:
            return sources, False
        p = min(1.0, k / (2.0 * d))
        kept = sources[rng.edge_uniforms(cfg.seed, v, sources) < p]
        if len(kept) > k:
            return sources[:0], True
        return kept, False

    results = parallel_map(_sample_one, range(n))
    incoming = tuple(kept for kept, _ in results)
    dropped = frozenset(v for v, (_, was_dropped) in enumerate(results) if was_dropped)

    out_lists: list[list[int]] = [[] for _ in range(n)]
    for v, kept in enumerate(incoming):
        for u in kept:
            out_lists[int(u)].append(v)
    outgoing = tuple(np.array(sorted(l), dtype=np.int64) for l in out_lists)
    return EdgeLists(incoming=incoming, outgoing=outgoing, dropped=dropped)


def _build_tree(root: int, out_lists, r: int) -> tuple[TreeNode, list[int]]:
    preorder: list[int] = []

    def _rec(v: int, depth: int) -> TreeNode:
        preorder.append(v)
        if depth == 0:
            return TreeNode(int(v), ())
        children = tuple(_rec(int(u), depth - 1) for u in out_lists[int(v)])
        return TreeNode(int(v), children)

    tree = _rec(int(root), r)
    return tree, preorder


def dfs_tree(root: int, el: EdgeLists, r: int) -> Subgraph:
    """Depth-r rooted tree: children of a tree node u are its out-list E_u.

    r = 0 gives the single-node tree {root}. Node ids may repeat across
    branches; `contains` collapses them to the distinct set.
    """
    if r < 0:
        raise ValueError("r must be >= 0")
    if not 0 <= root < el.num_nodes:
        raise ValueError(f"root {root} out of range")
    tree, preorder = _build_tree(root, el.outgoing, r)
    return Subgraph(root=int(root), tree=tree, nodes=tuple(preorder),
                    contains=frozenset(preorder))


def sample_subgraphs(g: GraphDataset, cfg: SamplerConfig) -> list[Subgraph]:
    """One rooted tree per training node, in ascending node-id order.

    Dropped training nodes still yield a tree (rooted at themselves; their
    own in-list is empty but they may retain children through their out-list).
    """
    el = sample_edgelists(g, cfg)
    roots = g.train_nodes
    return parallel_map(lambda v: dfs_tree(int(v), el, cfg.r), list(roots))


def inference_tree(g: GraphDataset, root: int, r: int,
                   max_children: int = 256) -> Subgraph:
    """Full-neighborhood rooted tree used at evaluation time.

    No privacy constraint applies at inference, so children are the node's
    entire out-neighborhood (any split, no sampling), truncated to the
    max_children lowest-id neighbors as a memory guard.
    """
    if r < 0:
        raise ValueError("r must be >= 0")

    truncated = False

    def _out(v: int) -> np.ndarray:
        nonlocal truncated
        nbrs = g.out_neighbors(v)
        if len(nbrs) > max_children:
            truncated = True
            return nbrs[:max_children]
        return nbrs

    class _View:
        def __getitem__(self, v: int) -> np.ndarray:
            return _out(v)

    tree, preorder = _build_tree(int(root), _View(), r)
    if truncated:
        logger.warning("inference tree at root %d truncated to %d children per node",
                       root, max_children)
    return Subgraph(root=int(root), tree=tree, nodes=tuple(preorder),
                    contains=frozenset(preorder))


def max_occurrence(subgraphs: list[Subgraph]) -> tuple[int, int]:
    """Brute-force occurrence count over the trees.

    Returns (node_id, count) for the node contained in the most subgraphs,
    counting each subgraph once however many times the node repeats inside
    it. Ties break toward the smallest node id. Empty input gives (-1, 0).
    """
    counts: Counter[int] = Counter()
    for sg in subgraphs:
        counts.update(sg.contains)
    if not counts:
        return -1, 0
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0], best[1]
