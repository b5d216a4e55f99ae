"""Deterministic, order-independent randomness.

Two kinds of streams are used throughout the package:

* keyed uniforms (`edge_uniforms`, `node_uniforms`): one value per key tuple,
  computed by a splitmix-style 64-bit mixer. A value depends only on its key,
  never on evaluation order or thread count, which is what makes the samplers
  reproducible under parallel execution and makes adjacent-graph reruns share
  every decision that the changed node did not touch.
* sequential generators (`generator`): numpy Philox generators with a key
  derived from (seed, tag). Used where a plain stream is fine: minibatch
  selection, gradient noise, parameter init, synthetic data.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
# distinct odd multipliers so the words of a key cannot cancel each other
_W_SEED = np.uint64(0xA24BAED4963EE407)
_W_NODE = np.uint64(0x9FB21C651E98DF25)
_W_ITEM = np.uint64(0xD6E8FEB86659FD93)


def _finalize(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer: full-avalanche bijection on 64-bit words."""
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * _MIX_A) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _MIX_B) & _MASK
    return z ^ (z >> np.uint64(31))


def _word(x: int) -> np.uint64:
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


def keyed_uniforms(seed: int, node: int, items: np.ndarray) -> np.ndarray:
    """One uniform in [0, 1) per (seed, node, item), vectorized over items.

    The result is a pure function of the key tuple.
    """
    with np.errstate(over="ignore"):
        h = _finalize(_word(seed) * _W_SEED)
        h = _finalize(h ^ (_word(node) * _W_NODE))
        items64 = np.asarray(items, dtype=np.uint64)
        hs = _finalize(h ^ ((items64 * _W_ITEM) & _MASK))
    return (hs >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def edge_uniforms(seed: int, dst: int, sources: np.ndarray) -> np.ndarray:
    """Keep/drop uniforms for the in-edges of `dst`, keyed per source node."""
    return keyed_uniforms(seed, dst, sources)


def node_uniforms(seed: int, tag: int, nodes: np.ndarray) -> np.ndarray:
    """Per-node uniforms for hash-style assignments (e.g. split selection)."""
    return keyed_uniforms(seed, tag, nodes)


def generator(seed: int, *tags: int) -> np.random.Generator:
    """Sequential Philox generator keyed by (seed, tags).

    Distinct tag tuples give independent streams for the same seed.
    """
    with np.errstate(over="ignore"):
        h = _finalize(_word(seed) * _W_SEED)
        for t in tags:
            h = _finalize(h ^ (_word(t) * _W_ITEM))
        key = np.array([_word(seed), h], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
