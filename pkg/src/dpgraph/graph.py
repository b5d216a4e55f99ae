"""Graph container, CSV input/output, and the synthetic block-model generator.

File formats (all UTF-8, "\n" line endings, header row optional on read):

* edge file: two integer columns ``src,dst``
* feature file: n rows of d float columns
* label file: ``node,label`` integer pairs; absent nodes are unlabeled
* split file: ``node,split`` with split 0=train, 1=validation, 2=test
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import rng

logger = logging.getLogger(__name__)

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2


@dataclass(frozen=True)
class GraphDataset:
    """A directed graph with node features, partial labels, and data splits.

    ``labels[v] == -1`` marks an unlabeled node. Edges are stored as a
    lexicographically sorted, duplicate-free ``(E, 2)`` int array; self-loops
    are rejected outright (normalization re-introduces the self term where it
    is wanted).
    """

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    train_set: frozenset[int]
    val_set: frozenset[int]
    test_set: frozenset[int]
    num_classes: int
    _out: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)
    _in_train: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d array")
        object.__setattr__(self, "features", feats)
        n = feats.shape[0]

        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
        if labels.size and labels.min() < -1:
            raise ValueError("labels must be >= -1 (-1 marks unlabeled)")
        if labels.size and labels.max() >= self.num_classes and labels.max() >= 0:
            raise ValueError("label id exceeds num_classes")
        object.__setattr__(self, "labels", labels)

        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if np.any(np.all(edges[1:] == edges[:-1], axis=1)):
                raise ValueError("duplicate directed edges are not allowed")
        object.__setattr__(self, "edges", edges)

        for name in ("train_set", "val_set", "test_set"):
            s = frozenset(int(v) for v in getattr(self, name))
            if s and (min(s) < 0 or max(s) >= n):
                raise ValueError(f"{name} contains a node id out of range")
            object.__setattr__(self, name, s)
        if (self.train_set & self.val_set
                or self.train_set & self.test_set
                or self.val_set & self.test_set):
            raise ValueError("train/val/test sets must be disjoint")
        unlabeled_train = [v for v in self.train_set if labels[v] < 0]
        if unlabeled_train:
            raise ValueError(
                f"train nodes without a label: {sorted(unlabeled_train)[:5]}")

        # adjacency views used by the samplers and the inference path
        out_lists: list[list[int]] = [[] for _ in range(n)]
        in_train: list[list[int]] = [[] for _ in range(n)]
        train = self.train_set
        for s, d in edges:
            out_lists[s].append(int(d))
            if int(s) in train:
                in_train[d].append(int(s))
        object.__setattr__(
            self, "_out",
            tuple(np.array(sorted(l), dtype=np.int64) for l in out_lists))
        object.__setattr__(
            self, "_in_train",
            tuple(np.array(sorted(l), dtype=np.int64) for l in in_train))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def out_neighbors(self, v: int) -> np.ndarray:
        """Targets of edges leaving v, sorted by node id."""
        return self._out[v]

    def train_in_sources(self, v: int) -> np.ndarray:
        """Training-set sources of edges entering v, sorted by node id."""
        return self._in_train[v]

    @property
    def train_nodes(self) -> np.ndarray:
        return np.array(sorted(self.train_set), dtype=np.int64)


@dataclass(frozen=True)
class DegreeHistogram:
    """Map from training in-degree to node count."""

    counts: Mapping[int, int]

    def total(self) -> int:
        return int(sum(self.counts.values()))

    def fractions(self) -> dict[int, float]:
        """Counts normalized to sum to 1 (empty histogram stays empty)."""
        t = self.total()
        if t == 0:
            return {}
        return {d: c / t for d, c in sorted(self.counts.items())}


def train_in_degree(g: GraphDataset, v: int) -> int:
    """Number of directed in-edges of v whose source is a training node."""
    return int(len(g.train_in_sources(v)))


def degree_histogram(g: GraphDataset) -> DegreeHistogram:
    counts: dict[int, int] = {}
    for v in range(g.num_nodes):
        d = train_in_degree(g, v)
        counts[d] = counts.get(d, 0) + 1
    return DegreeHistogram(counts)


def normalize_row(neighbors: Sequence[int], self_node: int) -> np.ndarray:
    """Uniform aggregation weights 1/(deg+1) for self and each neighbor.

    This is one row of the inverse-degree normalized adjacency with a self
    loop added: entry 0 weighs the node itself, the rest its neighbors.
    """
    deg = len(neighbors)
    return np.full(deg + 1, 1.0 / (deg + 1), dtype=np.float64)


def _iter_rows(path: Path, has_header: bool) -> Iterable[tuple[int, list[str]]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            yield lineno, row


def _parse_int(text: str, path: Path, lineno: int, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ValueError(f"{path}:{lineno}: bad {what} {text!r}") from None


def load_graph(edge_file: str | Path,
               feature_file: str | Path,
               label_file: str | Path,
               split_file: str | Path,
               has_header: bool = False) -> GraphDataset:
    """Load a dataset from the four CSV files.

    Duplicate edge rows are removed with a logged warning; self-loops,
    out-of-range endpoints, malformed rows, ragged feature rows, and split
    conflicts raise ValueError with the offending file and line.
    """
    edge_file, feature_file = Path(edge_file), Path(feature_file)
    label_file, split_file = Path(label_file), Path(split_file)

    rows: list[list[float]] = []
    width = -1
    for lineno, row in _iter_rows(feature_file, has_header):
        try:
            vals = [float(x) for x in row]
        except ValueError:
            raise ValueError(f"{feature_file}:{lineno}: non-numeric feature row") from None
        if width < 0:
            width = len(vals)
        elif len(vals) != width:
            raise ValueError(
                f"{feature_file}:{lineno}: expected {width} columns, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ValueError(f"{feature_file}: no feature rows; node count would be 0")
    features = np.array(rows, dtype=np.float64)
    n = features.shape[0]

    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    duplicates = 0
    for lineno, row in _iter_rows(edge_file, has_header):
        if len(row) != 2:
            raise ValueError(f"{edge_file}:{lineno}: expected 2 columns")
        s = _parse_int(row[0], edge_file, lineno, "source id")
        d = _parse_int(row[1], edge_file, lineno, "target id")
        if not (0 <= s < n and 0 <= d < n):
            raise ValueError(f"{edge_file}:{lineno}: endpoint out of range for n={n}")
        if s == d:
            raise ValueError(f"{edge_file}:{lineno}: self-loop {s}->{d} not allowed")
        if (s, d) in seen:
            duplicates += 1
            continue
        seen.add((s, d))
        edges.append((s, d))
    if duplicates:
        logger.warning("%s: removed %d duplicate edge row(s)", edge_file, duplicates)

    labels = np.full(n, -1, dtype=np.int64)
    labeled: set[int] = set()
    for lineno, row in _iter_rows(label_file, has_header):
        if len(row) != 2:
            raise ValueError(f"{label_file}:{lineno}: expected 2 columns")
        v = _parse_int(row[0], label_file, lineno, "node id")
        y = _parse_int(row[1], label_file, lineno, "label")
        if not 0 <= v < n:
            raise ValueError(f"{label_file}:{lineno}: node id out of range for n={n}")
        if y < 0:
            raise ValueError(f"{label_file}:{lineno}: labels must be >= 0")
        if v in labeled:
            raise ValueError(f"{label_file}:{lineno}: node {v} labeled twice")
        labeled.add(v)
        labels[v] = y

    splits: dict[int, int] = {}
    for lineno, row in _iter_rows(split_file, has_header):
        if len(row) != 2:
            raise ValueError(f"{split_file}:{lineno}: expected 2 columns")
        v = _parse_int(row[0], split_file, lineno, "node id")
        s = _parse_int(row[1], split_file, lineno, "split id")
        if not 0 <= v < n:
            raise ValueError(f"{split_file}:{lineno}: node id out of range for n={n}")
        if s not in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST):
            raise ValueError(f"{split_file}:{lineno}: split must be 0, 1 or 2")
        if v in splits:
            raise ValueError(f"{split_file}:{lineno}: node {v} assigned to two splits")
        splits[v] = s

    num_classes = int(labels.max()) + 1 if labeled else 0
    return GraphDataset(
        features=features,
        labels=labels,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        train_set=frozenset(v for v, s in splits.items() if s == SPLIT_TRAIN),
        val_set=frozenset(v for v, s in splits.items() if s == SPLIT_VAL),
        test_set=frozenset(v for v, s in splits.items() if s == SPLIT_TEST),
        num_classes=num_classes,
    )


def save_graph(g: GraphDataset,
               edge_file: str | Path,
               feature_file: str | Path,
               label_file: str | Path,
               split_file: str | Path) -> None:
    """Write the four CSV files (headerless, "\n" endings, round-trip exact)."""
    def _open(p):
        return Path(p).open("w", encoding="utf-8", newline="\n")

    with _open(edge_file) as fh:
        for s, d in g.edges:
            fh.write(f"{int(s)},{int(d)}\n")
    with _open(feature_file) as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with _open(label_file) as fh:
        for v in range(g.num_nodes):
            if g.labels[v] >= 0:
                fh.write(f"{v},{int(g.labels[v])}\n")
    with _open(split_file) as fh:
        assignments = ([(v, SPLIT_TRAIN) for v in sorted(g.train_set)]
                       + [(v, SPLIT_VAL) for v in sorted(g.val_set)]
                       + [(v, SPLIT_TEST) for v in sorted(g.test_set)])
        for v, s in sorted(assignments):
            fh.write(f"{v},{s}\n")


def generate_sbm(n: int,
                 num_classes: int,
                 p_in: float,
                 p_out: float,
                 feature_dim: int,
                 feature_noise: float,
                 seed: int) -> GraphDataset:
    """Directed stochastic block model with class-conditional Gaussian features.

    Nodes are assigned to classes round-robin. Each ordered pair (u, v), u != v,
    becomes an edge with probability p_in when the classes match and p_out
    otherwise. Features are the class mean plus feature_noise * N(0, I); splits
    are 60/20/20 train/val/test assigned per node by a seed-keyed hash, so the
    whole dataset is a pure function of the arguments.
    """
    if n < 1 or num_classes < 1:
        raise ValueError("n and num_classes must be positive")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    if feature_noise < 0:
        raise ValueError("feature_noise must be >= 0")

    classes = np.arange(n, dtype=np.int64) % num_classes

    means = rng.generator(seed, 1).standard_normal((num_classes, feature_dim))
    noise = rng.generator(seed, 2).standard_normal((n, feature_dim))
    features = means[classes] + feature_noise * noise

    prob = np.where(classes[:, None] == classes[None, :], p_in, p_out)
    np.fill_diagonal(prob, 0.0)
    u = rng.generator(seed, 3).random((n, n))
    edges = np.argwhere(u < prob).astype(np.int64)

    su = rng.node_uniforms(seed, 4, np.arange(n))
    train = frozenset(int(v) for v in np.nonzero(su < 0.6)[0])
    val = frozenset(int(v) for v in np.nonzero((su >= 0.6) & (su < 0.8))[0])
    test = frozenset(int(v) for v in np.nonzero(su >= 0.8)[0])

    return GraphDataset(
        features=features,
        labels=classes,
        edges=edges,
        train_set=train,
        val_set=val,
        test_set=test,
        num_classes=num_classes,
    )
