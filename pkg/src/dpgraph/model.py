"""Tree-structured graph convolution with hand-derived gradients.

The model is the classic encode / aggregate / decode stack evaluated over a
rooted subgraph tree: leaves contribute their encoded features, every
internal node (and always the root) mixes its own encoded features with its
children's embeddings using uniform 1/(deg+1) weights, applies the shared
aggregation layer, and the root embedding is decoded into class logits.
Gradients are reverse-mode by hand for exactly this architecture; there is
no autodiff engine here, which is the point: per-example gradients have to
be cheap, exact, and allocation-light because the private training step
computes one per subgraph per iteration.

Parameters fall into three blocks named "enc", "agg", "dec"; those names are
the clipping and noise granularity used by the trainer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import rng
from .graph import normalize_row
from .sampler import Subgraph, TreeNode

BLOCK_NAMES = ("enc", "agg", "dec")

Layer = tuple[np.ndarray, np.ndarray]  # (weight (out, in), bias (out,))


def _iter_named(enc_layers, agg, dec_layers) -> Iterator[tuple[str, np.ndarray]]:
    """Canonical (name, array) order: enc.i.{W,b}, agg.{W,b}, dec.i.{W,b}."""
    for i, (w, b) in enumerate(enc_layers):
        yield f"enc.{i}.W", w
        yield f"enc.{i}.b", b
    yield "agg.W", agg[0]
    yield "agg.b", agg[1]
    for i, (w, b) in enumerate(dec_layers):
        yield f"dec.{i}.W", w
        yield f"dec.{i}.b", b


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; widths are desk-scale by default."""

    n_enc: int = 1
    n_dec: int = 1
    hidden: int = 32
    activation: str = "tanh"
    layers_r: int = 1

    def __post_init__(self) -> None:
        if self.n_enc not in (1, 2) or self.n_dec not in (1, 2):
            raise ValueError("n_enc and n_dec must be 1 or 2")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be 'relu' or 'tanh'")
        if self.layers_r not in (0, 1, 2):
            raise ValueError("layers_r must be 0, 1 or 2")


@dataclass(frozen=True)
class ModelParams:
    """The three parameter blocks plus the activation tag they were built for."""

    enc_layers: tuple[Layer, ...]
    agg: Layer
    dec_layers: tuple[Layer, ...]
    activation: str

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        return _iter_named(self.enc_layers, self.agg, self.dec_layers)

    def validate(self) -> None:
        if self.activation not in ("relu", "tanh"):
            raise ValueError("unknown activation tag")
        dims = [w.shape for _, w in self.named_arrays()]
        if not dims:
            raise ValueError("empty parameter set")
        for name, a in self.named_arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite entries in {name}")
        h = self.agg[0].shape[0]
        if self.agg[0].shape != (h, h):
            raise ValueError("aggregation weight must be square")
        if self.enc_layers[-1][0].shape[0] != h:
            raise ValueError("encoder output width must match aggregation width")
        if self.dec_layers[0][0].shape[1] != h:
            raise ValueError("decoder input width must match aggregation width")


@dataclass(frozen=True)
class GradientBundle:
    """Per-example gradient, shape-identical to ModelParams; root is provenance."""

    enc_layers: tuple[Layer, ...]
    agg: Layer
    dec_layers: tuple[Layer, ...]
    root: int

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        return _iter_named(self.enc_layers, self.agg, self.dec_layers)

    def block_arrays(self, block: str) -> list[np.ndarray]:
        return [a for name, a in self.named_arrays() if name.split(".")[0] == block]

    def block_norm(self, block: str) -> float:
        total = 0.0
        for a in self.block_arrays(block):
            total += float(np.sum(a * a))
        return math.sqrt(total)

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for _, a in self.named_arrays())


def init_params(cfg: ModelConfig, feature_dim: int, num_classes: int,
                seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, fixed seed, per layer."""
    if feature_dim < 1 or num_classes < 1:
        raise ValueError("feature_dim and num_classes must be positive")
    gen = rng.generator(seed, 7)
    h = cfg.hidden

    def layer(out_dim: int, in_dim: int) -> Layer:
        bound = 1.0 / math.sqrt(in_dim)
        w = gen.uniform(-bound, bound, size=(out_dim, in_dim))
        b = gen.uniform(-bound, bound, size=out_dim)
        return w, b

    enc = [layer(h, feature_dim)]
    if cfg.n_enc == 2:
        enc.append(layer(h, h))
    agg = layer(h, h)
    dec = []
    if cfg.n_dec == 2:
        dec.append(layer(h, h))
    dec.append(layer(num_classes, h))
    return ModelParams(enc_layers=tuple(enc), agg=agg, dec_layers=tuple(dec),
                       activation=cfg.activation)


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _act_deriv(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


class _NodeTrace:
    """Forward intermediates of one tree node, kept only when grads are needed."""

    __slots__ = ("enc_inputs", "enc_pres", "enc_posts", "agg_input", "agg_pre",
                 "emb", "weights", "children", "aggregated")

    def __init__(self) -> None:
        self.enc_inputs: list[np.ndarray] = []
        self.enc_pres: list[np.ndarray] = []
        self.enc_posts: list[np.ndarray] = []
        self.agg_input: np.ndarray | None = None
        self.agg_pre: np.ndarray | None = None
        self.emb: np.ndarray | None = None
        self.weights: np.ndarray | None = None
        self.children: list["_NodeTrace"] = []
        self.aggregated = False


def _encode(x: np.ndarray, params: ModelParams,
            trace: _NodeTrace | None) -> np.ndarray:
    h = x
    for w, b in params.enc_layers:
        pre = w @ h + b
        post = _act(params.activation, pre)
        if trace is not None:
            trace.enc_inputs.append(h)
            trace.enc_pres.append(pre)
            trace.enc_posts.append(post)
        h = post
    return h


def _embed(node: TreeNode, is_root: bool, X: np.ndarray, params: ModelParams,
           trace: _NodeTrace | None) -> np.ndarray:
    """Bottom-up embedding: plain leaves encode, everything else aggregates."""
    if not is_root and not node.children:
        enc = _encode(X[node.node_id], params, trace)
        if trace is not None:
            trace.emb = enc
        return enc

    child_embs = []
    for child in node.children:
        ct = _NodeTrace() if trace is not None else None
        child_embs.append(_embed(child, False, X, params, ct))
        if trace is not None:
            trace.children.append(ct)
    self_enc = _encode(X[node.node_id], params, trace)
    weights = normalize_row([c.node_id for c in node.children], node.node_id)
    z = weights[0] * self_enc
    for wi, emb in zip(weights[1:], child_embs):
        z = z + wi * emb
    w_agg, b_agg = params.agg
    pre = w_agg @ z + b_agg
    emb = _act(params.activation, pre)
    if trace is not None:
        trace.aggregated = True
        trace.weights = weights
        trace.agg_input = z
        trace.agg_pre = pre
        trace.emb = emb
    return emb


def _decode(h: np.ndarray, params: ModelParams,
            caches: list | None) -> np.ndarray:
    n = len(params.dec_layers)
    for i, (w, b) in enumerate(params.dec_layers):
        pre = w @ h + b
        if i < n - 1:
            post = _act(params.activation, pre)
        else:
            post = pre  # logits stay linear
        if caches is not None:
            caches.append((h, pre, post))
        h = post
    return h


def forward(sub: Subgraph, X: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class logits for the subgraph's root node. Pure and deterministic."""
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    feats = X[list(sub.contains)]
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite features in subgraph")
    if X.shape[1] != params.enc_layers[0][0].shape[1]:
        raise ValueError("feature width does not match encoder input")
    h_root = _embed(sub.tree, True, X, params, None)
    return _decode(h_root, params, None)


def loss(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy with max-subtraction; label must be a valid class."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_norm = math.log(np.sum(np.exp(shifted)))
    return float(log_norm - shifted[label])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _zero_like(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def per_example_gradient(sub: Subgraph, X: np.ndarray, y: int,
                         params: ModelParams) -> GradientBundle:
    """Exact gradient of loss(forward(sub), y) w.r.t. every parameter."""
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != params.enc_layers[0][0].shape[1]:
        raise ValueError("feature width does not match encoder input")

    root_trace = _NodeTrace()
    h_root = _embed(sub.tree, True, X, params, root_trace)
    dec_caches: list = []
    logits = _decode(h_root, params, dec_caches)
    if not 0 <= y < logits.shape[0]:
        raise ValueError(f"label {y} out of range")

    grads = _zero_like(params)

    # decoder backward
    delta = _softmax(logits)
    delta[y] -= 1.0
    n_dec = len(params.dec_layers)
    for i in range(n_dec - 1, -1, -1):
        h_in, pre, post = dec_caches[i]
        if i < n_dec - 1:
            delta = delta * _act_deriv(params.activation, pre, post)
        grads[f"dec.{i}.W"] += np.outer(delta, h_in)
        grads[f"dec.{i}.b"] += delta
        delta = params.dec_layers[i][0].T @ delta

    _backprop_node(root_trace, delta, params, grads)

    bundle = GradientBundle(
        enc_layers=tuple((grads[f"enc.{i}.W"], grads[f"enc.{i}.b"])
                         for i in range(len(params.enc_layers))),
        agg=(grads["agg.W"], grads["agg.b"]),
        dec_layers=tuple((grads[f"dec.{i}.W"], grads[f"dec.{i}.b"])
                         for i in range(n_dec)),
        root=sub.root,
    )
    return bundle


def _backprop_enc(trace: _NodeTrace, d_out: np.ndarray, params: ModelParams,
                  grads: dict[str, np.ndarray]) -> None:
    for i in range(len(params.enc_layers) - 1, -1, -1):
        pre, post = trace.enc_pres[i], trace.enc_posts[i]
        delta = d_out * _act_deriv(params.activation, pre, post)
        grads[f"enc.{i}.W"] += np.outer(delta, trace.enc_inputs[i])
        grads[f"enc.{i}.b"] += delta
        d_out = params.enc_layers[i][0].T @ delta


def _backprop_node(trace: _NodeTrace, d_emb: np.ndarray, params: ModelParams,
                   grads: dict[str, np.ndarray]) -> None:
    if not trace.aggregated:
        _backprop_enc(trace, d_emb, params, grads)
        return
    delta = d_emb * _act_deriv(params.activation, trace.agg_pre, trace.emb)
    grads["agg.W"] += np.outer(delta, trace.agg_input)
    grads["agg.b"] += delta
    d_z = params.agg[0].T @ delta
    weights = trace.weights
    _backprop_enc(trace, weights[0] * d_z, params, grads)
    for wi, child in zip(weights[1:], trace.children):
        _backprop_node(child, wi * d_z, params, grads)


# kept strictly below 1 so a clipped block re-clips to itself bit-for-bit
_CLIP_SLACK = 1.0 - 1e-13


def clip_per_layer(g: GradientBundle,
                   thresholds: Mapping[str, float]) -> GradientBundle:
    """Scale each block to L2 norm at most its threshold; zero stays zero."""
    for block in BLOCK_NAMES:
        if thresholds[block] <= 0:
            raise ValueError(f"threshold for block '{block}' must be > 0")

    factors = {}
    for block in BLOCK_NAMES:
        norm = g.block_norm(block)
        c = float(thresholds[block])
        factors[block] = 1.0 if norm <= c else (c / norm) * _CLIP_SLACK

    def scale(name: str, a: np.ndarray) -> np.ndarray:
        f = factors[name.split(".")[0]]
        return a if f == 1.0 else a * f

    return GradientBundle(
        enc_layers=tuple((scale(f"enc.{i}.W", w), scale(f"enc.{i}.b", b))
                         for i, (w, b) in enumerate(g.enc_layers)),
        agg=(scale("agg.W", g.agg[0]), scale("agg.b", g.agg[1])),
        dec_layers=tuple((scale(f"dec.{i}.W", w), scale(f"dec.{i}.b", b))
                         for i, (w, b) in enumerate(g.dec_layers)),
        root=g.root,
    )


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Flat little-endian f64 binary in canonical block order, JSON header line."""
    params.validate()
    named = list(params.named_arrays())
    header = {
        "format": "dpgraph-checkpoint-v1",
        "activation": params.activation,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in named],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in named)
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: malformed checkpoint header") from None
    if header.get("format") != "dpgraph-checkpoint-v1":
        raise ValueError(f"{path}: not a dpgraph checkpoint")
    body = raw[nl + 1:]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: checkpoint truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes after last array")

    def take_layers(prefix: str) -> tuple[Layer, ...]:
        layers = []
        i = 0
        while f"{prefix}.{i}.W" in arrays:
            layers.append((arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"]))
            i += 1
        return tuple(layers)

    params = ModelParams(
        enc_layers=take_layers("enc"),
        agg=(arrays["agg.W"], arrays["agg.b"]),
        dec_layers=take_layers("dec"),
        activation=header["activation"],
    )
    params.validate()
    return params
