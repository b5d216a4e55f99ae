"""Private training loops: clipped noisy SGD and its Adam variant.

The loop samples the subgraph set once up front, calibrates per-block clip
thresholds from gradient norms at the initial parameters, then iterates:
draw a uniform fixed-size minibatch of subgraphs, sum their clipped
per-example gradients in node-id order, add per-block Gaussian noise with
std lambda * 2 C_l * n_bound(k, r), and apply either the plain (eta/m) step
or the bias-corrected moment update. The noise multiplier lambda is the only
knob privacy cost depends on; lambda = 0 turns the same loop into the
non-private baseline. Evaluation always runs on full-neighborhood trees:
released parameters are already private, so inference needs no sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .accountant import PrivacySpec, rdp_to_dp
from .graph import GraphDataset
from .model import (BLOCK_NAMES, GradientBundle, ModelConfig, ModelParams,
                    clip_per_layer, forward, init_params, loss,
                    per_example_gradient)
from .parallel import parallel_map
from .sampler import SamplerConfig, Subgraph, inference_tree, n_bound, sample_subgraphs

logger = logging.getLogger(__name__)

_CALIBRATION_CAP = 10_000


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    learning_rate: float
    iterations: int
    noise_multiplier: float
    clip_percentile: float = 75.0
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0 (0 = non-private)")
        if not 0 < self.clip_percentile <= 100:
            raise ValueError("clip_percentile must lie in (0, 100]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        object.__setattr__(self, "adam_betas",
                           (float(b1), float(b2)))


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    train_loss: float
    val_accuracy: float
    test_accuracy: float
    epsilon: float


@dataclass(frozen=True)
class PerClassRow:
    label: int
    train_count: int
    eval_count: int
    accuracy: float


@dataclass(frozen=True)
class TrainLog:
    rows: tuple[TrainLogRow, ...]
    per_class: tuple[PerClassRow, ...]


@dataclass
class AdamMoments:
    """First/second moment accumulators, shape-identical to the parameters."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamMoments":
        return cls(first={n: np.zeros_like(a) for n, a in params.named_arrays()},
                   second={n: np.zeros_like(a) for n, a in params.named_arrays()})


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise ValueError("no values to take a percentile of")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(percentile / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def calibrate_clip_thresholds(subgraphs: list[Subgraph], X: np.ndarray,
                              Y: np.ndarray, params0: ModelParams,
                              percentile: float = 75.0) -> dict[str, float]:
    """Per-block clip thresholds: nearest-rank percentile of gradient norms.

    Norms are taken per example per block at the initial parameters over all
    training subgraphs, or a uniform 10,000-subgraph subsample when there are
    more. A block whose chosen threshold is zero means the init is degenerate
    (noise scaled by it would vanish) and raises.
    """
    if not subgraphs:
        raise ValueError("no training subgraphs to calibrate on")
    pool = subgraphs
    if len(pool) > _CALIBRATION_CAP:
        gen = rng.generator(0, 11, len(pool))
        idx = sample_minibatch(len(pool), _CALIBRATION_CAP, gen)
        pool = [pool[i] for i in idx]

    def norms_for(sub: Subgraph) -> tuple[float, ...]:
        g = per_example_gradient(sub, X, int(Y[sub.root]), params0)
        return tuple(g.block_norm(b) for b in BLOCK_NAMES)

    all_norms = np.array(parallel_map(norms_for, pool))
    thresholds: dict[str, float] = {}
    for j, block in enumerate(BLOCK_NAMES):
        c = nearest_rank(all_norms[:, j], percentile)
        if c <= 0.0:
            raise ValueError(
                f"degenerate initialization: {block} gradient norm percentile is 0")
        thresholds[block] = c
    return thresholds


def sample_minibatch(num_train: int, m: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform size-m subset of range(num_train), without replacement.

    Partial Fisher-Yates: m swaps into the front of an index array, so every
    size-m subset is equally likely. Returned sorted ascending, which is also
    the deterministic reduction order used by the steps.
    """
    if not 1 <= m <= num_train:
        raise ValueError(f"need 1 <= m <= {num_train}, got m={m}")
    pool = np.arange(num_train, dtype=np.int64)
    for i in range(m):
        j = i + int(gen.integers(0, num_train - i))
        pool[i], pool[j] = pool[j], pool[i]
    front = pool[:m]
    front.sort()
    return front


def _sum_clipped(batch_grads: list[GradientBundle],
                 thresholds: dict[str, float]) -> dict[str, np.ndarray]:
    """Clip every bundle and sum in ascending root-id order."""
    if not batch_grads:
        raise ValueError("empty batch")
    for g in batch_grads:
        if not g.is_finite():
            raise ValueError(f"non-finite gradient from root node {g.root}")
    ordered = sorted(batch_grads, key=lambda g: g.root)
    total: dict[str, np.ndarray] | None = None
    for g in ordered:
        clipped = clip_per_layer(g, thresholds)
        if total is None:
            total = {name: a.copy() for name, a in clipped.named_arrays()}
        else:
            for name, a in clipped.named_arrays():
                total[name] += a
    assert total is not None
    return total


def _add_noise(update: dict[str, np.ndarray], thresholds: dict[str, float],
               noise_multiplier: float, occurrence_bound: int,
               gen: np.random.Generator) -> None:
    """In-place per-block Gaussian noise, std = lambda * 2 C_l * bound.

    Arrays are visited in canonical name order so the stream is consumed
    identically regardless of thread count.
    """
    if noise_multiplier == 0.0:
        return
    for name in update:
        sigma = noise_multiplier * 2.0 * thresholds[name.split(".")[0]] * occurrence_bound
        update[name] = update[name] + gen.normal(0.0, sigma, size=update[name].shape)


def _apply(params: ModelParams, step: dict[str, np.ndarray]) -> ModelParams:
    arrays = {name: a - step[name] for name, a in params.named_arrays()}

    def take(prefix: str) -> tuple:
        out = []
        i = 0
        while f"{prefix}.{i}.W" in arrays:
            out.append((arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"]))
            i += 1
        return tuple(out)

    return ModelParams(enc_layers=take("enc"),
                       agg=(arrays["agg.W"], arrays["agg.b"]),
                       dec_layers=take("dec"),
                       activation=params.activation)


def dp_sgd_step(params: ModelParams, batch_grads: list[GradientBundle],
                thresholds: dict[str, float], noise_multiplier: float,
                learning_rate: float, batch_size: int, occurrence_bound: int,
                gen: np.random.Generator) -> ModelParams:
    """One clipped noisy gradient step: theta <- theta - (eta/m) u_noisy."""
    u = _sum_clipped(batch_grads, thresholds)
    _add_noise(u, thresholds, noise_multiplier, occurrence_bound, gen)
    scale = learning_rate / batch_size
    return _apply(params, {name: scale * a for name, a in u.items()})


def dp_adam_step(params: ModelParams, moments: AdamMoments,
                 batch_grads: list[GradientBundle], thresholds: dict[str, float],
                 noise_multiplier: float, learning_rate: float,
                 betas: tuple[float, float], adam_eps: float, t: int,
                 batch_size: int, occurrence_bound: int,
                 gen: np.random.Generator) -> tuple[ModelParams, AdamMoments]:
    """Adam on the noisy gradient sum; the noise is identical to the SGD step.

    Moment estimates see the already-noised u_t, so the privacy accounting
    does not change. Bias correction divides by 1 - beta^t with t >= 1.
    """
    if t < 1:
        raise ValueError("t must be >= 1 for bias correction")
    b1, b2 = betas
    u = _sum_clipped(batch_grads, thresholds)
    _add_noise(u, thresholds, noise_multiplier, occurrence_bound, gen)

    first = {n: b1 * moments.first[n] + (1.0 - b1) * u[n] for n in u}
    second = {n: b2 * moments.second[n] + (1.0 - b2) * (u[n] * u[n]) for n in u}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    scale = learning_rate / batch_size
    step = {n: scale * (first[n] / c1) / (np.sqrt(second[n] / c2) + adam_eps)
            for n in u}
    return _apply(params, step), AdamMoments(first=first, second=second)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: tuple[PerClassRow, ...]


def evaluate(params: ModelParams, g: GraphDataset, split: frozenset[int],
             model_cfg: ModelConfig) -> EvalResult:
    """Argmax accuracy over the split, full-neighborhood inference trees.

    Per-class rows are ordered by how often the class occurs in the training
    set, most frequent first (ties toward the smaller label id).
    """
    if not split:
        raise ValueError("split is empty")
    nodes = sorted(split)
    for v in nodes:
        if g.labels[v] < 0:
            raise ValueError(f"evaluation node {v} has no label")

    def predict(v: int) -> int:
        tree = inference_tree(g, v, model_cfg.layers_r)
        return int(np.argmax(forward(tree, g.features, params)))

    preds = parallel_map(predict, nodes)
    truth = [int(g.labels[v]) for v in nodes]
    hits = sum(1 for p, t in zip(preds, truth) if p == t)
    accuracy = hits / len(nodes)

    train_counts = {c: 0 for c in range(g.num_classes)}
    for v in g.train_set:
        train_counts[int(g.labels[v])] += 1
    order = sorted(train_counts, key=lambda c: (-train_counts[c], c))
    per_class = []
    for c in order:
        idx = [i for i, t in enumerate(truth) if t == c]
        if idx:
            acc = sum(1 for i in idx if preds[i] == truth[i]) / len(idx)
        else:
            acc = float("nan")
        per_class.append(PerClassRow(label=c, train_count=train_counts[c],
                                     eval_count=len(idx), accuracy=acc))
    return EvalResult(accuracy=accuracy, per_class=tuple(per_class))


def _epsilon_at(step: int, n_train: int, sampler_cfg: SamplerConfig,
                train_cfg: TrainConfig, delta: float,
                alpha_grid: tuple[float, ...] | None) -> float:
    """Privacy spent after `step` iterations; inf in non-private mode."""
    lam = train_cfg.noise_multiplier
    if lam == 0.0:
        return float("inf")
    bound = n_bound(sampler_cfg.k, sampler_cfg.r)
    kwargs = dict(n_train=n_train, k=sampler_cfg.k, r=sampler_cfg.r,
                  batch_size=train_cfg.batch_size, clip=1.0,
                  sigma=lam * 2.0 * bound, steps=step, delta=delta)
    if alpha_grid is not None:
        kwargs["alpha_grid"] = alpha_grid
    return rdp_to_dp(PrivacySpec(**kwargs)).epsilon


def train(g: GraphDataset, sampler_cfg: SamplerConfig, model_cfg: ModelConfig,
          train_cfg: TrainConfig, delta: float = 1e-5,
          alpha_grid: tuple[float, ...] | None = None
          ) -> tuple[ModelParams, TrainLog]:
    """Full pipeline: sample once, calibrate, iterate, log, final per-class.

    Logged rows land every eval_every steps and always at the last step.
    train_loss is the mean loss of the step's own minibatch at the updated
    parameters; accuracies use full-neighborhood trees; epsilon is the
    accountant's bill for the steps taken so far.
    """
    if not g.train_set:
        raise ValueError("training set is empty")
    if train_cfg.batch_size > len(g.train_set):
        raise ValueError(
            f"batch_size {train_cfg.batch_size} exceeds training set size "
            f"{len(g.train_set)}")
    if g.num_classes < 1:
        raise ValueError("dataset has no labeled classes")

    subgraphs = sample_subgraphs(g, sampler_cfg)
    X, Y = g.features, g.labels
    params = init_params(model_cfg, g.feature_dim, g.num_classes,
                         seed=train_cfg.seed)
    thresholds = calibrate_clip_thresholds(subgraphs, X, Y, params,
                                           train_cfg.clip_percentile)
    logger.info("clip thresholds: %s",
                {b: round(c, 6) for b, c in thresholds.items()})

    bound = n_bound(sampler_cfg.k, sampler_cfg.r)
    loop_gen = rng.generator(train_cfg.seed, 13)
    moments = AdamMoments.zeros(params)
    rows: list[TrainLogRow] = []
    n_train = len(subgraphs)

    for t in range(1, train_cfg.iterations + 1):
        idx = sample_minibatch(n_train, train_cfg.batch_size, loop_gen)
        batch = [subgraphs[i] for i in idx]
        grads = parallel_map(
            lambda sub: per_example_gradient(sub, X, int(Y[sub.root]), params),
            batch)
        if train_cfg.optimizer == "sgd":
            params = dp_sgd_step(params, grads, thresholds,
                                 train_cfg.noise_multiplier,
                                 train_cfg.learning_rate, train_cfg.batch_size,
                                 bound, loop_gen)
        else:
            params, moments = dp_adam_step(params, moments, grads, thresholds,
                                           train_cfg.noise_multiplier,
                                           train_cfg.learning_rate,
                                           train_cfg.adam_betas,
                                           train_cfg.adam_eps, t,
                                           train_cfg.batch_size, bound, loop_gen)

        if t % train_cfg.eval_every == 0 or t == train_cfg.iterations:
            losses = parallel_map(
                lambda sub: loss(forward(sub, X, params), int(Y[sub.root])),
                batch)
            val_acc = (evaluate(params, g, g.val_set, model_cfg).accuracy
                       if g.val_set else float("nan"))
            test_acc = (evaluate(params, g, g.test_set, model_cfg).accuracy
                        if g.test_set else float("nan"))
            eps = _epsilon_at(t, n_train, sampler_cfg, train_cfg, delta, alpha_grid)
            rows.append(TrainLogRow(step=t, train_loss=float(np.mean(losses)),
                                    val_accuracy=val_acc, test_accuracy=test_acc,
                                    epsilon=eps))

    if g.test_set:
        per_class = evaluate(params, g, g.test_set, model_cfg).per_class
    elif g.val_set:
        per_class = evaluate(params, g, g.val_set, model_cfg).per_class
    else:
        per_class = ()
    return params, TrainLog(rows=tuple(rows), per_class=per_class)
