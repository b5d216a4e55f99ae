"""Figure rendering for the report paths of the command line tools.

Every function takes already-computed rows (the same data that lands in the
delimited output next to it) and writes one PNG. Rendering is optional at the
CLI level; nothing in the library depends on this module except the commands
themselves.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_OPTS = {"dpi": 150, "metadata": {"Software": "dpgraph"}}


def _finish(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def epsilon_curve_figure(alphas, epsilons, path: str) -> None:
    """Privacy cost against the Renyi order, finite entries only."""
    alphas = np.asarray(alphas, dtype=np.float64)
    epsilons = np.asarray(epsilons, dtype=np.float64)
    finite = np.isfinite(epsilons)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(alphas[finite], epsilons[finite], marker="o", lw=1.2)
    ax.set_xlabel("order alpha")
    ax.set_ylabel("epsilon")
    ax.set_xscale("log")
    ax.set_title("epsilon by Renyi order")
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def drop_probability_figure(degrees, drop_prob, path: str) -> None:
    degrees = np.asarray(degrees)
    drop_prob = np.asarray(drop_prob, dtype=np.float64)
    pos = drop_prob > 0
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if np.any(pos):
        ax.semilogy(degrees[pos], drop_prob[pos], lw=1.2)
    ax.set_xlabel("training in-degree")
    ax.set_ylabel("drop probability")
    ax.set_title("probability a node exceeds the in-degree cap")
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def drop_delta_figure(degrees, delta, path: str) -> None:
    degrees = np.asarray(degrees)
    delta = np.asarray(delta, dtype=np.float64)
    pos = delta > 0
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if np.any(pos):
        ax.semilogy(degrees[pos], delta[pos], lw=1.2)
    ax.set_xlabel("training in-degree")
    ax.set_ylabel("adjacent-degree gap")
    ax.set_title("drop probability change from one extra in-edge")
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def subgraph_size_figure(sizes, bound: int, path: str) -> None:
    sizes = np.asarray(sizes)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    bins = np.arange(0.5, max(int(sizes.max()) if sizes.size else 1, bound) + 1.5)
    ax.hist(sizes, bins=bins, edgecolor="black", lw=0.4)
    ax.axvline(bound, color="crimson", ls="--", lw=1.0,
               label=f"size bound {bound}")
    ax.set_xlabel("subgraph size (distinct nodes)")
    ax.set_ylabel("count")
    ax.set_title("sampled subgraph sizes")
    ax.legend()
    _finish(fig, path)


def degree_histogram_figure(degrees, counts, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(np.asarray(degrees), np.asarray(counts), width=1.0, edgecolor="none")
    ax.set_xlabel("training in-degree")
    ax.set_ylabel("nodes")
    ax.set_title("training in-degree histogram")
    _finish(fig, path)


def training_curves_figure(steps, losses, val_acc, test_acc, path: str) -> None:
    steps = np.asarray(steps)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 3.8))
    ax0.plot(steps, np.asarray(losses, dtype=np.float64), lw=1.2)
    ax0.set_xlabel("step")
    ax0.set_ylabel("batch loss")
    ax0.set_title("training loss")
    ax0.grid(True, alpha=0.3)
    for series, label in ((val_acc, "validation"), (test_acc, "test")):
        arr = np.asarray(series, dtype=np.float64)
        ok = np.isfinite(arr)
        if np.any(ok):
            ax1.plot(steps[ok], arr[ok], lw=1.2, label=label)
    ax1.set_xlabel("step")
    ax1.set_ylabel("accuracy")
    ax1.set_ylim(0.0, 1.0)
    ax1.set_title("held-out accuracy")
    ax1.grid(True, alpha=0.3)
    ax1.legend()
    _finish(fig, path)


def per_class_figure(labels, accuracies, path: str) -> None:
    labels = [str(l) for l in labels]
    acc = np.asarray(accuracies, dtype=np.float64)
    acc = np.where(np.isfinite(acc), acc, 0.0)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(np.arange(len(labels)), acc, tick_label=labels,
           edgecolor="black", lw=0.4)
    ax.set_xlabel("class (ordered by training frequency)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("per-class test accuracy")
    _finish(fig, path)
