"""Training graph neural networks under node-level differential privacy.

The pieces compose in pipeline order: build or load a GraphDataset, sample
in-degree-capped training subgraphs, train with per-example clipped noisy
updates, and price the whole run with the Renyi accountant. Each piece is
importable on its own; the CLI in dpgraph.cli wires them together.
"""

from .accountant import (AccountantResult, AlphaRow, BudgetOverflowError,
                         PrivacySpec, calibrate_sigma, default_alpha_grid,
                         gamma_per_step, hypergeom_log_pmf, rdp_to_dp)
from .drop_analysis import (DropReport, build_drop_report, drop_probability,
                            drop_probability_delta, expected_drop_fraction)
from .graph import (DegreeHistogram, GraphDataset, degree_histogram,
                    generate_sbm, load_graph, normalize_row, save_graph,
                    train_in_degree)
from .model import (BLOCK_NAMES, GradientBundle, ModelConfig, ModelParams,
                    clip_per_layer, forward, init_params, load_checkpoint,
                    loss, per_example_gradient, save_checkpoint)
from .sampler import (EdgeLists, SamplerConfig, Subgraph, TreeNode, dfs_tree,
                      inference_tree, max_occurrence, n_bound,
                      sample_edgelists, sample_subgraphs)
from .trainer import (AdamMoments, EvalResult, PerClassRow, TrainConfig,
                      TrainLog, TrainLogRow, calibrate_clip_thresholds,
                      dp_adam_step, dp_sgd_step, evaluate, sample_minibatch,
                      train)
from .verify import SuiteResult, run_occurrence_suite, run_sensitivity_suite

__version__ = "0.1.0"

__all__ = [
    "AccountantResult", "AlphaRow", "BudgetOverflowError", "PrivacySpec",
    "calibrate_sigma", "default_alpha_grid", "gamma_per_step",
    "hypergeom_log_pmf", "rdp_to_dp",
    "DropReport", "build_drop_report", "drop_probability",
    "drop_probability_delta", "expected_drop_fraction",
    "DegreeHistogram", "GraphDataset", "degree_histogram", "generate_sbm",
    "load_graph", "normalize_row", "save_graph", "train_in_degree",
    "BLOCK_NAMES", "GradientBundle", "ModelConfig", "ModelParams",
    "clip_per_layer", "forward", "init_params", "load_checkpoint", "loss",
    "per_example_gradient", "save_checkpoint",
    "EdgeLists", "SamplerConfig", "Subgraph", "TreeNode", "dfs_tree",
    "inference_tree", "max_occurrence", "n_bound", "sample_edgelists",
    "sample_subgraphs",
    "AdamMoments", "EvalResult", "PerClassRow", "TrainConfig", "TrainLog",
    "TrainLogRow", "calibrate_clip_thresholds", "dp_adam_step", "dp_sgd_step",
    "evaluate", "sample_minibatch", "train",
    "SuiteResult", "run_occurrence_suite", "run_sensitivity_suite",
    "__version__",
]
