"""Command line entry point: dpgraph <subcommand>.

Subcommands: generate, sample, account, drop-analysis, train, verify. Every
command writes CSV and JSON reports into --out-dir and, unless --no-figures
is given, a PNG next to each table. Exit codes: 0 success, 2 configuration
error, 1 runtime failure; failures also emit a one-line JSON object on
stderr so callers never have to parse prose.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .accountant import PrivacySpec, default_alpha_grid, rdp_to_dp
from .drop_analysis import build_drop_report
from .graph import (DegreeHistogram, GraphDataset, degree_histogram,
                    generate_sbm, load_graph, save_graph)
from .model import ModelConfig, save_checkpoint
from .sampler import SamplerConfig, dfs_tree, max_occurrence, n_bound, \
    sample_edgelists
from .trainer import TrainConfig, train
from .verify import run_occurrence_suite, run_sensitivity_suite

DATASET_FILES = ("edges.csv", "features.csv", "labels.csv", "splits.csv")


class ConfigError(ValueError):
    """Bad flags, bad config file, or an unsatisfiable parameter combination."""


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError instead of exiting."""

    def error(self, message: str) -> None:
        raise ConfigError(message)


def _fmt(value) -> str:
    """One CSV cell. Floats use repr so reading them back is lossless."""
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, np.integer):
        value = int(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: tuple[str, ...], rows,
               include_header: bool) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if include_header:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _finite_or_none(value: float | None):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _write_json(path: Path, obj) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}")
    return out


def _load_data_dir(data_dir: str, has_header: bool) -> GraphDataset:
    base = Path(data_dir)
    paths = [base / name for name in DATASET_FILES]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError("missing dataset files: " + ", ".join(missing))
    return load_graph(*paths, has_header=has_header)


def _parse_alpha_grid(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    try:
        grid = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"--alpha-grid must be comma-separated numbers, got {text!r}")
    if not grid:
        raise ConfigError("--alpha-grid is empty")
    return grid


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args) -> int:
    out = _out_dir(args)
    g = generate_sbm(n=args.n, num_classes=args.classes, p_in=args.p_in,
                     p_out=args.p_out, feature_dim=args.feature_dim,
                     feature_noise=args.feature_noise, seed=args.seed)
    save_graph(g, *(out / name for name in DATASET_FILES))
    hist = degree_histogram(g)
    header = not args.no_header
    rows = sorted(hist.counts.items())
    _write_csv(out / "degree_histogram.csv", ("degree", "count"), rows, header)
    if not args.no_figures:
        from . import figures
        figures.degree_histogram_figure([d for d, _ in rows],
                                        [c for _, c in rows],
                                        str(out / "degree_histogram.png"))
    print(f"generated {g.num_nodes} nodes, {g.edges.shape[0]} edges, "
          f"{g.num_classes} classes "
          f"(train/val/test {len(g.train_set)}/{len(g.val_set)}/{len(g.test_set)})")
    return 0


def _cmd_sample(args) -> int:
    out = _out_dir(args)
    g = _load_data_dir(args.data, args.data_has_header)
    cfg = SamplerConfig(k=args.k, r=args.r, seed=args.seed)
    el = sample_edgelists(g, cfg)
    subs = [dfs_tree(int(v), el, cfg.r) for v in g.train_nodes]
    _, occ = max_occurrence(subs)
    bound = n_bound(cfg.k, cfg.r)
    header = not args.no_header
    _write_csv(out / "subgraphs.csv", ("root", "size", "depth", "max_fanout"),
               ((s.root, s.size, s.depth(), s.max_fanout()) for s in subs),
               header)
    _write_json(out / "sample_report.json", {
        "k": cfg.k, "r": cfg.r, "seed": cfg.seed,
        "dropped_count": len(el.dropped),
        "max_occurrence": occ,
        "n_bound": bound,
    })
    if not args.no_figures:
        from . import figures
        figures.subgraph_size_figure([s.size for s in subs], bound,
                                     str(out / "subgraph_sizes.png"))
    print(f"sampled {len(subs)} subgraphs, {len(el.dropped)} nodes dropped, "
          f"max occurrence {occ} (bound {bound})")
    return 0


def _cmd_account(args) -> int:
    out = _out_dir(args)
    grid = _parse_alpha_grid(args.alpha_grid) or default_alpha_grid()
    bound = n_bound(args.k, args.r)
    spec = PrivacySpec(n_train=args.n, k=args.k, r=args.r, batch_size=args.m,
                       clip=1.0, sigma=args.noise_multiplier * 2.0 * bound,
                       steps=args.t, delta=args.delta, alpha_grid=grid)
    result = rdp_to_dp(spec)
    header = not args.no_header
    _write_csv(out / "epsilon_curve.csv",
               ("alpha", "gamma_step", "gamma_total", "epsilon"),
               ((row.alpha, row.gamma_step, row.gamma_total, row.epsilon)
                for row in result.per_alpha),
               header)
    _write_json(out / "epsilon.json", {
        "epsilon": result.epsilon,
        "best_alpha": result.best_alpha,
        "delta": args.delta,
        "noise_multiplier": args.noise_multiplier,
        "steps": args.t,
    })
    if not args.no_figures:
        from . import figures
        figures.epsilon_curve_figure([r.alpha for r in result.per_alpha],
                                     [r.epsilon for r in result.per_alpha],
                                     str(out / "epsilon_curve.png"))
    print(f"epsilon = {result.epsilon!r} at alpha = {result.best_alpha!r} "
          f"(delta = {args.delta!r}, {args.t} steps)")
    return 0


def _read_histogram_csv(path: str) -> DegreeHistogram:
    rows: list[tuple[int, int]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ConfigError(
                    f"{path}:{lineno}: expected degree,count, got {line!r}")
            if lineno == 1 and not parts[0].lstrip("-").isdigit():
                continue
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: expected integers, got {line!r}")
    if not rows:
        raise ConfigError(f"{path}: empty degree histogram")
    if min(d for d, _ in rows) < 0 or min(c for _, c in rows) < 0:
        raise ConfigError(f"{path}: degrees and counts must be >= 0")
    counts: dict[int, int] = {}
    for d, c in rows:
        counts[d] = counts.get(d, 0) + c
    return DegreeHistogram(counts=counts)


def _cmd_drop_analysis(args) -> int:
    out = _out_dir(args)
    hist = None if args.histogram is None else _read_histogram_csv(args.histogram)
    report = build_drop_report(args.k, args.max_degree, hist)
    header = not args.no_header
    _write_csv(out / "drop_probabilities.csv",
               ("d_v", "drop_prob", "drop_prob_adjacent", "delta"),
               report.rows, header)
    _write_json(out / "drop_report.json", {
        "k": report.k,
        "max_degree": args.max_degree,
        "sup_delta": report.sup_delta,
        "expected_drop_fraction": report.expected_drop_fraction,
    })
    if not args.no_figures:
        from . import figures
        figures.drop_probability_figure(report.degrees, report.drop_prob,
                                        str(out / "drop_probability.png"))
        figures.drop_delta_figure(report.degrees, report.delta,
                                  str(out / "drop_delta.png"))
    print(f"sup delta = {report.sup_delta!r} over degrees 0..{args.max_degree} "
          f"at k = {args.k}")
    return 0


def _require_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _load_run_config(path: str, args):
    """Parse run.json into dataset + configs. Strict about unknown keys."""
    cfg_path = Path(path)
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    _require_keys(raw, {"data", "generator", "sampler", "model", "train",
                        "privacy", "out_dir"}, "run config")

    has_data = "data" in raw
    has_gen = "generator" in raw
    if has_data == has_gen:
        raise ConfigError(
            "run config needs exactly one of 'data' and 'generator'")

    try:
        if has_data:
            block = dict(raw["data"])
            _require_keys(block, {"edges", "features", "labels", "splits",
                                  "has_header"}, "'data'")
            has_header = bool(block.pop("has_header", False))
            try:
                paths = [cfg_path.parent / block[key]
                         for key in ("edges", "features", "labels", "splits")]
            except KeyError as exc:
                raise ConfigError(f"'data' block is missing {exc}")
            g = load_graph(*paths, has_header=has_header)
        else:
            block = dict(raw["generator"])
            _require_keys(block, {"n", "num_classes", "p_in", "p_out",
                                  "feature_dim", "feature_noise", "seed"},
                          "'generator'")
            block.setdefault("seed", args.seed)
            g = generate_sbm(**block)

        if "sampler" not in raw:
            raise ConfigError("run config is missing the 'sampler' block")
        sampler_block = dict(raw["sampler"])
        _require_keys(sampler_block, {"k", "r", "seed"}, "'sampler'")
        sampler_block.setdefault("seed", args.seed)
        sampler_cfg = SamplerConfig(**sampler_block)

        model_block = dict(raw.get("model", {}))
        _require_keys(model_block, {"n_enc", "n_dec", "hidden", "activation",
                                    "layers_r"}, "'model'")
        layers_r = model_block.pop("layers_r", sampler_cfg.r)
        if layers_r != sampler_cfg.r:
            raise ConfigError(
                f"model layers_r {layers_r} must match sampler r {sampler_cfg.r}")
        model_cfg = ModelConfig(layers_r=sampler_cfg.r, **model_block)

        if "train" not in raw:
            raise ConfigError("run config is missing the 'train' block")
        train_block = dict(raw["train"])
        _require_keys(train_block, {"batch_size", "learning_rate", "iterations",
                                    "noise_multiplier", "clip_percentile",
                                    "optimizer", "adam_betas", "adam_eps",
                                    "seed", "eval_every"}, "'train'")
        train_block.setdefault("seed", args.seed)
        if "adam_betas" in train_block:
            train_block["adam_betas"] = tuple(train_block["adam_betas"])
        train_cfg = TrainConfig(**train_block)

        if "privacy" not in raw or "delta" not in raw["privacy"]:
            raise ConfigError(
                "run config needs a 'privacy' block with an explicit 'delta'")
        privacy = dict(raw["privacy"])
        _require_keys(privacy, {"delta", "alpha_grid"}, "'privacy'")
        delta = float(privacy["delta"])
        alpha_grid = privacy.get("alpha_grid")
        if alpha_grid is not None:
            alpha_grid = tuple(float(a) for a in alpha_grid)
    except TypeError as exc:
        raise ConfigError(f"bad run config value: {exc}")

    out_dir = args.out_dir if args.out_dir != "." else raw.get("out_dir", ".")
    return g, sampler_cfg, model_cfg, train_cfg, delta, alpha_grid, out_dir


def _cmd_train(args) -> int:
    (g, sampler_cfg, model_cfg, train_cfg, delta, alpha_grid,
     out_dir) = _load_run_config(args.config, args)
    args.out_dir = out_dir
    out = _out_dir(args)
    params, log = train(g, sampler_cfg, model_cfg, train_cfg, delta=delta,
                        alpha_grid=alpha_grid)
    header = not args.no_header
    _write_csv(out / "trainlog.csv",
               ("step", "train_loss", "val_accuracy", "test_accuracy", "epsilon"),
               ((r.step, r.train_loss, r.val_accuracy, r.test_accuracy,
                 r.epsilon) for r in log.rows),
               header)
    _write_csv(out / "per_class_accuracy.csv",
               ("label", "train_count", "eval_count", "accuracy"),
               ((r.label, r.train_count, r.eval_count, r.accuracy)
                for r in log.per_class),
               header)
    save_checkpoint(params, out / "model.ckpt")

    lam = train_cfg.noise_multiplier
    if lam > 0:
        bound = n_bound(sampler_cfg.k, sampler_cfg.r)
        kwargs = dict(n_train=len(g.train_set), k=sampler_cfg.k, r=sampler_cfg.r,
                      batch_size=train_cfg.batch_size, clip=1.0,
                      sigma=lam * 2.0 * bound, steps=train_cfg.iterations,
                      delta=delta)
        if alpha_grid is not None:
            kwargs["alpha_grid"] = alpha_grid
        result = rdp_to_dp(PrivacySpec(**kwargs))
        epsilon, best_alpha = result.epsilon, result.best_alpha
    else:
        epsilon, best_alpha = None, None
    _write_json(out / "final_epsilon.json", {
        "epsilon": _finite_or_none(epsilon),
        "best_alpha": best_alpha,
        "delta": delta,
        "steps": train_cfg.iterations,
        "noise_multiplier": lam,
    })
    if not args.no_figures:
        from . import figures
        figures.training_curves_figure([r.step for r in log.rows],
                                       [r.train_loss for r in log.rows],
                                       [r.val_accuracy for r in log.rows],
                                       [r.test_accuracy for r in log.rows],
                                       str(out / "training_curves.png"))
        if log.per_class:
            figures.per_class_figure([r.label for r in log.per_class],
                                     [r.accuracy for r in log.per_class],
                                     str(out / "per_class_accuracy.png"))
    last = log.rows[-1]
    eps_text = "inf" if epsilon is None else repr(epsilon)
    print(f"trained {train_cfg.iterations} steps: test accuracy "
          f"{last.test_accuracy!r}, epsilon {eps_text} at delta {delta!r}")
    return 0


def _cmd_verify(args) -> int:
    out = _out_dir(args)
    occ, cap = run_occurrence_suite(trials=args.trials, seed=args.seed)
    sens = run_sensitivity_suite(pairs=args.pairs, seed=args.seed)
    suites = [occ, cap, sens]
    for suite in suites:
        print(suite.describe())
    ok = all(s.ok for s in suites)
    _write_json(out / "verify_report.json", {
        "suites": [{"name": s.name, "cases": s.cases,
                    "violations": s.violations,
                    "worst_ratio": s.worst_ratio, "ok": s.ok}
                   for s in suites],
        "ok": ok,
    })
    print("verify: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="base RNG seed (default 0)")
    common.add_argument("--out-dir", default=".",
                        help="directory for all outputs (default .)")
    common.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering, write only CSV/JSON")
    common.add_argument("--no-header", action="store_true",
                        help="omit the header row from report CSVs")

    parser = _Parser(prog="dpgraph",
                     description="Node-private GNN training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="write a synthetic stochastic block model dataset")
    p.add_argument("--n", type=int, required=True, help="number of nodes")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--p-in", type=float, required=True,
                   help="intra-class edge probability")
    p.add_argument("--p-out", type=float, required=True,
                   help="inter-class edge probability")
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("sample", parents=[common],
                       help="sample in-degree-capped training subgraphs")
    p.add_argument("--data", required=True,
                   help="directory holding " + ", ".join(DATASET_FILES))
    p.add_argument("--data-has-header", action="store_true",
                   help="dataset CSVs carry a header row")
    p.add_argument("--k", type=int, required=True, help="max in-degree")
    p.add_argument("--r", type=int, required=True, help="tree depth")
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("account", parents=[common],
                       help="compute the (epsilon, delta) privacy bill")
    p.add_argument("--n", type=int, required=True, help="training-set size")
    p.add_argument("--k", type=int, required=True, help="max in-degree")
    p.add_argument("--r", type=int, required=True, help="tree depth")
    p.add_argument("--m", type=int, required=True, help="batch size")
    p.add_argument("--lambda", type=float, required=True,
                   dest="noise_multiplier", help="noise multiplier")
    p.add_argument("--t", type=int, required=True, help="number of steps")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--alpha-grid", default=None,
                   help="comma-separated Renyi orders (default: built-in grid)")
    p.set_defaults(handler=_cmd_account)

    p = sub.add_parser("drop-analysis", parents=[common],
                       help="tabulate in-degree-cap drop probabilities")
    p.add_argument("--k", type=int, required=True, help="max in-degree")
    p.add_argument("--max-degree", type=int, required=True)
    p.add_argument("--histogram", default=None,
                   help="degree,count CSV for the expected drop fraction")
    p.set_defaults(handler=_cmd_drop_analysis)

    p = sub.add_parser("train", parents=[common],
                       help="run the private training pipeline from run.json")
    p.add_argument("--config", required=True, help="path to run.json")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("verify", parents=[common],
                       help="run randomized occurrence and sensitivity suites")
    p.add_argument("--trials", type=int, default=200,
                   help="occurrence-suite graph count (default 200)")
    p.add_argument("--pairs", type=int, default=50,
                   help="sensitivity-suite adjacent pair count (default 50)")
    p.set_defaults(handler=_cmd_verify)

    return parser


def _emit_error(kind: str, exc: BaseException) -> None:
    payload = {"error": {"type": kind, "exception": type(exc).__name__,
                         "message": str(exc)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        _emit_error("config", exc)
        return 2
    try:
        return args.handler(args)
    except ValueError as exc:
        _emit_error("config", exc)
        return 2
    except Exception as exc:
        _emit_error("runtime", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
