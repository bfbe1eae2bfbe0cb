"""Command-line entry point.

Subcommands: gen-data, train, predict, grid, sample, report, reproduce.
Exit codes: 0 success, 1 usage or input-format error, 2 numeric failure.

Flag values override an optional key=value config file (--config), which in
turn overrides built-in defaults. A --seed left unset falls back to the
SSDGM_SEED environment variable, then to 0. Subcommands that create an
output directory echo their fully resolved configuration into it.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .data import (HEADER, generate_two_moons, load_dataset, load_split,
                   save_dataset, split_from_mixed, split_labeled)
from .errors import DataFormatError, DimensionError, NumericError, UsageError
from .evalreport import (ExperimentConfig, ExperimentReport, GridSpec,
                         MethodResult, contour_grid, emit_report,
                         run_experiment, save_grid, save_samples)
from .model import (BaselineModel, MODE_BAYES, generate, load_checkpoint)
from .nn_core import named_rng
from .predictor import (PredictConfig, evaluate_predictive, predict_dnn_proba,
                        predict_proba)
from .trainer import (MODE_DNN, MODE_SSLAPD, MODE_SSLPE, MODES, TrainConfig,
                      save_history, save_timings, train)

from . import figures


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; route through UsageError instead."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_help()}")


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $SSDGM_SEED or 0)")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallelism cap; 1 is the sequential reference "
                             "mode and the only mode currently implemented")
    parser.add_argument("--config", default=None,
                        help="key=value file; flags override its entries")


def _add_train_flags(parser):
    parser.add_argument("--mode", choices=MODES, default=MODE_SSLPE)
    parser.add_argument("--epochs", type=int, default=None,
                        help="passes over the unlabeled set (labeled set "
                             "for dnn mode); default 300")
    parser.add_argument("--labeled-batch", type=int, default=100)
    parser.add_argument("--unlabeled-batch", type=int, default=100)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--alpha", type=float, default=None,
                        help="classification-term weight (default 0.1 * N_l)")
    parser.add_argument("--mc-samples", type=int, default=1)
    parser.add_argument("--d-z", type=int, default=5)
    parser.add_argument("--hidden", default="128,128",
                        help="comma-separated hidden layer widths")
    parser.add_argument("--log-every", type=int, default=50)
    parser.add_argument("--dnn-steps", type=int, default=1000)
    parser.add_argument("--init-w-log-std", type=float, default=-5.0)


def _add_predict_flags(parser):
    parser.add_argument("--gibbs-steps", type=int, default=10)
    parser.add_argument("--chains", type=int, default=10)
    parser.add_argument("--average", choices=("probs", "labels"),
                        default="probs")


def _add_grid_flags(parser):
    parser.add_argument("--resolution", type=int, default=100)
    parser.add_argument("--expand", type=float, default=0.5,
                        help="bounding-box expansion per side as a fraction "
                             "of the data span")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ssdgm",
                     description="Semi-supervised deep generative models "
                                 "on two-moons data.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a two-moons dataset",
                       parents=[], add_help=True)
    _add_common(p)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", default="data.csv")
    p.add_argument("--per-class", type=int, default=None,
                   help="also split: writes <stem>.labeled/.unlabeled/.test")
    p.add_argument("--test-fraction", type=float, default=0.5)

    p = sub.add_parser("train", help="train one method on a dataset")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True,
                   help="split stem, or a CSV with -1 labels for unlabeled "
                        "rows")
    p.add_argument("--out", default="train-out")

    p = sub.add_parser("predict", help="predict probabilities for a CSV of "
                                       "points")
    _add_common(p)
    _add_predict_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="predictions.csv")

    p = sub.add_parser("grid", help="evaluate p(class 1) over a grid")
    _add_common(p)
    _add_predict_flags(p)
    _add_grid_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="CSV whose bounding box sets the grid range")
    p.add_argument("--x1-lo", type=float, default=None)
    p.add_argument("--x1-hi", type=float, default=None)
    p.add_argument("--x2-lo", type=float, default=None)
    p.add_argument("--x2-hi", type=float, default=None)
    p.add_argument("--out", default="grid.csv")

    p = sub.add_parser("sample", help="draw ancestral samples from a "
                                      "generative checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default="samples.csv")

    p = sub.add_parser("report", help="evaluate checkpoints on a test CSV "
                                      "and write report files and figures")
    _add_common(p)
    _add_predict_flags(p)
    _add_grid_flags(p)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeatable; each is evaluated and labeled by its "
                        "stored mode")
    p.add_argument("--test", required=True, help="labeled test CSV")
    p.add_argument("--out", default="report-out")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("reproduce", help="run the full experiment pipeline")
    _add_common(p)
    _add_train_flags(p)
    _add_predict_flags(p)
    _add_grid_flags(p)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--labeled-per-class", type=int, default=3)
    p.add_argument("--labeled-indices", default=None,
                   help="comma-separated dataset indices to use as the "
                        "labeled set (overrides --labeled-per-class picks)")
    p.add_argument("--methods", default="dnn,sslpe,sslapd")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", default=None,
                   help="output directory (default run-seed<seed>)")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _read_config_file(path) -> dict:
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from e
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, "
                             f"got '{line}'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _apply_config_file(parser, args, argv) -> argparse.Namespace:
    """Re-parse with file values as the subcommand's defaults, so explicit
    flags keep priority over the file and the file over built-ins."""
    values = _read_config_file(args.config)
    subparsers = next(a for a in parser._actions
                      if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    converted = {}
    for key, text in values.items():
        action = next(a for a in sub._actions if a.dest == key)
        if isinstance(action, (argparse._StoreTrueAction,
                               argparse._StoreFalseAction)):
            converted[key] = text.lower() in ("1", "true", "yes")
        else:
            converted[key] = action.type(text) if action.type else text
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SSDGM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise UsageError(f"SSDGM_SEED is not an integer: '{env}'") from e
    return 0


def _parse_hidden(text) -> tuple:
    try:
        dims = tuple(int(h) for h in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"bad --hidden value '{text}'") from e
    if not dims or any(h < 1 for h in dims):
        raise UsageError("--hidden needs positive comma-separated widths")
    return dims


def _train_config(args, seed) -> TrainConfig:
    # The library default (300 epochs) is sized for full convergence of the
    # semi-supervised methods; pass --epochs for quicker runs.
    epochs = args.epochs if args.epochs is not None else TrainConfig.epochs
    return TrainConfig(
        mode=args.mode, epochs=epochs, labeled_batch=args.labeled_batch,
        unlabeled_batch=args.unlabeled_batch, lr=args.lr, seed=seed,
        hidden_dims=_parse_hidden(args.hidden), d_z=args.d_z,
        alpha=args.alpha, mc_samples=args.mc_samples,
        log_every=args.log_every, dnn_steps=args.dnn_steps,
        init_w_log_std=args.init_w_log_std)


def _predict_config(args, seed) -> PredictConfig:
    return PredictConfig(gibbs_steps=args.gibbs_steps, chains=args.chains,
                         seed=seed, average=args.average)


def _echo_args(args, seed, out_dir) -> None:
    skip = {"command", "config"}
    with open(os.path.join(out_dir, "config.echo"), "w") as f:
        for key in sorted(vars(args)):
            if key in skip:
                continue
            value = seed if key == "seed" else getattr(args, key)
            f.write(f"{key}={value}\n")


def _load_points(path) -> np.ndarray:
    """x inputs from either the full dataset format or a bare x1,x2 CSV."""
    with open(path) as f:
        first = f.readline().strip()
    if first == HEADER:
        return load_dataset(path).points
    if first != "x1,x2":
        raise DataFormatError(f"{path} line 1: expected header '{HEADER}' "
                              f"or 'x1,x2'")
    try:
        points = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from e
    if points.shape[1] != 2:
        raise DataFormatError(f"{path}: expected 2 columns")
    if not np.all(np.isfinite(points)):
        raise DataFormatError(f"{path}: non-finite coordinates")
    return points


def _load_training_split(path):
    """A split stem (three files) or a single mixed CSV."""
    if os.path.exists(f"{path}.labeled.csv"):
        return load_split(path)
    if os.path.exists(path):
        return split_from_mixed(load_dataset(path))
    raise UsageError(f"no dataset at '{path}' (neither a split stem nor a "
                     f"CSV file)")


def _method_name(model) -> str:
    if isinstance(model, BaselineModel):
        return MODE_DNN
    return MODE_SSLAPD if model.mode == MODE_BAYES else MODE_SSLPE


def _cmd_gen_data(args, seed) -> int:
    dataset = generate_two_moons(args.n, args.noise, seed)
    if args.per_class is None:
        save_dataset(dataset, args.out)
    else:
        split = split_labeled(dataset, args.per_class, seed=seed,
                              test_fraction=args.test_fraction)
        stem = args.out[:-4] if args.out.endswith(".csv") else args.out
        save_dataset(split, stem)
    return 0


def _cmd_train(args, seed) -> int:
    split = _load_training_split(args.data)
    os.makedirs(args.out, exist_ok=True)
    _echo_args(args, seed, args.out)
    model, history = train(_train_config(args, seed), split,
                           checkpoint_path=os.path.join(args.out, "checkpoint"))
    save_history(history, os.path.join(args.out, "history.csv"))
    save_timings(history, os.path.join(args.out, "timings.csv"))
    return 0


def _cmd_predict(args, seed) -> int:
    model = load_checkpoint(args.checkpoint)
    points = _load_points(args.input)
    if isinstance(model, BaselineModel):
        probs = predict_dnn_proba(model, points)
    else:
        probs = predict_proba(model, points, _predict_config(args, seed))
    k = probs.shape[1]
    header = "x1,x2," + ",".join(f"p{i}" for i in range(k)) + ",argmax"
    with open(args.out, "w", newline="") as f:
        f.write(header + "\n")
        for i in range(points.shape[0]):
            cells = ([f"{v:.17g}" for v in points[i]]
                     + [f"{v:.17g}" for v in probs[i]]
                     + [str(int(np.argmax(probs[i])))])
            f.write(",".join(cells) + "\n")
    return 0


def _grid_spec(args, fallback_points=None) -> GridSpec:
    explicit = (args.x1_lo, args.x1_hi, args.x2_lo, args.x2_hi)
    if all(v is not None for v in explicit):
        return GridSpec(*explicit, resolution=args.resolution)
    if any(v is not None for v in explicit):
        raise UsageError("grid bounds need all four of --x1-lo --x1-hi "
                         "--x2-lo --x2-hi, or none")
    if args.data is None and fallback_points is None:
        raise UsageError("grid bounds require --data or explicit ranges")
    points = (fallback_points if args.data is None
              else _load_points(args.data))
    return GridSpec.from_data(points, expand=args.expand,
                              resolution=args.resolution)


def _cmd_grid(args, seed) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = _grid_spec(args)
    rows = contour_grid(model, spec, _predict_config(args, seed))
    save_grid(args.out, rows)
    return 0


def _cmd_sample(args, seed) -> int:
    model = load_checkpoint(args.checkpoint)
    if isinstance(model, BaselineModel):
        raise UsageError("the baseline classifier has no generative model "
                         "to sample from")
    z, x, y = generate(model, args.n, named_rng(seed, "samples"))
    save_samples(args.out, z, x, y)
    return 0


def _cmd_report(args, seed) -> int:
    test = load_dataset(args.test)
    labeled_mask = test.labels >= 0
    if not labeled_mask.any():
        raise UsageError("test CSV has no labeled rows")
    test_x, test_y = test.points[labeled_mask], test.labels[labeled_mask]
    os.makedirs(args.out, exist_ok=True)
    _echo_args(args, seed, args.out)
    cfg = _predict_config(args, seed)

    report = ExperimentReport()
    seen = set()
    grid = GridSpec.from_data(test_x, expand=args.expand,
                              resolution=args.resolution)
    for path in args.checkpoint:
        model = load_checkpoint(path)
        method = _method_name(model)
        if method in seen:
            raise UsageError(f"two checkpoints both resolve to method "
                             f"'{method}'")
        seen.add(method)
        start = time.perf_counter()
        accuracy, avg_loglik = evaluate_predictive(model, test_x, test_y, cfg)
        rows = contour_grid(model, grid, cfg)
        seconds = time.perf_counter() - start
        save_grid(os.path.join(args.out, f"grid.{method}.csv"), rows)
        report.results.append(
            MethodResult(method, accuracy, avg_loglik, seconds, seed))
        if not args.no_figures:
            figures.save_contour_figure(
                os.path.join(args.out, f"fig_contour_{method}.png"), rows,
                method)
    emit_report(report, args.out)
    return 0


def _cmd_reproduce(args, seed) -> int:
    out = args.out if args.out is not None else f"run-seed{seed}"
    labeled_indices = None
    if args.labeled_indices is not None:
        try:
            labeled_indices = tuple(
                int(v) for v in str(args.labeled_indices).split(","))
        except ValueError as e:
            raise UsageError(f"bad --labeled-indices value "
                             f"'{args.labeled_indices}'") from e
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    config = ExperimentConfig(
        out_dir=out, seed=seed, n=args.n, noise_sigma=args.noise,
        test_fraction=args.test_fraction, per_class=args.labeled_per_class,
        labeled_indices=labeled_indices, methods=methods,
        train=_train_config(args, seed), predict=_predict_config(args, seed),
        grid_resolution=args.resolution, grid_expand=args.expand,
        n_samples=args.samples, render_figures=not args.no_figures)
    run_experiment(config)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "grid": _cmd_grid,
    "sample": _cmd_sample,
    "report": _cmd_report,
    "reproduce": _cmd_reproduce,
}


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    if args.config is not None:
        args = _apply_config_file(parser, args, argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    seed = _resolve_seed(args)
    return _COMMANDS[args.command](args, seed)


def main(argv=None) -> int:
    try:
        return run(argv)
    except (UsageError, DataFormatError, DimensionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
