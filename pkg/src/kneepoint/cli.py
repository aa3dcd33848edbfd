"""Command-line interface: synth, calibrate, detect, eval.

Outputs are reproducible: identical command line + input files + seed give
byte-identical JSON/CSV artifacts, regardless of worker count. Every run
also writes the resolved configuration (embedded in JSON outputs, as a
`.meta.json` sidecar for CSV outputs) so results can be replayed exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import calibration, dataset, detect, svm
from ._io import atomic_write_text
from .errors import CalibrationError, ConvergenceError, DataError, KneepointError

log = logging.getLogger(__name__)

THREADS_ENV = "KNEEPOINT_THREADS"

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="key = value file; command-line flags override it")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")


def _add_data_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, metavar="PATH", help="input data file")
    parser.add_argument("--format", choices=("csv", "cmapss"), default="csv",
                        help="input layout (default: csv)")


def _parse_pair(text: str, what: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"{what} must be 'lo,hi', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be numeric, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kneepoint",
        description="Calibrate one-class SVMs for time-series change-point detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic run-to-failure data")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV path")
    p.add_argument("--truth-out", metavar="PATH",
                   help="truth CSV path (default: truth.csv next to --out)")
    p.add_argument("--units", type=int, default=20, help="number of units (default 20)")
    p.add_argument("--dim", type=int, default=5, help="feature dimension (default 5)")
    p.add_argument("--cycles", type=lambda s: _parse_pair(s, "--cycles"), default=(150, 350),
                   metavar="LO,HI", help="lifespan range (default 150,350)")
    p.add_argument("--rho", type=lambda s: _parse_pair(s, "--rho"), default=(0.55, 0.85),
                   metavar="LO,HI", help="change-point life-fraction range (default 0.55,0.85)")
    p.add_argument("--drift", type=float, default=6.0, help="drift magnitude (default 6.0)")
    p.add_argument("--ramp", type=float, default=2.0, help="ramp exponent (default 2.0)")
    p.add_argument("--noise-std", type=float, default=1.0, help="noise std (default 1.0)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="search kernel width and change points")
    _add_common(p)
    _add_data_options(p)
    p.add_argument("--out", required=True, metavar="PATH", help="calibration result JSON")
    p.add_argument("--units", metavar="IDS", help="explicit comma-separated train unit ids")
    p.add_argument("--train-count", type=int, metavar="N",
                   help="train on N randomly selected units (seeded)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nu", type=float, default=0.05)
    p.add_argument("--population", type=int, default=105)
    p.add_argument("--generations", type=int, default=10)
    p.add_argument("--gamma-bounds", type=lambda s: _parse_pair(s, "--gamma-bounds"),
                   default=(-2.0, 2.0), metavar="LO,HI",
                   help="log10(gamma) search box (default -2,2)")
    p.add_argument("--rho-min", type=float, default=0.5,
                   help="lower bound of the healthy life fraction (default 0.5)")
    p.add_argument("--strategy", choices=("best1bin", "rand1bin"), default="best1bin")
    p.add_argument("--mutation", type=lambda s: _parse_pair(s, "--mutation"),
                   default=(0.5, 1.0), metavar="LO,HI", help="F dither interval (default 0.5,1)")
    p.add_argument("--crossover", type=float, default=0.7)
    p.add_argument("--kkt-tol", type=float, default=svm.DEFAULT_KKT_TOL)
    p.add_argument("--eps", type=float, default=calibration.DEFAULT_EPS)
    p.add_argument("--healthy-fraction", type=float, default=0.5)
    p.add_argument("--normalizer-mode", choices=("global", "per_condition"),
                   help="default: per_condition for cmapss, global for csv")
    p.add_argument("--threads", type=int, default=None,
                   help=f"parallel fitness workers (default ${THREADS_ENV} or 1)")
    p.add_argument("--trace-csv", metavar="PATH", help="also export the search trace as CSV")
    p.add_argument("--plots", metavar="DIR", help="render search-trace figure into DIR")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="localize change points with a calibrated model")
    _add_common(p)
    _add_data_options(p)
    p.add_argument("--model", required=True, metavar="PATH",
                   help="model JSON or calibration result JSON")
    p.add_argument("--out", required=True, metavar="PATH", help="report CSV path")
    p.add_argument("--window", type=int, default=1,
                   help="odd majority-vote smoothing window (default 1 = off; try 5 for noisy data)")
    p.add_argument("--eps", type=float, default=detect.DEFAULT_EPS)
    p.add_argument("--emit-loss-curves", metavar="DIR",
                   help="write per-unit candidate/loss CSVs into DIR")
    p.add_argument("--plots", metavar="DIR",
                   help="render overview and per-unit loss-curve figures into DIR")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a detection report against ground truth")
    _add_common(p)
    p.add_argument("--report", required=True, metavar="PATH", help="detection report CSV")
    p.add_argument("--truth", required=True, metavar="PATH", help="truth CSV")
    p.add_argument("--tolerance-pct", type=float, default=10.0,
                   help="hit tolerance as %% of lifespan (default 10)")
    p.add_argument("--out", metavar="PATH", help="write metrics JSON here as well")
    p.set_defaults(func=cmd_eval)

    return parser


# --- config file ------------------------------------------------------------


def _load_config_lines(path) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or key == "config":
                raise DataError(f"{path}:{line_no}: bad key {key!r}")
            entries.append((key.replace("_", "-"), value))
    return entries


def _apply_config_file(argv: list) -> list:
    """Splice config-file entries in as flags, before the explicit ones.

    argparse keeps the last occurrence of a repeated flag, so anything given
    on the command line wins over the file.
    """
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv  # let argparse report the missing value
    path = argv[idx + 1]
    injected = []
    for key, value in _load_config_lines(path):
        injected += [f"--{key}", value]
    # keep the subcommand first, inject right after it
    return argv[:1] + injected + argv[1:]


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "verbose"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def _write_meta(out_path: str, args: argparse.Namespace) -> None:
    doc = {"command": args.command, "config": _resolved_config(args)}
    atomic_write_text(f"{out_path}.meta.json", json.dumps(doc, indent=2) + "\n")


# --- commands ---------------------------------------------------------------


def _read_instances(path: str, fmt: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        if fmt == "cmapss":
            return dataset.parse_cmapss(fh)
        return dataset.parse_csv(fh)


def cmd_synth(args) -> int:
    config = dataset.SyntheticConfig(
        num_units=args.units,
        dim=args.dim,
        cycles_range=(int(args.cycles[0]), int(args.cycles[1])),
        rho_range=args.rho,
        drift_magnitude=args.drift,
        ramp_shape=args.ramp,
        noise_std=args.noise_std,
    )
    instances, truths = dataset.generate_synthetic(config, args.seed)
    truth_path = args.truth_out or os.path.join(os.path.dirname(args.out) or ".", "truth.csv")
    atomic_write_text(args.out, dataset.format_csv(instances))
    atomic_write_text(truth_path, dataset.format_truth_csv(truths))
    _write_meta(args.out, args)
    print(f"wrote {len(instances)} units to {args.out} (truth: {truth_path})")
    return EXIT_OK


def _select_train_units(instances: list, args) -> list:
    if args.units and args.train_count:
        raise ValueError("use either --units or --train-count, not both")
    if args.units:
        by_id = {inst.unit_id: inst for inst in instances}
        chosen = []
        for token in args.units.split(","):
            try:
                unit = int(token)
            except ValueError:
                raise ValueError(f"--units entries must be integers, got {token!r}") from None
            if unit not in by_id:
                raise DataError(f"unit {unit} not present in the data file")
            chosen.append(by_id[unit])
        return chosen
    if args.train_count is not None:
        if args.train_count < 1:
            raise ValueError("--train-count must be at least 1")
        if args.train_count > len(instances):
            raise DataError(
                f"--train-count {args.train_count} exceeds the {len(instances)} units available"
            )
        rng = np.random.Generator(np.random.PCG64(args.seed))
        idx = rng.choice(len(instances), size=args.train_count, replace=False)
        return [instances[i] for i in sorted(int(i) for i in idx)]
    return list(instances)


def cmd_calibrate(args) -> int:
    instances = _read_instances(args.data, args.format)
    if not instances:
        raise DataError(f"{args.data}: no units found")
    train = _select_train_units(instances, args)
    mode = args.normalizer_mode or ("per_condition" if args.format == "cmapss" else "global")
    normalizer = dataset.fit_normalizer(train, healthy_fraction=args.healthy_fraction, mode=mode)
    normalized = [dataset.apply_normalizer(normalizer, inst) for inst in train]

    config = calibration.CalibrationConfig(
        nu=args.nu,
        population=args.population,
        generations=args.generations,
        log10_gamma_bounds=args.gamma_bounds,
        rho_min=args.rho_min,
        strategy=args.strategy,
        mutation=args.mutation,
        crossover=args.crossover,
        seed=args.seed,
        kkt_tol=args.kkt_tol,
        eps=args.eps,
    )
    workers = args.threads if args.threads is not None else _default_threads()
    log.info("calibrating on %d units (%d features) with %d worker(s)",
             len(train), len(normalizer.feature_mask), workers)
    result = calibration.calibrate(normalized, config, workers=workers)
    model = dataclasses.replace(
        result.model, feature_mask=normalizer.feature_mask, normalizer=normalizer
    )
    result = dataclasses.replace(result, model=model)

    doc = calibration.result_to_dict(result, config)
    doc["config_echo"].update({
        "data": args.data,
        "format": args.format,
        "healthy_fraction": args.healthy_fraction,
        "normalizer_mode": mode,
        "train_units": [inst.unit_id for inst in train],
    })
    atomic_write_text(args.out, json.dumps(doc, indent=2) + "\n")
    if args.trace_csv:
        atomic_write_text(args.trace_csv, result.trace.to_csv())
    if args.plots:
        from . import plots

        plots.ensure_dir(args.plots)
        plots.save_trace_figure(result.trace, os.path.join(args.plots, "calibration_trace.png"))
    print(
        f"calibrated gamma={result.best.gamma:.6g} loss={result.loss:.6g} "
        f"in {result.duration_seconds:.1f}s -> {args.out}"
    )
    return EXIT_OK


def _load_model_file(path: str) -> svm.TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(doc, dict) and "model" in doc and "best" in doc:
        doc = doc["model"]
    return svm.model_from_dict(doc)


def cmd_detect(args) -> int:
    model = _load_model_file(args.model)
    instances = _read_instances(args.data, args.format)
    reports, failures = detect.detect_batch(
        model, instances, model.normalizer, window=args.window, eps=args.eps
    )
    for failure in failures:
        print(f"unit {failure.unit_id}: {failure.error}", file=sys.stderr)
    atomic_write_text(args.out, detect.format_reports_csv(reports))
    _write_meta(args.out, args)
    if args.emit_loss_curves:
        os.makedirs(args.emit_loss_curves, exist_ok=True)
        for report in reports:
            path = os.path.join(args.emit_loss_curves, f"loss_curve_unit_{report.unit_id}.csv")
            atomic_write_text(path, detect.format_loss_curve_csv(report))
    if args.plots:
        from . import plots

        plots.ensure_dir(args.plots)
        if reports:
            plots.save_detection_overview(
                reports, os.path.join(args.plots, "detection_overview.png")
            )
        for report in reports:
            plots.save_loss_curve_figure(
                report, os.path.join(args.plots, f"loss_curve_unit_{report.unit_id}.png")
            )
    print(f"wrote {len(reports)} report(s) to {args.out}"
          + (f" ({len(failures)} unit(s) failed)" if failures else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        reports = detect.parse_reports_csv(fh)
    with open(args.truth, "r", encoding="utf-8") as fh:
        truth = dataset.parse_truth_csv(fh)
    for unit in sorted(truth):
        if unit not in reports:
            raise DataError(f"report is missing truth unit {unit}")
    for unit in sorted(reports):
        if unit not in truth:
            raise DataError(f"truth is missing report unit {unit}")

    units = sorted(truth)
    errors_cycles = []
    errors_fraction = []
    hits = 0
    for unit in units:
        change, cycles, _, _ = reports[unit]
        true_change, true_cycles = truth[unit]
        err = abs(change - true_change)
        errors_cycles.append(err)
        errors_fraction.append(err / true_cycles)
        if err <= args.tolerance_pct / 100.0 * true_cycles:
            hits += 1
    metrics = {
        "units": len(units),
        "tolerance_pct": args.tolerance_pct,
        "hit_rate": hits / len(units),
        "mae_cycles": float(np.mean(errors_cycles)),
        "mae_life_fraction": float(np.mean(errors_fraction)),
    }
    print(f"units: {metrics['units']}")
    print(f"hit_rate (within ±{args.tolerance_pct:g}% of T): {metrics['hit_rate']:.4f}")
    print(f"mae_cycles: {metrics['mae_cycles']:.4f}")
    print(f"mae_life_fraction: {metrics['mae_life_fraction']:.6f}")
    if args.out:
        doc = dict(metrics)
        doc["config_echo"] = _resolved_config(args)
        atomic_write_text(args.out, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config_file(argv)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KneepointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
