"""Command-line entry point.

Exit codes: 0 ok, 1 other library error, 2 config (or checkpoint) error,
3 data error, 4 numerical abort, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import gradcheck
from .errors import ConfigError, DataFormatError, NumericalError, TeddnError
from .graph import export_adjacency_csv
from .model import build, load_parameters, read_checkpoint, save_checkpoint
from .training import (ablation_suite, ablation_table, baselines, evaluate, full_is_best, predict, train,
                       write_report)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

log = logging.getLogger("teddn")


def _experiment(args):
    exp = config_mod.load(args.config, args.set)
    if exp.output_dir is None:
        exp.output_dir = config_mod.resolve_output(Path("runs") / Path(args.config).stem)
    return exp


def _print_report(report, title):
    print(title)
    print(f"{'horizon':>8} {'mae':>10} {'rmse':>10} {'mape%':>8}")
    for h, mae, rmse, mape in report.rows():
        mape_s = "NA" if mape is None else f"{mape:.2f}"
        print(f"{h!s:>8} {mae:10.4f} {rmse:10.4f} {mape_s:>8}")


def _load_model(exp, checkpoint, series):
    """Build the configured model and fill it from ``checkpoint``; checkpoint problems are config errors."""
    try:
        header, arrays = read_checkpoint(checkpoint)
    except (DataFormatError, OSError) as exc:
        raise ConfigError(f"bad checkpoint: {exc}") from None
    model = build(exp.model_config(series), header.get("seed", exp.train.seed))
    load_parameters(model, arrays)
    return model, header.get("extra", {})


def cmd_train(args) -> int:
    exp = _experiment(args)
    data = exp.load_data()
    cfg = exp.model_config(data.series)
    out = exp.output_dir
    exp.write_effective(out)
    model = build(cfg, exp.train.seed)
    result = train(model, data, exp.train, out_dir=out)
    save_checkpoint(model, out / "model.ckpt", extra={"norm": data.stats.to_dict(), "epoch": result.best_epoch})
    _print_report(result.test, f"test metrics (best epoch {result.best_epoch}, {result.epochs_run} epochs)")
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = _experiment(args)
    data = exp.load_data()
    model, extra = _load_model(exp, args.checkpoint, data.series)
    stats = data_mod.NormStats.from_dict(extra["norm"]) if "norm" in extra else data.stats
    windows = getattr(data, args.split)
    report = evaluate(model, windows, stats, exp.train.batch_size, exp.train.mape_threshold, epoch=extra.get("epoch"))
    out = Path(args.out) if args.out else exp.output_dir
    write_report(report, out, f"evaluation_{args.split}")
    for i, A in enumerate(model.adjacency()):
        export_adjacency_csv(A, out / f"adjacency_{i}.csv")
    _print_report(report, f"{args.split} metrics")
    return EXIT_OK


def cmd_predict(args) -> int:
    exp = _experiment(args)
    data = exp.load_data()
    model, extra = _load_model(exp, args.checkpoint, data.series)
    stats = data_mod.NormStats.from_dict(extra["norm"]) if "norm" in extra else data.stats
    pred = predict(model, getattr(data, args.split), stats, exp.train.batch_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.save(args.out, pred)
    print(f"predictions {pred.shape} written to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    data = exp.load_data()
    cfg = exp.model_config(data.series, "full")
    out = exp.output_dir
    exp.write_effective(out)
    rows = ablation_suite(data, cfg, exp.train, out_dir=out)
    print(f"{'variant':>8} {'horizon':>8} {'mae':>10} {'rmse':>10} {'mape%':>8}")
    for name, h, mae, rmse, mape in ablation_table(rows):
        mape_s = "NA" if mape is None else f"{mape:.2f}"
        print(f"{name:>8} {h!s:>8} {mae:10.4f} {rmse:10.4f} {mape_s:>8}")
    print(f"full variant best on average MAE: {'yes' if full_is_best(rows) else 'no'} (informational)")
    return EXIT_OK


def cmd_baseline(args) -> int:
    exp = _experiment(args)
    data = exp.load_data()
    reports = baselines(data, args.split, exp.train.mape_threshold)
    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"baselines_{args.split}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["baseline", "horizon", "mae", "rmse", "mape"])
        for name, report in reports.items():
            for row in report.rows():
                w.writerow([name] + ["NA" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                                     for v in row])
    for name, report in reports.items():
        _print_report(report, f"{name} ({args.split})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.size, args.seed)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.module:>18}  worst relative error {r.worst:.3e}  at {r.parameter}  {status}")
        failed |= not r.ok
    if failed:
        bad = [r for r in results if not r.ok]
        for r in bad:
            print(f"gradient check failed: {r.module} parameter {r.parameter} error {r.worst:.3e} "
                  f"(tolerance {gradcheck.TOLERANCE:g})", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_convert(args) -> int:
    series = data_mod.convert_archive(args.inp, args.out, channels=args.channels, steps_per_day=args.steps_per_day,
                                      start_weekday=args.start_weekday, dtype=args.dtype)
    T, N, C = series.shape
    print(f"({T}, {N}, {C})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teddn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.lr=0.001 (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="train a model and report test metrics"))
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("evaluate", cmd_evaluate, "per-horizon metrics of a checkpoint"),
                              ("predict", cmd_predict, "write raw-scale forecasts as .npy")):
        p = with_config(sub.add_parser(name, help=help_))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--out", required=name == "predict",
                       help="output .npy file" if name == "predict" else "output directory")
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("ablate", help="train the four ablation variants"))
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("baseline", help="persistence and historical-average metrics"))
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--size", choices=sorted(gradcheck.SIZES), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convert", help="convert a public .npz archive to flatbin")
    p.add_argument("--in", dest="inp", required=True, help="archive (.npz with a 'data' array)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--channels", type=int, nargs="+", default=[0])
    p.add_argument("--steps-per-day", type=int, default=288)
    p.add_argument("--start-weekday", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TeddnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
