"""Command line entry point: ``driftrx {run,sweep,compare,calibrate}``.

Every ExperimentConfig field is also a flag (``--snr-db 10``, ``--seeds 0,1``);
flags override values read from ``--config FILE``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

from .harness import (ConfigValidationError, ExperimentConfig, calibrate, compare_policies,
                      output_root, parse_config, run_seeds, summary_csv, sweep_snr)
from .nn import TrainingDivergedError

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="file of 'key = value' lines")
    for f in dataclasses.fields(ExperimentConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE",
                            help=f"(default: {_default_text(f)})")


def _default_text(f) -> str:
    if f.default_factory is not dataclasses.MISSING:
        return ",".join(str(x) for x in f.default_factory())
    return str(f.default)


def _config_from(args) -> ExperimentConfig:
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    lines = [f"{n} = {getattr(args, n)}" for n in names if getattr(args, n) is not None]
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
        # later keys win, so flags override the file
        return parse_config(text + "\n" + "\n".join(lines))
    return parse_config("\n".join(lines))


def _write_table(path: str, rows, fields) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])


def cmd_run(cfg: ExperimentConfig, args) -> None:
    results = run_seeds(cfg, write=True)
    root = output_root(cfg)
    text = summary_csv([r.summary for r in results])
    with open(os.path.join(root, f"summary_{results[0].policy}_snr{cfg.snr_db:g}.csv"), "w", newline="") as fh:
        fh.write(text)
    sys.stdout.write(text)


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    table = sweep_snr(cfg, write=True)
    path = os.path.join(output_root(cfg), f"sweep_{table[0]['runs'][0].policy}.csv")
    _write_table(path, table, ("snr", "avg_ber", "retrains"))
    for row in table:
        print(f"snr {row['snr']:g}  avg_ber {row['avg_ber']:.6f}  retrains {row['retrains']:g}")


def cmd_compare(cfg: ExperimentConfig, args) -> None:
    table = compare_policies(cfg, args.policies.split(","), write=True)
    _write_table(os.path.join(output_root(cfg), "compare.csv"), table,
                 ("policy", "label", "retrains", "params", "ratio", "avg_ber"))
    for row in table:
        print(f"{row['label']:<20} avg_ber {row['avg_ber']:.6f}  params {row['params']:g}  ratio {row['ratio']:.4f}")


def cmd_calibrate(cfg: ExperimentConfig, args) -> None:
    if cfg.policy not in ("unstructured", "modular"):
        raise ConfigValidationError("calibrate needs a detector policy (--policy unstructured or modular)")
    grid = [float(x) for x in args.grid.split(",")]
    rows = calibrate(cfg, args.target, grid)
    _write_table(os.path.join(output_root(cfg), f"calibrate_{cfg.policy}-{cfg.detector}.csv"), rows,
                 ("threshold", "retrains", "avg_ber"))
    for row in rows:
        print(f"lambda {row['threshold']:g}  retrains {row['retrains']:g}  avg_ber {row['avg_ber']:.6f}")
    print(f"best lambda {rows[0]['threshold']:g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftrx", description="Drift-triggered retraining of deep receivers.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one policy over the configured seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="average BER over the configured SNR list")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("compare", help="several policies on shared channel realizations")
    _add_config_flags(p)
    p.add_argument("--policies", default="always,periodic:10,unstructured:ddm,unstructured:hotelling,"
                                         "modular:hotelling")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("calibrate", help="threshold grid search toward a target retrain count")
    _add_config_flags(p)
    p.add_argument("--target", type=float, required=True, help="desired mean number of retrain events")
    p.add_argument("--grid", required=True, help="comma separated thresholds")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from(args)
        args.func(cfg, args)
    except (ConfigValidationError, FileNotFoundError) as exc:
        print(f"driftrx: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"driftrx: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
