"""Command line: ``run``, ``sweep``, ``surface`` and ``verify``.

Exit codes: 0 success, 2 configuration error, 3 non-finite loss during
training, 4 failed verification case.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .divergences import DivergenceSpec, Kind, TOKEN_KINDS, simplex_surface, write_surface_csv
from .errors import ConfigError, NonFiniteLossError
from .training import build_source, obtain_teacher, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_VERIFY = 4

SUITES = ("two_loss", "three_loss")
SWEEP_COLUMNS = ("method", "strategy", "eval_ce_mean", "eval_ce_std", "acc_mean", "acc_std", "delta_vs_manual",
                 "status")
SURFACE_KINDS = ("fkl", "rkl", "mse_probs", "cosine_probs")
FEATURE_CHANNEL = "feature"

log = logging.getLogger("betakd")


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--jobs", type=int, default=default,
                        help="worker processes for sweeps (default: number of cores)")
    parser.add_argument("--seed", type=int, default=default,
                        help="single training seed (run, sweep) or case seed (verify)")
    parser.add_argument("--no-figures", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="skip the PNG figures")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


# flag name -> config key; every flag overrides the top-level key of the same name
_OVERRIDES = {
    "steps": ("steps", int),
    "batch_size": ("batch_size", int),
    "seq_len": ("seq_len", int),
    "eval_every": ("eval_every", int),
    "train_sequences": ("train_sequences", int),
    "eval_sequences": ("eval_sequences", int),
    "seeds": ("seeds", _int_list),
}


def _config_flags(parser):
    for flag, (key, typ) in _OVERRIDES.items():
        parser.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None,
                            help=f"override config key '{key}'")
    parser.add_argument("--lr", type=float, default=None, help="override config key 'optimizer.lr'")
    parser.add_argument("--beta-lr", type=float, default=None, help="override config key 'optimizer.beta_lr'")
    parser.add_argument("--teacher-checkpoint", default=None, help="override config key 'teacher.checkpoint'")


def build_parser():
    parser = argparse.ArgumentParser(prog="betakd", description="Gibbs-prior weighted distillation on toy models")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("run", parents=[common], help="train every seed of one config")
    p.add_argument("config", help="JSON config file")
    _config_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="all token energies x all weighting strategies")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--config", default=None, help="base JSON config (channels are replaced)")
    _config_flags(p)

    p = sub.add_parser("surface", parents=[common], help="energy over the three-outcome simplex for a fixed teacher")
    p.add_argument("--kinds", default=",".join(SURFACE_KINDS), help="comma separated energy kinds")
    p.add_argument("--anchor", type=_float_list, default=[0.6, 0.3, 0.1], help="teacher distribution p0,p1,p2")
    p.add_argument("--grid-n", type=int, default=60, help="subdivisions per simplex edge")
    p.add_argument("--skew-lambda", type=float, default=None)

    p = sub.add_parser("verify", parents=[common], help="posterior-mode and Laplace checks")
    p.add_argument("--grid-n", type=int, default=51, help="logit grid points per axis")
    return parser


def apply_overrides(cfg, args):
    for flag, (key, _) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "lr", None) is not None:
        cfg.optimizer.lr = args.lr
    if getattr(args, "beta_lr", None) is not None:
        cfg.optimizer.beta_lr = args.beta_lr
    if getattr(args, "teacher_checkpoint", None):
        cfg.teacher.checkpoint = args.teacher_checkpoint
    return config_mod.validate(cfg)


# ---------------------------------------------------------------------------
# commands


def _figures(records, seed_dir):
    from . import plotting

    if records:
        plotting.training_curves(records, os.path.join(seed_dir, "curves.png"))
        plotting.entropy_vs_beta(records, os.path.join(seed_dir, "entropy_beta.png"))


def cmd_run(args):
    try:
        cfg = apply_overrides(config_mod.load(args.config), args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(config_mod.dumps(cfg))
    try:
        result = run_experiment(cfg, out)
    except NonFiniteLossError as exc:
        path = os.path.join(out, "nonfinite_dump.json")
        with open(path, "w") as fh:
            json.dump(exc.dump, fh)
        print(f"error: {exc} (dump written to {path})", file=sys.stderr)
        return EXIT_NONFINITE
    if not args.no_figures:
        for r in result.results:
            _figures(r.records, os.path.join(out, f"seed_{r.seed}"))
    s = result.summary
    print(f"eval_ce {s['eval_ce_mean']:.6f} +- {s['eval_ce_std']:.6f}  "
          f"acc {s['eval_accuracy_mean']:.6f} +- {s['eval_accuracy_std']:.6f}  -> {out}")
    return EXIT_OK


def suite_channels(suite, kind, strategy):
    channels = [config_mod.ChannelConfig(kind=kind, strategy=strategy)]
    if suite == "three_loss":
        channels.append(config_mod.ChannelConfig(kind=Kind.FEATURE_MSE.value, strategy=strategy,
                                                 name=FEATURE_CHANNEL))
    return channels


def _run_cell(cfg_dict, cell_dir):
    cfg = config_mod.from_dict(cfg_dict)
    return run_experiment(cfg, cell_dir).summary


def sweep_rows(cells):
    """Table rows from ``[(method, strategy, summary or exception)]``."""
    manual_acc = {}
    for method, strategy, res in cells:
        if strategy == "manual" and isinstance(res, dict):
            manual_acc[method] = res["eval_accuracy_mean"]
    rows = []
    for method, strategy, res in cells:
        row = dict.fromkeys(SWEEP_COLUMNS, "")
        row.update(method=method, strategy=strategy)
        if isinstance(res, dict):
            row.update(eval_ce_mean=res["eval_ce_mean"], eval_ce_std=res["eval_ce_std"],
                       acc_mean=res["eval_accuracy_mean"], acc_std=res["eval_accuracy_std"], status="ok")
            if method in manual_acc:
                row["delta_vs_manual"] = res["eval_accuracy_mean"] - manual_acc[method]
        else:
            row["status"] = f"error: {type(res).__name__}: {res}"
        rows.append(row)
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_sweep(args):
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
        cfg = apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.path.join("runs", f"sweep_{args.suite}")
    os.makedirs(out, exist_ok=True)
    if not cfg.teacher.checkpoint:
        from .models import save_checkpoint

        teacher = obtain_teacher(cfg, build_source(cfg))
        cfg.teacher.checkpoint = os.path.join(out, "teacher.bin")
        save_checkpoint(cfg.teacher.checkpoint, teacher)

    jobs = []
    for kind in TOKEN_KINDS:
        for strategy in config_mod.STRATEGIES:
            cell = cfg.copy()
            cell.channels = suite_channels(args.suite, kind.value, strategy)
            cell_dir = os.path.join(out, "cells", f"{kind.value}__{strategy}")
            cell.output_dir = cell_dir
            jobs.append((kind.value, strategy, cell.to_dict(), cell_dir))

    n_workers = args.jobs or os.cpu_count() or 1
    results = {}
    if n_workers <= 1:
        for method, strategy, cfg_dict, cell_dir in jobs:
            try:
                results[(method, strategy)] = _run_cell(cfg_dict, cell_dir)
            except Exception as exc:  # a failed cell is recorded, the sweep goes on
                results[(method, strategy)] = exc
            log.info("cell %s/%s done", method, strategy)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {pool.submit(_run_cell, d, c): (m, s) for m, s, d, c in jobs}
            for fut in concurrent.futures.as_completed(futures):
                try:
                    results[futures[fut]] = fut.result()
                except Exception as exc:
                    results[futures[fut]] = exc

    rows = sweep_rows([(m, s, results[(m, s)]) for m, s, _, _ in jobs])
    csv_path = os.path.join(out, f"sweep_{args.suite}.csv")
    write_sweep_csv(csv_path, rows)
    if not args.no_figures:
        from . import plotting

        plotting.sweep_bars(rows, os.path.join(out, f"sweep_{args.suite}.png"))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells ({failed} failed) -> {csv_path}")
    return EXIT_OK


def cmd_surface(args):
    anchor = np.asarray(args.anchor, dtype=np.float64)
    out = args.out or os.path.join("runs", "surface")
    try:
        kinds = [Kind(k.strip()) for k in args.kinds.split(",") if k.strip()]
        specs = [DivergenceSpec(k, args.skew_lambda if k.is_skew else None) for k in kinds]
        if any(k.is_feature for k in kinds):
            raise ValueError("surfaces are defined for token energies only")
        results = [(spec, *simplex_surface(spec, anchor, args.grid_n)) for spec in specs]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(out, exist_ok=True)
    for spec, points, values in results:
        path = os.path.join(out, f"surface_{spec.kind.value}.csv")
        write_surface_csv(path, points, values)
        if not args.no_figures:
            from . import plotting

            plotting.simplex_triangle(points, values, anchor, os.path.join(out, f"surface_{spec.kind.value}.png"),
                                      title=spec.kind.value)
        print(path)
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_canned

    rows = run_canned(seed=args.seed or 0, grid_n=args.grid_n)
    width = max(len(r.case) for r in rows)
    print(f"{'check':<9} {'case':<{width}} {'value':>12}  {'criterion':<28} result")
    for r in rows:
        print(f"{r.check:<9} {r.case:<{width}} {r.value:>12.4e}  {r.tolerance:<28} {'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in rows if not r.passed]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "case", "value", "criterion", "passed"])
            for r in rows:
                w.writerow([r.check, r.case, repr(r.value), r.tolerance, int(r.passed)])
    if failed:
        for r in failed:
            print(f"FAILED: {r.check} {r.case}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(rows)} cases passed")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "surface": cmd_surface, "verify": cmd_verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
