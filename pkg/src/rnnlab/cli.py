"""Operator entry point: experiment runs, gradient probes, path tables.

Configuration lives in an INI file; every output file opens with '#' header
lines recording the tool version and a hash of the resolved configuration,
so identical configs reproduce byte-identical tables.

Verbs:
  run     train randomized trials, write per-epoch and summary tables
  probe   measure gradient-norm profiles from saved checkpoints
  paths   tabulate shortest delay-path lengths against closed forms
  report  rebuild a summary from an existing per-epoch table

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np

from . import __version__
from . import numkernel as nk
from .cells import CellConfig
from .diagnostics import DelayGraph, predicted_length, probe_gradient_norms, \
    shortest_path_lengths
from .engine import Model, TrainSettings, TrialRecord, load_checkpoint, \
    run_trial, select_top_trials
from .errors import DataError, NumericError, UsageError
from .tasks import CopySpec, CopyTask, PixelSequenceSpec, RandomPixelTask, \
    TaskBatch, load_pmnist

ARCHS = ("simple", "lstm", "clockwork", "narx", "mist")
TRIAL_COLUMNS = ("trial_id", "seed", "log10_lr", "epoch",
                 "train_loss", "val_loss", "val_err", "test_err")
SUMMARY_COLUMNS = ("kind", "arch", "n_h", "trial_id", "seed", "log10_lr",
                   "status", "best_epoch", "best_val", "test_err", "test_err_std")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through UsageError
    # instead so the documented exit-code contract holds
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="rnnlab", description=__doc__.splitlines()[0])
    parser.add_argument("verb", choices=("run", "probe", "paths", "report"))
    parser.add_argument("--config", required=True, help="INI configuration file")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--workers", type=int, default=1,
                        help="trial worker processes (run only)")
    parser.add_argument("--precision", default=None,
                        help="float32/float64 override")
    parser.add_argument("--seed", type=int, default=None,
                        help="base seed override")
    return parser


# ---------------------------------------------------------------------------
# configuration

class Config:
    """Typed access to the INI sections with a canonical hashable form."""

    def __init__(self, path, overrides=None):
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse {path}: {exc}")
        self.values = {section: dict(parser[section])
                       for section in parser.sections()}
        for (section, key), value in (overrides or {}).items():
            if value is not None:
                self.values.setdefault(section, {})[key] = str(value)

    def raw(self, section, key, default=None):
        value = self.values.get(section, {}).get(key, "")
        return value if value != "" else default

    def get_str(self, section, key, default=None, choices=None):
        value = self.raw(section, key, default)
        if value is None:
            raise UsageError(f"missing config value [{section}] {key}")
        if choices and value not in choices:
            raise UsageError(f"[{section}] {key} must be one of {choices}, got {value!r}")
        return value

    def get_int(self, section, key, default=None, minimum=None):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            value = int(value)
        except (TypeError, ValueError):
            raise UsageError(f"[{section}] {key} must be an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise UsageError(f"[{section}] {key} must be >= {minimum}, got {value}")
        return value

    def get_float(self, section, key, default=None):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            return float(value)
        except (TypeError, ValueError):
            raise UsageError(f"[{section}] {key} must be a number, got {value!r}")

    def get_int_list(self, section, key, default=None):
        value = self.raw(section, key, default)
        if value is None:
            return None
        if isinstance(value, str):
            parts = [p for p in value.replace(",", " ").split() if p]
        else:
            parts = list(value)
        try:
            return tuple(int(p) for p in parts)
        except (TypeError, ValueError):
            raise UsageError(f"[{section}] {key} must be a list of integers, got {value!r}")

    def canonical(self):
        # the experiment identity excludes the output destination
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if (section, key) == ("experiment", "out"):
                    continue
                value = self.values[section][key]
                if value != "":
                    lines.append(f"{section}.{key}={value}")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def build_task(cfg):
    kind = cfg.get_str("task", "kind", choices=("copy", "pmnist", "random"))
    seed = cfg.get_int("task", "seed", "0")
    if kind == "copy":
        spec = CopySpec(D=cfg.get_int("task", "delay", minimum=10),
                        n_train=cfg.get_int("task", "n_train", "100000", minimum=1),
                        n_val=cfg.get_int("task", "n_val", "1000", minimum=1),
                        seed=seed)
        return CopyTask(spec)
    if kind == "pmnist":
        spec = PixelSequenceSpec(
            permutation_seed=cfg.get_int("task", "permutation_seed", "0"),
            n_train=cfg.get_int("task", "n_train", "58000", minimum=1),
            n_val=cfg.get_int("task", "n_val", "2000", minimum=1),
            truncate_to=cfg.get_int("task", "truncate_to"),
            permute=cfg.get_int("task", "permute", "1") != 0)
        return load_pmnist(cfg.raw("task", "data_dir"), spec)
    return RandomPixelTask(T=cfg.get_int("task", "t", "784", minimum=2),
                           n_out=cfg.get_int("task", "n_out", "10", minimum=2),
                           n_train=cfg.get_int("task", "n_train", "10000", minimum=1),
                           n_val=cfg.get_int("task", "n_val", "500", minimum=1),
                           seed=seed)


def build_cell_config(cfg, n_x):
    arch = cfg.get_str("model", "arch", choices=ARCHS)
    kwargs = dict(arch=arch, n_x=n_x,
                  n_h=cfg.get_int("model", "n_h", minimum=1))
    if arch in ("clockwork", "narx", "mist"):
        kwargs["n_d"] = cfg.get_int("model", "n_d", "8", minimum=1)
        delays = cfg.get_int_list("model", "delays")
        if delays is not None and arch != "clockwork":
            kwargs["delays"] = delays
    if arch == "lstm":
        kwargs["forget_bias_init"] = cfg.get_float("model", "forget_bias", "1.0")
    return CellConfig(**kwargs)


def build_settings(cfg, precision):
    clip = cfg.raw("train", "clip", "1.0")
    return TrainSettings(
        lr=cfg.get_float("train", "lr"),
        lr_log10_range=(cfg.get_float("train", "lr_log10_min", "-4.0"),
                        cfg.get_float("train", "lr_log10_max", "1.0")),
        momentum=cfg.get_float("train", "momentum", "0.9"),
        clip_norm=None if clip in (None, "none") else cfg.get_float("train", "clip", "1.0"),
        batch_size=cfg.get_int("train", "batch_size", "100", minimum=1),
        max_epochs=cfg.get_int("train", "max_epochs", "50", minimum=1),
        max_updates=cfg.get_int("train", "max_updates"),
        eval_batch_size=cfg.get_int("train", "eval_batch_size", "500", minimum=1),
        precision=precision,
        stop_below=cfg.get_float("train", "stop_below"),
        plateau_patience=cfg.get_int("train", "plateau_patience"))


# ---------------------------------------------------------------------------
# output helpers

def fmt(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_table(path, cfg, columns, rows):
    with open(path, "w", newline="") as f:
        f.write(f"# rnnlab {__version__}\n")
        f.write(f"# config {cfg.hash()}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def read_table(path):
    """Read back a '#'-headed table as (columns, list of string rows)."""
    if not os.path.isfile(path):
        raise DataError(f"table not found: {path}")
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f if not line.startswith("#")]
    if not lines:
        raise DataError(f"{path}: no header row")
    columns = lines[0].split(",")
    return columns, [line.split(",") for line in lines[1:] if line]


def json_safe(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


# ---------------------------------------------------------------------------
# run

def _rank_row_metric(task, row):
    key = getattr(task, "rank_key", "err")
    return row.val_err if key == "err" else row.extra_errs[key]


def _run_one(config, task, settings, trial_seed):
    return run_trial(config, task, trial_seed, settings, keep_params=True)


def trial_table_rows(task, trial_id, record):
    rows = []
    for row in record.rows:
        test = record.test_err if row.epoch == record.best_epoch else None
        rows.append((trial_id, record.seed, record.log10_lr, row.epoch,
                     row.train_loss, row.val_loss,
                     _rank_row_metric(task, row), test))
    return rows


def cmd_run(cfg, out_dir, workers):
    precision = cfg.get_str("experiment", "precision", "float64",
                            choices=("float32", "float64"))
    n_trials = cfg.get_int("experiment", "trials", "10", minimum=1)
    top_k = cfg.get_int("experiment", "top_k", str(min(5, n_trials)), minimum=1)
    if top_k > n_trials:
        raise UsageError(f"top_k={top_k} exceeds trials={n_trials}")
    base_seed = cfg.get_int("experiment", "seed", "0")
    task = build_task(cfg)
    config = build_cell_config(cfg, task.n_x)
    settings = build_settings(cfg, precision)
    os.makedirs(out_dir, exist_ok=True)

    seeds = [base_seed + i for i in range(n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(partial(_run_one, config, task, settings), seeds))
    else:
        records = [_run_one(config, task, settings, s) for s in seeds]

    epoch_rows = []
    for i, record in enumerate(records):
        epoch_rows.extend(trial_table_rows(task, i, record))
    write_table(os.path.join(out_dir, "trials.csv"), cfg, TRIAL_COLUMNS, epoch_rows)

    top, mean, std = select_top_trials(records, top_k)
    best = top[0]
    arch, n_h = config.arch, config.n_h
    summary_rows = [("trial", arch, n_h, i, r.seed, r.log10_lr, r.status,
                     r.best_epoch, None if r.status != "ok" else r.best_val,
                     r.test_err, None)
                    for i, r in enumerate(records)]
    lr_star = best.log10_lr if best.status == "ok" else None
    summary_rows.append((f"top{top_k}", arch, n_h, None, None, lr_star,
                         None, None, None, mean, std))
    write_table(os.path.join(out_dir, "summary.csv"), cfg, SUMMARY_COLUMNS,
                summary_rows)

    payload = {
        "version": __version__,
        "config_hash": cfg.hash(),
        "arch": arch,
        "n_h": n_h,
        "trials": n_trials,
        "top_k": top_k,
        "lr_star_log10": json_safe(lr_star),
        "mean_test_err": json_safe(mean),
        "std_test_err": json_safe(std),
        "records": [{"trial_id": i, "seed": r.seed,
                     "log10_lr": json_safe(r.log10_lr), "status": r.status,
                     "best_epoch": r.best_epoch,
                     "best_val": json_safe(r.best_val),
                     "test_err": json_safe(r.test_err)}
                    for i, r in enumerate(records)],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ": "), indent=1)
        f.write("\n")

    if best.status == "ok" and best.best_params is not None:
        model = Model(config, task.n_out)
        model.save_checkpoint(
            os.path.join(out_dir, f"checkpoint_{arch}.npz"), best.best_params,
            extras={"seed": np.array(best.seed),
                    "log10_lr": np.array(best.log10_lr)})
    print(f"wrote {out_dir}/trials.csv, summary.csv, summary.json")
    return 0


# ---------------------------------------------------------------------------
# probe

def probe_batch(cfg):
    T = cfg.get_int("probe", "t", "784", minimum=2)
    B = cfg.get_int("probe", "batch_size", "100", minimum=1)
    rng = nk.make_rng(cfg.get_int("probe", "seed", "0"), 4)
    inputs = rng.standard_normal((T, B, 1))
    targets = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    mask[-1] = 1.0
    return TaskBatch(inputs=inputs, targets=targets, mask=mask)


def cmd_probe(cfg, out_dir):
    entries = [(arch, cfg.raw("probe", f"checkpoint_{arch}"))
               for arch in ARCHS]
    entries = [(arch, path) for arch, path in entries if path]
    if not entries:
        raise UsageError("no [probe] checkpoint_<arch> entries in config")
    batch = probe_batch(cfg)
    os.makedirs(out_dir, exist_ok=True)
    profiles = {}
    for arch, path in entries:
        model, params, _ = load_checkpoint(path)
        if model.config.arch != arch:
            raise DataError(f"{path}: checkpoint holds arch "
                            f"{model.config.arch!r}, config says {arch!r}")
        if model.config.n_x != 1:
            raise DataError(f"{path}: probe inputs are scalar streams, "
                            f"checkpoint expects n_x={model.config.n_x}")
        profiles[arch] = probe_gradient_norms(model, params, batch,
                                              checkpoint=path)
    taus = next(iter(profiles.values())).taus
    for arch, profile in profiles.items():
        write_table(os.path.join(out_dir, f"profile_{arch}.csv"), cfg,
                    ("tau", "mean_norm"),
                    list(zip(profile.taus, profile.norms)))
    combined = [(tau,) + tuple(profiles[a].norms[i] for a, _ in entries)
                for i, tau in enumerate(taus)]
    write_table(os.path.join(out_dir, "profile_combined.csv"), cfg,
                ("tau",) + tuple(a for a, _ in entries), combined)
    print(f"wrote {out_dir}/profile_combined.csv ({len(entries)} series)")
    return 0


# ---------------------------------------------------------------------------
# paths

def cmd_paths(cfg, out_dir):
    delays = cfg.get_int_list("paths", "delays", "1,2,4,8,16,32,64,128")
    tau_max = cfg.get_int("paths", "tau_max", "1024", minimum=0)
    graph = DelayGraph(delays)
    lengths = shortest_path_lengths(graph, tau_max)
    rows = []
    for tau in range(tau_max + 1):
        predicted = predicted_length(graph.delays, tau)
        match = None if predicted is None else int(predicted == lengths[tau])
        rows.append((tau, int(lengths[tau]), predicted, match))
    os.makedirs(out_dir, exist_ok=True)
    write_table(os.path.join(out_dir, "paths.csv"), cfg,
                ("tau", "length", "predicted", "match"), rows)
    print(f"wrote {out_dir}/paths.csv")
    return 0


# ---------------------------------------------------------------------------
# report

def cmd_report(cfg, out_dir):
    columns, rows = read_table(os.path.join(out_dir, "trials.csv"))
    if columns != list(TRIAL_COLUMNS):
        raise DataError(f"trials.csv columns {columns} do not match {TRIAL_COLUMNS}")
    grouped = {}
    for row in rows:
        grouped.setdefault(int(row[0]), []).append(row)
    records = []
    for trial_id in sorted(grouped):
        rows_i = sorted(grouped[trial_id], key=lambda r: int(r[3]))
        vals = [float(r[6]) for r in rows_i]
        best_i = int(np.argmin(vals))
        test = rows_i[best_i][7]
        records.append(TrialRecord(
            seed=int(rows_i[0][1]), log10_lr=float(rows_i[0][2]),
            status="ok", best_val=vals[best_i],
            best_epoch=int(rows_i[best_i][3]),
            test_err=float(test) if test else None))
    top_k = cfg.get_int("experiment", "top_k", str(min(5, len(records))), minimum=1)
    if top_k > len(records):
        raise UsageError(f"top_k={top_k} exceeds recorded trials={len(records)}")
    top, mean, std = select_top_trials(records, top_k)
    arch = cfg.raw("model", "arch")
    n_h = cfg.get_int("model", "n_h")
    out_rows = [("trial", arch, n_h, i, r.seed, r.log10_lr, r.status,
                 r.best_epoch, r.best_val, r.test_err, None)
                for i, r in enumerate(records)]
    out_rows.append((f"top{top_k}", arch, n_h, None, None, top[0].log10_lr,
                     None, None, None, mean, std))
    write_table(os.path.join(out_dir, "report.csv"), cfg, SUMMARY_COLUMNS, out_rows)
    print(f"wrote {out_dir}/report.csv")
    return 0


# ---------------------------------------------------------------------------
# dispatch

def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = Config(args.config, overrides={
        ("experiment", "seed"): args.seed,
        ("experiment", "precision"): args.precision,
        ("experiment", "out"): args.out,
    })
    out_dir = cfg.raw("experiment", "out")
    if out_dir is None:
        raise UsageError("no output directory (set [experiment] out or pass --out)")
    if args.workers < 1:
        raise UsageError(f"--workers must be >= 1, got {args.workers}")
    if args.verb == "run":
        return cmd_run(cfg, out_dir, args.workers)
    if args.verb == "probe":
        return cmd_probe(cfg, out_dir)
    if args.verb == "paths":
        return cmd_paths(cfg, out_dir)
    return cmd_report(cfg, out_dir)


def entry(argv=None):
    try:
        return main(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entry())
