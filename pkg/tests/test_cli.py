"""Command-line verbs: exit codes, output tables, reproducibility."""

import json
import subprocess
import sys

import numpy as np
import pytest

from rnnlab import numkernel as nk
from rnnlab.cells import CellConfig
from rnnlab.cli import entry
from rnnlab.engine import Model

RUN_CONFIG = """\
[experiment]
seed = 3
trials = 3
top_k = 2

[task]
kind = copy
delay = 10
n_train = 200
n_val = 60
seed = 1

[model]
arch = simple
n_h = 8

[train]
max_epochs = 2
batch_size = 50
eval_batch_size = 60
"""


def write_config(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def data_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# rnnlab ")
    assert lines[1].startswith("# config ")
    return lines[2].split(","), [line.split(",") for line in lines[3:]]


def save_untrained(path, arch, n_h, n_x=1, n_d=None, seed=7):
    kwargs = {"arch": arch, "n_x": n_x, "n_h": n_h}
    if n_d is not None:
        kwargs["n_d"] = n_d
    model = Model(CellConfig(**kwargs), 10)
    params = model.init_params(nk.make_rng(seed, 1))
    model.save_checkpoint(path, params)
    return model, params


# ---------------------------------------------------------------------------
# run

def test_run_writes_tables_with_headers(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    out = tmp_path / "res"
    assert entry(["run", "--config", cfg, "--out", str(out)]) == 0
    cols, rows = data_rows(out / "trials.csv")
    assert cols == ["trial_id", "seed", "log10_lr", "epoch",
                    "train_loss", "val_loss", "val_err", "test_err"]
    assert len(rows) == 3 * 2                    # 3 trials, 2 epochs each
    assert sorted({r[0] for r in rows}) == ["0", "1", "2"]
    assert {r[1] for r in rows} == {"3", "4", "5"}

    cols, rows = data_rows(out / "summary.csv")
    assert len(rows) == 3 + 1
    assert rows[-1][0] == "top2"
    assert rows[-1][1] == "simple" and rows[-1][2] == "8"
    payload = json.loads((out / "summary.json").read_text())
    assert payload["trials"] == 3 and payload["top_k"] == 2
    assert len(payload["records"]) == 3
    # the reported optimal learning rate belongs to the best-validation trial
    best = min(payload["records"], key=lambda r: (r["best_val"], r["seed"]))
    assert payload["lr_star_log10"] == best["log10_lr"]
    assert (out / "checkpoint_simple.npz").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    a, b = tmp_path / "a", tmp_path / "b"
    assert entry(["run", "--config", cfg, "--out", str(a)]) == 0
    assert entry(["run", "--config", cfg, "--out", str(b)]) == 0
    for name in ("trials.csv", "summary.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_worker_pool_matches_serial_run(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    serial, pooled = tmp_path / "s", tmp_path / "p"
    assert entry(["run", "--config", cfg, "--out", str(serial)]) == 0
    assert entry(["run", "--config", cfg, "--out", str(pooled),
                  "--workers", "2"]) == 0
    for name in ("trials.csv", "summary.csv"):
        assert (serial / name).read_bytes() == (pooled / name).read_bytes()


def test_seed_override_changes_results(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    a, b = tmp_path / "a", tmp_path / "b"
    assert entry(["run", "--config", cfg, "--out", str(a)]) == 0
    assert entry(["run", "--config", cfg, "--out", str(b), "--seed", "90"]) == 0
    assert (a / "trials.csv").read_bytes() != (b / "trials.csv").read_bytes()
    hash_a = (a / "trials.csv").read_text().splitlines()[1]
    hash_b = (b / "trials.csv").read_text().splitlines()[1]
    assert hash_a != hash_b                      # overrides enter the config hash
    cols, rows = data_rows(b / "trials.csv")
    assert {r[1] for r in rows} == {"90", "91", "92"}


def test_run_validates_config_before_any_compute(tmp_path):
    bad = RUN_CONFIG.replace("top_k = 2", "top_k = 9")
    cfg = write_config(tmp_path, bad)
    out = tmp_path / "res"
    assert entry(["run", "--config", cfg, "--out", str(out)]) == 1
    assert not out.exists()


# ---------------------------------------------------------------------------
# probe

def probe_config(tmp_path, lines, T=320):
    text = f"[probe]\nt = {T}\nbatch_size = 8\nseed = 0\n" + "\n".join(lines) + "\n"
    return write_config(tmp_path, text, "probe.ini")


def test_probe_emits_aligned_profiles(tmp_path):
    paths = {}
    for arch, n_d in (("simple", None), ("lstm", None), ("mist", 8)):
        paths[arch] = str(tmp_path / f"ck_{arch}.npz")
        save_untrained(paths[arch], arch, 16, n_d=n_d)
    cfg = probe_config(tmp_path, [f"checkpoint_{a} = {p}" for a, p in paths.items()])
    out = tmp_path / "probe"
    assert entry(["probe", "--config", cfg, "--out", str(out)]) == 0
    cols, rows = data_rows(out / "profile_combined.csv")
    assert cols == ["tau", "simple", "lstm", "mist"]
    assert len(rows) == 319
    assert [r[0] for r in rows[:3]] == ["1", "2", "3"]
    for arch in paths:
        acols, arows = data_rows(out / f"profile_{arch}.csv")
        assert acols == ["tau", "mean_norm"]
        assert len(arows) == 319
    # far from the loss an untrained simple network carries almost nothing
    _, srows = data_rows(out / "profile_simple.csv")
    norms = {int(r[0]): float(r[1]) for r in srows}
    assert norms[300] < 1e-12 * norms[1]


def test_probe_zero_norms_written_exactly(tmp_path):
    path = str(tmp_path / "ck.npz")
    model, params = save_untrained(path, "simple", 6)
    params["W_h"][...] = 0.0
    model.save_checkpoint(path, params)
    cfg = probe_config(tmp_path, [f"checkpoint_simple = {path}"], T=12)
    out = tmp_path / "probe"
    assert entry(["probe", "--config", cfg, "--out", str(out)]) == 0
    _, rows = data_rows(out / "profile_simple.csv")
    assert all(r[1] == "0.0" for r in rows)


def test_probe_rejects_arch_mismatch(tmp_path):
    path = str(tmp_path / "ck.npz")
    save_untrained(path, "simple", 6)
    cfg = probe_config(tmp_path, [f"checkpoint_lstm = {path}"])
    assert entry(["probe", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_probe_rejects_wrong_input_width(tmp_path):
    path = str(tmp_path / "ck.npz")
    save_untrained(path, "simple", 6, n_x=12)
    cfg = probe_config(tmp_path, [f"checkpoint_simple = {path}"])
    assert entry(["probe", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_probe_missing_checkpoint_is_data_error(tmp_path):
    cfg = probe_config(tmp_path, [f"checkpoint_simple = {tmp_path}/absent.npz"])
    assert entry(["probe", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_probe_without_entries_is_usage_error(tmp_path):
    cfg = probe_config(tmp_path, [])
    assert entry(["probe", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------------------
# paths

def test_paths_table_with_closed_form(tmp_path):
    cfg = write_config(tmp_path, "[paths]\ndelays = 1,2\ntau_max = 100\n")
    out = tmp_path / "paths"
    assert entry(["paths", "--config", cfg, "--out", str(out)]) == 0
    cols, rows = data_rows(out / "paths.csv")
    assert cols == ["tau", "length", "predicted", "match"]
    assert len(rows) == 101
    assert rows[5] == ["5", "3", "3", "1"]
    assert rows[100] == ["100", "50", "50", "1"]


def test_paths_default_family_all_match(tmp_path):
    cfg = write_config(tmp_path, "[paths]\n")
    out = tmp_path / "paths"
    assert entry(["paths", "--config", cfg, "--out", str(out)]) == 0
    _, rows = data_rows(out / "paths.csv")
    assert len(rows) == 1025
    assert all(r[3] == "1" for r in rows)


def test_paths_irregular_family_has_no_prediction(tmp_path):
    cfg = write_config(tmp_path, "[paths]\ndelays = 3,5\ntau_max = 10\n")
    out = tmp_path / "paths"
    assert entry(["paths", "--config", cfg, "--out", str(out)]) == 0
    _, rows = data_rows(out / "paths.csv")
    assert rows[1] == ["1", "-1", "", ""]        # unreachable, no closed form
    assert rows[8][1] == "2"                     # 3 + 5


def test_paths_rejects_bad_delays(tmp_path):
    cfg = write_config(tmp_path, "[paths]\ndelays = 2,1\n")
    assert entry(["paths", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------------------
# report

def test_report_rebuilds_summary(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    out = tmp_path / "res"
    assert entry(["run", "--config", cfg, "--out", str(out)]) == 0
    assert entry(["report", "--config", cfg, "--out", str(out)]) == 0
    scols, srows = data_rows(out / "summary.csv")
    rcols, rrows = data_rows(out / "report.csv")
    assert rcols == scols
    assert len(rrows) == len(srows)
    assert rrows[-1][0] == "top2"
    assert rrows[-1][5] == srows[-1][5]          # same optimal learning rate


def test_report_without_trials_table_is_data_error(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    assert entry(["report", "--config", cfg, "--out", str(tmp_path / "nope")]) == 2


# ---------------------------------------------------------------------------
# usage and data errors

def test_bad_invocations_exit_one(tmp_path):
    cfg = write_config(tmp_path, RUN_CONFIG)
    assert entry(["flerp", "--config", cfg]) == 1
    assert entry(["run"]) == 1
    assert entry(["run", "--config", str(tmp_path / "missing.ini")]) == 1
    assert entry(["run", "--config", cfg]) == 1  # no out dir anywhere
    assert entry(["run", "--config", cfg, "--out", str(tmp_path / "o"),
                  "--workers", "0"]) == 1


def test_missing_dataset_is_data_error(tmp_path):
    text = RUN_CONFIG.replace(
        "kind = copy\ndelay = 10\n",
        f"kind = pmnist\ndata_dir = {tmp_path}/empty\n")
    cfg = write_config(tmp_path, text)
    assert entry(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point_runs(tmp_path):
    cfg = write_config(tmp_path, "[paths]\ndelays = 1,2\ntau_max = 10\n")
    out = tmp_path / "paths"
    proc = subprocess.run([sys.executable, "-m", "rnnlab.cli", "paths",
                          "--config", cfg, "--out", str(out)],
                         capture_output=True, text=True)
    assert proc.returncode == 0
    assert (out / "paths.csv").exists()
