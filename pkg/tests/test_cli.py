"""End-to-end command runs at toy scale, exit codes and re-run determinism."""

import subprocess
import sys

import pytest

from afnet.cli import (
    EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, git_blob_sha1, main, max_feasible_ratio,
    parse_config_text,
)

FAST = ["--set", "max_epochs=2", "--set", "batch_size=8", "--set", "val_fraction=0.2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n-af0", "14", "--n-af1", "12", "--seed", "7", "--n-samples", "600",
                 "--out", str(root / "data")]) == EXIT_OK
    assert main(["prepare", "--manifest", str(root / "data" / "manifest.csv"), "--seed", "7",
                 "--test-frac", "0.25"]) == EXIT_OK
    return root


def test_prepare_default_out_and_counts(work):
    report = (work / "data" / "splits" / "split_report.txt").read_text()
    # 3 test positives; AF0 14 - 9 train leaves room for ratio 1 only
    assert "test_balanced.total=6" in report
    assert "train.AF0=18" in report and "train.AF1=18" in report
    assert "unbal_ratio=1" in report


@pytest.mark.parametrize("model", ["ecg", "tab", "full"])
def test_train_then_eval(work, model, capsys):
    out = work / f"run_{model}"
    assert main(["train", "--splits", str(work / "data" / "splits"), "--model", model, "--out", str(out)] + FAST) == 0
    for name in ("model.afck", "run_config.txt", "history.csv", "run_report.txt"):
        assert (out / name).exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.afck"), "--splits", str(work / "data" / "splits"),
                 "--out", str(out / "eval")]) == 0
    printed = capsys.readouterr().out
    assert "test_balanced: ACC=" in printed and "test_unbalanced: ACC=" in printed and "AUC=" in printed
    report = (out / "eval" / "eval_report.txt").read_text()
    assert "test_balanced.auc=" in report and "# calibration test_unbalanced" in report


def test_train_rerun_is_byte_identical(work):
    runs = []
    for tag in ("a", "b"):
        out = work / f"det_{tag}"
        assert main(["train", "--splits", str(work / "data" / "splits"), "--model", "ecg", "--seed", "3",
                     "--out", str(out)] + FAST) == 0
        runs.append(out)
    for name in ("model.afck", "model.afck.norm.csv", "run_report.txt", "history.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


def test_synth_rerun_is_byte_identical(work):
    assert main(["synth", "--n-af0", "14", "--n-af1", "12", "--seed", "7", "--n-samples", "600",
                 "--out", str(work / "data2")]) == 0
    assert git_blob_sha1(work / "data" / "manifest.csv") == git_blob_sha1(work / "data2" / "manifest.csv")


def test_cam_and_filter_and_report(work, capsys):
    ck = work / "cam_run"
    assert main(["train", "--splits", str(work / "data" / "splits"), "--out", str(ck)] + FAST) == 0
    assert main(["cam", "--checkpoint", str(ck / "model.afck"), "--manifest", str(work / "data" / "manifest.csv"),
                 "--limit", "2", "--out", str(work / "cam")]) == 0
    lines = (work / "cam" / "cam.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 75  # 600 samples / 8
    assert main(["filter", "--manifest", str(work / "data" / "manifest.csv"), "--band", "5-20",
                 "--out", str(work / "filtered")]) == 0
    assert (work / "filtered" / "manifest.csv").exists()
    csv = work / "t.csv"
    csv.write_text("condition,mean_auc,std_auc,seed_0,seed_1,error\nD1,0.8,0.01,0.79,0.81,\n")
    capsys.readouterr()
    assert main(["report", str(csv), "--out", str(work / "rep")]) == 0
    assert "80.0" in capsys.readouterr().out


def test_ablate_bands_toy(work):
    out = work / "abl"
    rc = main(["ablate-bands", "--manifest", str(work / "data" / "manifest.csv"), "--bands", "none,5-20",
               "--set", "seeds=0,1", "--set", "test_frac=0.25", "--out", str(out)] + FAST)
    assert rc == 0
    assert (out / "band_ablation.csv").read_text().startswith("condition,mean_auc")


# -- exit codes --------------------------------------------------------------------------


def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "afnet.cli", "eval", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--checkpoint" in r.stdout


def test_usage_errors():
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["train", "--nope"]) == EXIT_USAGE
    assert main(["ablate-leads", "--manifest", "x.csv", "--out", "y", "--set", "seeds=0"]) == EXIT_USAGE


def test_unknown_config_key(work):
    rc = main(["train", "--splits", str(work / "data" / "splits"), "--out", str(work / "u"), "--set", "lr=1"])
    assert rc == EXIT_USAGE


def test_missing_input_is_data_error(tmp_path):
    assert main(["prepare", "--manifest", str(tmp_path / "none.csv")]) == EXIT_DATA
    assert main(["train", "--splits", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort(work):
    rc = main(["train", "--splits", str(work / "data" / "splits"), "--model", "tab", "--out", str(work / "nan"),
               "--set", "lr0=1e38"] + FAST)
    assert rc == EXIT_NUMERIC


# -- config ------------------------------------------------------------------------------


def test_config_text_and_env_seed(tmp_path, monkeypatch):
    cfg = parse_config_text("# comment\nmax_epochs = 7\nband=5-20\n")
    assert cfg.max_epochs == 7 and cfg.band_spec().low_hz == 5.0
    with pytest.raises(UsageError):
        parse_config_text("nonsense\n")
    with pytest.raises(UsageError):
        parse_config_text("max_epochs=seven\n")
    assert parse_config_text(RunConfig().to_text()) == RunConfig()
    monkeypatch.setenv("AFNET_SEED", "11")
    from afnet.cli import default_seed
    assert default_seed(None) == 11 and default_seed(2) == 2


def test_max_feasible_ratio():
    assert max_feasible_ratio(50593, 11064, 0.12) >= 5
    assert max_feasible_ratio(2000, 2000, 0.12) == 1
    assert max_feasible_ratio(100, 10, 0.2) == 46
