import os

import pytest

from driftrx import cli
from driftrx.harness import OUTPUT_ENV

TINY = ["--T", "3", "--change-blocks", "2", "--b-tran", "300", "--b-pilot", "100", "--epochs", "3",
        "--initial-epochs", "5", "--seeds", "0"]


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    return tmp_path


def test_run_writes_csvs(outdir, capsys):
    assert cli.main(["run", *TINY, "--policy", "modular", "--detector", "hotelling"]) == 0
    assert "modular-hotelling" in capsys.readouterr().out
    run_dir = outdir / "modular-hotelling_snr12_seed0"
    assert sorted(os.listdir(run_dir)) == ["blocks.csv", "events.csv", "summary.csv"]
    assert (outdir / "summary_modular-hotelling_snr12.csv").exists()


def test_config_file_with_flag_override(outdir, tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("policy = periodic\nperiod = 2\nsnr_db = 8\n")
    assert cli.main(["run", "--config", str(cfg), *TINY, "--snr-db", "10"]) == 0
    assert (outdir / "periodic2_snr10_seed0" / "blocks.csv").exists()


def test_sweep_compare_calibrate(outdir, capsys):
    assert cli.main(["sweep", *TINY, "--snrs", "8,12"]) == 0
    assert (outdir / "sweep_always.csv").read_text().startswith("snr,avg_ber,retrains\n")
    assert cli.main(["compare", *TINY, "--policies", "always,unstructured:ddm"]) == 0
    assert "DDM[" in capsys.readouterr().out
    assert cli.main(["calibrate", *TINY, "--policy", "unstructured", "--detector", "hotelling",
                     "--target", "0", "--grid=-1,1e9"]) == 0
    assert "best lambda 1e+09" in capsys.readouterr().out


def test_invalid_config_exits_nonzero(outdir, capsys):
    assert cli.main(["run", "--T", "0"]) == cli.EXIT_CONFIG
    assert "T:" in capsys.readouterr().err
    assert cli.main(["run", "--config", "/nonexistent.cfg"]) == cli.EXIT_CONFIG
    assert cli.main(["calibrate", *TINY, "--target", "1", "--grid", "1"]) == cli.EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero(outdir, capsys):
    assert cli.main(["run", *TINY, "--lr", "1e100"]) == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
