import dataclasses
import hashlib
import os

import numpy as np
import pytest

from driftrx.harness import (BLOCK_FIELDS, OUTPUT_ENV, SUMMARY_FIELDS, ConfigValidationError, ExperimentConfig,
                             blocks_csv, bracket_label, calibrate, compare_policies, load_config, output_root,
                             parse_config, run, run_seeds, sweep_snr, write_run)

SMALL = dict(T=6, change_blocks=[2], b_tran=400, b_pilot=100, epochs=10, initial_epochs=30, seeds=[0])


def small(**kw) -> ExperimentConfig:
    return ExperimentConfig(**{**SMALL, **kw})


def test_defaults_are_desk_scale():
    cfg = ExperimentConfig()
    assert (cfg.block_size, cfg.pilot_size) == (2000, 400)
    assert dataclasses.replace(cfg, fast=False).pilot_size == 2000
    siso = ExperimentConfig(scenario="siso_isi", receiver="viterbinet")
    assert siso.pilot_size == 200 and dataclasses.replace(siso, fast=False).pilot_size == 500


def test_parse_config_types_comments_and_overrides():
    text = """
    # a comment
    scenario = mimo
    T = 12          # trailing comment
    snr_db = 10.5
    seeds = 1, 2, 3
    fast = false
    b_tran = 3000
    b_pilot = 600
    threshold = none
    change_blocks = 5 9
    """
    cfg = parse_config(text, snr_db=11.0)
    assert cfg.T == 12 and cfg.seeds == [1, 2, 3] and cfg.fast is False and cfg.threshold is None
    assert cfg.snr_db == 11.0 and cfg.change_blocks == [5, 9]


def test_config_text_roundtrip(tmp_path):
    cfg = small(policy="modular", detector="ddm", threshold=2.5, budget=30.0)
    path = tmp_path / "cfg.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


@pytest.mark.parametrize("text, field", [
    ("T = 0", "T"),
    ("bogus = 1", "bogus"),
    ("T = ten", "T"),
    ("b_pilot = 5000", "b_pilot"),
    ("scenario = siso_isi", "receiver"),
    ("policy = unstructured\ndetector = cusum", "cusum"),
    ("retrain_timing = later", "retrain_timing"),
    ("seeds = ", "seeds"),
    ("budget = -1", "budget"),
    ("fast = maybe", "fast"),
    ("T = 3\nchange_blocks = 5", "change_blocks"),
])
def test_validation_names_the_field(text, field):
    with pytest.raises(ConfigValidationError, match=field):
        parse_config(text)


def test_validation_reports_every_problem():
    with pytest.raises(ConfigValidationError) as err:
        parse_config("T = 0\nlr = -1\nretrain_timing = later")
    msg = str(err.value)
    assert "T:" in msg and "training:" in msg and "retrain_timing:" in msg


def test_policy_spec_roundtrip():
    cfg = small().with_policy("unstructured:ddm:4")
    assert (cfg.policy, cfg.detector, cfg.threshold, cfg.policy_spec) == ("unstructured", "ddm", 4.0,
                                                                          "unstructured:ddm:4.0")
    assert cfg.with_policy("periodic:3").policy_spec == "periodic:3"


def test_run_records_and_aggregates():
    res = run(small(policy="periodic", period=2))
    assert [r.t for r in res.records] == list(range(1, 7))
    assert [r.retrain for r in res.records] == [False, True, False, True, False, True]
    errs = np.cumsum([r.errors for r in res.records])
    bits = np.cumsum([r.bits for r in res.records])
    assert np.allclose([r.ber_agg for r in res.records], errs / bits)
    assert res.summary["avg_ber"] == res.records[-1].ber_agg
    assert res.summary["retrains"] == 3 and res.summary["ratio"] == 0.5
    assert all(0 <= r.ber_agg <= 1 for r in res.records)


def test_always_on_static_channel_high_snr():
    res = run(small(profile="static", snr_db=16.0, T=4, b_tran=1200, b_pilot=400, epochs=30, initial_epochs=100))
    assert res.summary["retrains"] == 4
    assert np.mean([r.ber_inst for r in res.records[1:]]) <= 1e-3


def test_consecutive_and_same_timing():
    thr = dict(policy="unstructured", detector="hotelling", threshold=-1.0)
    same = run(small(retrain_timing="same", **thr))
    assert [r.t for r in same.records if r.retrain] == list(range(1, 7))
    later = run(small(**thr))
    # fires on every evaluated block, retrains the block after, skips its own retrain block
    assert [r.t for r in later.records if r.retrain] == [2, 4, 6]


def test_detector_events_logged():
    res = run(small(policy="modular", detector="posterior"))
    assert res.events and {e["detector"] for e in res.events} <= {f"posterior:{g}" for g in range(1, 5)}
    assert res.ledger.kappa_d_count == len(res.events)


def test_ledger_matches_checkpoint_diff():
    res = run(small(policy="modular", detector="hotelling", threshold=0.5, verify_ledger=True))
    assert res.measured_params == res.ledger.kappa_t_params
    full = run(small(policy="always", T=2, verify_ledger=True))
    assert full.measured_params == full.ledger.kappa_t_params == 2 * 6936


def test_budget_respected_in_run():
    res = run(small(policy="always", budget=30))
    # two full plans of 12 modules, then truncated to the 6 modules left
    assert res.ledger.modules_retrained == 30 and res.summary["retrains"] == 3
    assert res.records[2].groups == (1, 2) and not any(r.retrain for r in res.records[3:])


def test_siso_run():
    res = run(small(scenario="siso_isi", receiver="viterbinet", policy="unstructured", detector="pht",
                    b_pilot=100))
    assert len(res.records) == 6 and res.summary["policy"] == "unstructured-pht"


def test_csv_outputs_are_deterministic(tmp_path, monkeypatch):
    cfg = small(policy="unstructured", detector="ddm")
    a, b = run(cfg), run(cfg)
    assert blocks_csv(a.records) == blocks_csv(b.records)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_root(cfg) == str(tmp_path / "env")
    path = write_run(a, output_root(cfg))
    assert os.path.basename(path) == "unstructured-ddm_snr12_seed0"
    header = open(os.path.join(path, "blocks.csv")).readline().strip()
    assert header == ",".join(BLOCK_FIELDS)
    summary = open(os.path.join(path, "summary.csv")).read().splitlines()
    assert summary[0] == ",".join(SUMMARY_FIELDS) and len(summary) == 2
    digest = hashlib.sha256(open(os.path.join(path, "blocks.csv"), "rb").read()).hexdigest()
    write_run(b, str(tmp_path / "again"))
    again = os.path.join(tmp_path, "again", "unstructured-ddm_snr12_seed0", "blocks.csv")
    assert hashlib.sha256(open(again, "rb").read()).hexdigest() == digest


def test_different_seeds_differ():
    cfg = small(T=2)
    assert blocks_csv(run(cfg, 0).records) != blocks_csv(run(cfg, 1).records)


def test_sweep_single_point_equals_run():
    cfg = small(T=3)
    table = sweep_snr(cfg, [12.0])
    assert len(table) == 1 and table[0]["avg_ber"] == run(cfg).summary["avg_ber"]
    with pytest.raises(ValueError):
        sweep_snr(cfg, [])


def test_sweep_ber_decreases_with_snr():
    cfg = small(T=2, profile="static", seeds=[0, 1, 2, 3, 4], b_tran=1000, b_pilot=300, epochs=20,
                initial_epochs=60)
    bers = [row["avg_ber"] for row in sweep_snr(cfg, [6.0, 9.0, 12.0])]
    assert bers[0] > bers[1] > bers[2]


def test_compare_policies_table():
    table = compare_policies(small(T=10, seeds=[0, 1]), ["always", "periodic:10", "unstructured:hotelling"])
    assert [row["label"] for row in table][:2] == ["Always[10]", "Periodic10[1]"]
    assert table[0]["ratio"] == 1.0 and table[1]["retrains"] == 1.0
    assert table[2]["label"].startswith("HT[")


def test_bracket_label():
    assert bracket_label("unstructured-ddm", 9.2) == "DDM[9.2]"
    assert bracket_label("modular-hotelling", 4.0) == "HT[4]"


def test_calibrate_orders_by_target():
    rows = calibrate(small(policy="unstructured", detector="hotelling"), 0, [-1.0, 1e9])
    assert rows[0]["threshold"] == 1e9 and rows[0]["retrains"] == 0


def test_run_seeds_writes(tmp_path):
    cfg = small(T=2, seeds=[3, 4], output_dir=str(tmp_path))
    results = run_seeds(cfg, write=True)
    assert [r.seed for r in results] == [3, 4]
    assert sorted(os.listdir(tmp_path)) == ["always_snr12_seed3", "always_snr12_seed4"]
