"""Experiment driver: block loop, metrics and CSV outputs.

A run is fully determined by its config and seed.  The channel trajectory
and every block's symbols and noise are derived from the seed alone, so all
policies compared under one seed see bit-identical data.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .channel import VariationProfile, generate_trajectory, make_block
from .detectors import DETECTOR_KINDS
from .policy import Policy, compression_ratio, parse_policy
from .receivers import TrainingConfig, build_receiver, decisions

OUTPUT_ENV = "DRIFTRX_OUTPUT_DIR"
BLOCK_FIELDS = ("t", "ber_inst", "ber_agg", "retrain", "groups", "statistic")
SUMMARY_FIELDS = ("policy", "snr", "seed", "retrains", "params", "ratio", "avg_ber")


class ConfigValidationError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "mimo"
    profile: str = "single_user_bursty"
    change_blocks: list = field(default_factory=lambda: [25, 50, 65, 80])
    jump_scale: float = 0.5
    drift_rate: float = 0.0
    affected_users: list = field(default_factory=lambda: [2])
    drift_period: float = 20.0
    n_users: int = 4
    n_antennas: int = 4
    memory: int = 4
    T: int = 100
    fast: bool = True
    b_tran: int | None = None
    b_pilot: int | None = None
    snr_db: float = 12.0
    snrs: list = field(default_factory=lambda: [9.0, 10.0, 11.0, 12.0, 13.0])
    receiver: str = "deepsic"
    n_iterations: int = 3
    hidden: int = 64
    policy: str = "always"
    period: int = 10
    detector: str = "hotelling"
    threshold: float | None = None
    beta: float = 0.2
    delta: float = 0.05
    budget: float | None = None
    retrain_timing: str = "consecutive"
    epochs: int = 100
    initial_epochs: int = 200
    lr: float = 0.3
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "results"
    verify_ledger: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def block_size(self) -> int:
        if self.b_tran is not None:
            return self.b_tran
        return 2000 if self.fast else 10000

    @property
    def pilot_size(self) -> int:
        if self.b_pilot is not None:
            return self.b_pilot
        if self.scenario == "siso_isi":
            return 200 if self.fast else 500
        return 400 if self.fast else 2000

    def validate(self) -> None:
        problems = []
        if self.scenario not in ("mimo", "siso_isi"):
            problems.append(f"scenario: {self.scenario!r} is not 'mimo' or 'siso_isi'")
        if self.scenario == "siso_isi" and self.receiver not in ("viterbinet",):
            problems.append(f"receiver: {self.receiver!r} cannot run the siso scenario (use viterbinet)")
        if self.scenario == "mimo" and self.receiver not in ("deepsic", "fc"):
            problems.append(f"receiver: {self.receiver!r} cannot run the mimo scenario (use deepsic or fc)")
        if self.T < 1:
            problems.append(f"T: must be >= 1, got {self.T}")
        if not 1 <= self.pilot_size < self.block_size:
            problems.append(f"b_pilot: need 1 <= b_pilot < b_tran, got {self.pilot_size} and {self.block_size}")
        if not self.seeds:
            problems.append("seeds: at least one seed is required")
        if self.retrain_timing not in ("consecutive", "same"):
            problems.append(f"retrain_timing: {self.retrain_timing!r} is not 'consecutive' or 'same'")
        if self.lr <= 0 or self.epochs < 1 or self.initial_epochs < 1 or self.batch_size < 1:
            problems.append("training: lr must be > 0 and epochs, initial_epochs, batch_size >= 1")
        if self.budget is not None and self.budget < 0:
            problems.append(f"budget: must be >= 0, got {self.budget}")
        if self.profile.endswith("bursty") and any(not 1 <= b <= self.T for b in self.change_blocks):
            problems.append(f"change_blocks: entries must lie in [1, {self.T}]")
        if self.policy in ("unstructured", "modular") and self.detector not in DETECTOR_KINDS:
            problems.append(f"detector: {self.detector!r} is not one of {', '.join(DETECTOR_KINDS)}")
        try:
            parse_policy(self.policy_spec)
            self.variation_profile()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigValidationError("; ".join(problems))

    @property
    def policy_spec(self) -> str:
        if self.policy in ("unstructured", "modular"):
            spec = f"{self.policy}:{self.detector}"
            return spec if self.threshold is None else f"{spec}:{self.threshold}"
        if self.policy == "periodic":
            return f"periodic:{self.period}"
        return self.policy

    def variation_profile(self) -> VariationProfile:
        users = tuple(self.affected_users)
        if self.scenario == "siso_isi":
            users = (1,) if self.profile == "single_user_bursty" else ()
        return VariationProfile(self.profile, tuple(self.change_blocks), self.jump_scale, self.drift_rate,
                                users, self.drift_period)

    def with_policy(self, spec: str) -> "ExperimentConfig":
        p = parse_policy(spec)
        return dataclasses.replace(self, policy=p["kind"], period=p.get("period", self.period),
                                   detector=p.get("detector", self.detector),
                                   threshold=p.get("threshold", self.threshold if p["kind"] == self.policy else None))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_LIST_TYPES = {"change_blocks": int, "affected_users": int, "snrs": float, "seeds": int}


def _convert(name: str, raw: str, annotation: str):
    raw = raw.strip()
    if name in _LIST_TYPES:
        return [_LIST_TYPES[name](x) for x in raw.replace(",", " ").split()]
    if raw.lower() in ("none", "") and "None" in annotation:
        return None
    base = annotation.replace(" | None", "")
    if base == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated config."""
    types = {f.name: str(f.type) for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigValidationError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, types[key])
        except ValueError as exc:
            raise ConfigValidationError(f"line {lineno}: {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


@dataclass
class BlockRecord:
    t: int
    ber_inst: float
    ber_agg: float
    retrain: bool
    groups: tuple
    statistic: dict
    errors: int = 0
    bits: int = 0


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    policy: str
    records: list
    events: list
    summary: dict
    ledger: object
    measured_params: int = 0
    detected_groups: list = field(default_factory=list)
    plans: list = field(default_factory=list)


def _fmt(v: float) -> str:
    return repr(float(v))


def run(config: ExperimentConfig, seed: int | None = None) -> RunResult:
    """Simulate T blocks under one policy and seed."""
    seed = config.seeds[0] if seed is None else seed
    T, n_total, n_pilot = config.T, config.block_size, config.pilot_size
    shape = config.memory if config.scenario == "siso_isi" else (config.n_users, config.n_antennas)
    trajectory = generate_trajectory(config.variation_profile(), shape, T, seed)
    receiver = build_receiver(config.receiver, config.n_users, config.n_antennas, config.memory,
                              config.n_iterations, (config.hidden,), seed=[seed, 11])
    spec = parse_policy(config.policy_spec)
    policy = Policy(spec["kind"], receiver, spec.get("period", config.period), spec.get("detector", config.detector),
                    spec.get("threshold"), config.beta, config.delta,
                    math.inf if config.budget is None else config.budget)
    train_hp = lambda t, epochs: TrainingConfig(epochs, config.lr, config.batch_size, [seed, t])  # noqa: E731

    block = make_block(trajectory, 1, n_total, n_pilot, config.snr_db, seed)
    receiver.retrain(receiver.groups, block, train_hp(0, config.initial_epochs))

    measured = 0
    executed_plans = []

    def execute(plan, block):
        nonlocal measured
        executed_plans.append(plan)
        before = receiver.snapshot() if config.verify_ledger else None
        receiver.retrain(plan.groups, block, train_hp(plan.block, config.epochs))
        policy.commit(plan)
        if before is not None:
            after = receiver.snapshot()
            measured += sum(receiver.modules[m].n_params for m in before if before[m] != after[m])

    records, events, detected = [], [], []
    pending = None
    cum_err = cum_bits = 0
    for t in range(1, T + 1):
        block = make_block(trajectory, t, n_total, n_pilot, config.snr_db, seed)
        executed = ()
        if pending is not None and pending.block == t:
            execute(pending, block)
            executed = pending.groups
            pending = None
        stats = {}
        if policy.scheduled:
            plan = policy.decide(t)
            if plan.groups:
                execute(plan, block)
                executed = plan.groups
        else:
            post = receiver.detect(block.pilots_rx)
            plan = policy.decide(t, receiver, post, block.pilots_tx, block.rx)
            policy.count_detections(plan)
            stats = plan.statistics
            detected.extend(plan.fired)
            for g in policy.evaluated:
                det = policy.detectors[g]
                fired = g in plan.fired if g is not None else bool(plan.fired)
                events.append({"block": t, "detector": f"{policy.detector_kind}:{'all' if g is None else g}",
                               "statistic": det.statistic, "threshold": det.lam, "decision": fired})
            if plan.groups:
                if config.retrain_timing == "same":
                    execute(plan, block)
                    executed = plan.groups
                elif t < T:
                    pending = dataclasses.replace(plan, block=t + 1)
        posterior = receiver.detect(block.rx)
        hard = decisions(posterior, receiver.constellation)[n_pilot:]
        errs = int(np.count_nonzero(hard != block.info_tx))
        bits = block.info_tx.size
        cum_err += errs
        cum_bits += bits
        records.append(BlockRecord(t, errs / bits, cum_err / cum_bits, bool(executed), tuple(executed),
                                   stats, errs, bits))
    policy.ledger.blocks = T
    ledger = policy.ledger
    summary = {
        "policy": policy.label, "snr": config.snr_db, "seed": seed, "retrains": ledger.retrain_events,
        "params": ledger.kappa_t_params, "ratio": compression_ratio(ledger, T, receiver.n_modules),
        "avg_ber": records[-1].ber_agg,
    }
    return RunResult(config, seed, policy.label, records, events, summary, ledger, measured, detected, executed_plans)


def blocks_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BLOCK_FIELDS)
    for r in records:
        stat = ";".join(f"{g if g is not None else 'all'}:{_fmt(v)}" for g, v in r.statistic.items())
        w.writerow([r.t, _fmt(r.ber_inst), _fmt(r.ber_agg), int(r.retrain), ";".join(str(g) for g in r.groups), stat])
    return buf.getvalue()


def summary_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for s in summaries:
        w.writerow([s["policy"], _fmt(s["snr"]), s["seed"], s["retrains"], s["params"], _fmt(s["ratio"]),
                    _fmt(s["avg_ber"])])
    return buf.getvalue()


def events_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("block", "detector", "statistic", "threshold", "decision"))
    for e in events:
        w.writerow([e["block"], e["detector"], _fmt(e["statistic"]), _fmt(e["threshold"]), int(e["decision"])])
    return buf.getvalue()


def output_root(config: ExperimentConfig) -> str:
    return os.environ.get(OUTPUT_ENV) or config.output_dir


def write_run(result: RunResult, root: str) -> str:
    """Write blocks.csv, events.csv and summary.csv into a per-run directory."""
    name = f"{result.policy}_snr{result.config.snr_db:g}_seed{result.seed}"
    path = os.path.join(root, name)
    os.makedirs(path, exist_ok=True)
    for fname, text in (("blocks.csv", blocks_csv(result.records)), ("events.csv", events_csv(result.events)),
                        ("summary.csv", summary_csv([result.summary]))):
        with open(os.path.join(path, fname), "w", newline="") as fh:
            fh.write(text)
    return path


def run_seeds(config: ExperimentConfig, write: bool = False) -> list:
    results = []
    for seed in config.seeds:
        res = run(config, seed)
        if write:
            write_run(res, output_root(config))
        results.append(res)
    return results


def sweep_snr(config: ExperimentConfig, snrs=None, write: bool = False) -> list:
    """Average BER per SNR point over the config's seeds."""
    snrs = list(config.snrs if snrs is None else snrs)
    if not snrs:
        raise ValueError("need at least one SNR point")
    table = []
    for snr in snrs:
        results = run_seeds(dataclasses.replace(config, snr_db=float(snr)), write)
        table.append({"snr": float(snr), "avg_ber": float(np.mean([r.summary["avg_ber"] for r in results])),
                      "retrains": float(np.mean([r.summary["retrains"] for r in results])),
                      "runs": results})
    return table


def bracket_label(policy_label: str, mean_retrains: float) -> str:
    name = policy_label.split("-")[-1]
    name = {"ddm": "DDM", "pht": "PHT", "hotelling": "HT", "posterior": "Posterior",
            "always": "Always"}.get(name, name.capitalize())
    return f"{name}[{mean_retrains:g}]"


def compare_policies(config: ExperimentConfig, policies, write: bool = False) -> list:
    """One row per policy, averaged over seeds on shared channel realizations."""
    table = []
    for spec in policies:
        results = run_seeds(config.with_policy(spec), write)
        retrains = float(np.mean([r.summary["retrains"] for r in results]))
        table.append({
            "policy": results[0].policy, "label": bracket_label(results[0].policy, retrains),
            "retrains": retrains,
            "params": float(np.mean([r.summary["params"] for r in results])),
            "ratio": float(np.mean([r.summary["ratio"] for r in results])),
            "avg_ber": float(np.mean([r.summary["avg_ber"] for r in results])),
            "runs": results,
        })
    return table


def calibrate(config: ExperimentConfig, target_retrains: float, thresholds) -> list:
    """Grid search over thresholds; rows sorted by distance to the target retrain count."""
    rows = []
    for lam in thresholds:
        results = run_seeds(dataclasses.replace(config, threshold=float(lam)))
        retrains = float(np.mean([r.summary["retrains"] for r in results]))
        rows.append({"threshold": float(lam), "retrains": retrains,
                     "avg_ber": float(np.mean([r.summary["avg_ber"] for r in results]))})
    rows.sort(key=lambda r: (abs(r["retrains"] - target_retrains), r["avg_ber"]))
    return rows
