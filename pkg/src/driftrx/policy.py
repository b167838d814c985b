"""Retraining policies, budget enforcement and complexity accounting.

Policies:

* ``always``        every group on every block
* ``periodic``      every group on blocks ``t % period == 0``
* ``unstructured``  one detector over the whole receiver; all groups or none
* ``modular``       one detector per module group; the union of detections

Plan sizes ``|M^tr[t]|`` are counted in modules, so an all-groups plan on
DeepSIC counts K*Q and a monolithic receiver counts 1.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .detectors import DriftDetector, Evidence
from .receivers import Receiver, SoftPosterior, decisions

POLICY_KINDS = ("always", "periodic", "unstructured", "modular")


@dataclass
class RetrainPlan:
    block: int
    groups: tuple = ()
    n_modules: int = 0
    params_retrained: int = 0
    detections_run: int = 0
    statistics: dict = field(default_factory=dict)
    fired: tuple = ()

    @property
    def empty(self) -> bool:
        return not self.groups


@dataclass
class Budget:
    """Cap on the cumulative number of retrained modules."""

    C: float = math.inf
    spent: int = 0

    @property
    def remaining(self) -> float:
        return self.C - self.spent

    def charge(self, n_modules: int) -> None:
        if n_modules > self.remaining:
            raise RuntimeError(f"plan of {n_modules} modules exceeds remaining budget {self.remaining}")
        self.spent += n_modules


@dataclass
class ComplexityLedger:
    kappa_d_count: int = 0
    kappa_t_params: int = 0
    modules_retrained: int = 0
    retrain_events: int = 0
    group_retrains: Counter = field(default_factory=Counter)
    blocks: int = 0

    def retrain_probabilities(self) -> dict:
        """Empirical per-group retraining frequency over the accounted blocks."""
        return {g: n / self.blocks for g, n in sorted(self.group_retrains.items())} if self.blocks else {}


def account(ledger: ComplexityLedger, plan: RetrainPlan, group_param_counts: dict,
            group_module_counts: dict | None = None) -> ComplexityLedger:
    """Add a plan's detection units and retrained parameters to the ledger."""
    ledger.kappa_d_count += plan.detections_run
    if plan.groups:
        ledger.kappa_t_params += sum(group_param_counts[g] for g in plan.groups)
        if group_module_counts is not None:
            ledger.modules_retrained += sum(group_module_counts[g] for g in plan.groups)
        else:
            ledger.modules_retrained += plan.n_modules
        ledger.retrain_events += 1
        ledger.group_retrains.update(plan.groups)
    return ledger


def compression_ratio(ledger: ComplexityLedger, horizon: int, n_modules: int) -> float:
    """Fraction of module-blocks retrained, ``sum_t |M^tr[t]| / (T M)``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return ledger.modules_retrained / (horizon * n_modules)


def group_evidence(receiver: Receiver, posterior: SoftPosterior, pilots_tx: np.ndarray,
                   y_block: np.ndarray, users) -> Evidence:
    """Pool the pilot posteriors and decisions of ``users`` into one evidence record."""
    cols = [u - 1 for u in users]
    probs = posterior.probs[:, cols, :].reshape(-1, posterior.probs.shape[-1])
    truth = np.asarray(pilots_tx)[:, cols].reshape(-1)
    hard = decisions(posterior, receiver.constellation)[:, cols].reshape(-1)
    return Evidence(probs, receiver.constellation.index_of(truth), hard, truth, y_block)


def parse_policy(spec: str) -> dict:
    """Parse ``always``, ``periodic:10``, ``unstructured:ddm`` or ``modular:hotelling:5``."""
    parts = spec.strip().split(":")
    kind = parts[0]
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
    out = {"kind": kind}
    if kind == "periodic":
        out["period"] = int(parts[1]) if len(parts) > 1 else 10
    elif kind in ("unstructured", "modular"):
        if len(parts) < 2:
            raise ValueError(f"policy {spec!r} needs a detector, e.g. {kind}:hotelling")
        out["detector"] = parts[1]
        if len(parts) > 2:
            out["threshold"] = float(parts[2])
    return out


class Policy:
    """Decides which module groups of a receiver to retrain on each block."""

    def __init__(self, kind: str, receiver: Receiver, period: int = 10, detector: str = "hotelling",
                 threshold: float | None = None, beta: float = 0.2, delta: float = 0.05,
                 budget: float = math.inf):
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
        if kind == "periodic" and period < 1:
            raise ValueError("period must be >= 1")
        self.kind, self.period = kind, period
        self.detector_kind = detector
        self.groups = list(receiver.groups)
        self.group_modules = {g: len(receiver.modules_of(g)) for g in self.groups}
        self.group_params = {g: receiver.group_param_count(g) for g in self.groups}
        self.group_users = {g: receiver.group_users(g) for g in self.groups}
        self.all_users = list(range(1, receiver.n_users + 1))
        self.budget = Budget(budget)
        self.ledger = ComplexityLedger()
        n_symbols = receiver.constellation.size
        make = lambda: DriftDetector(detector, threshold, beta, delta, n_symbols)  # noqa: E731
        if kind == "unstructured":
            self.detectors = {None: make()}
        elif kind == "modular":
            self.detectors = {g: make() for g in self.groups}
        else:
            self.detectors = {}
        self._rebaselined = {}
        self.evaluated = ()

    @property
    def scheduled(self) -> bool:
        return self.kind in ("always", "periodic")

    @property
    def threshold(self) -> float | None:
        return next(iter(self.detectors.values())).lam if self.detectors else None

    @property
    def label(self) -> str:
        if self.kind == "periodic":
            return f"periodic{self.period}"
        if self.scheduled:
            return self.kind
        return f"{self.kind}-{self.detector_kind}"

    def _plan(self, t: int, groups, detections: int = 0, stats=None, fired=()) -> RetrainPlan:
        groups = tuple(sorted(groups))
        return RetrainPlan(t, groups, sum(self.group_modules[g] for g in groups),
                           sum(self.group_params[g] for g in groups), detections, dict(stats or {}), tuple(fired))

    def decide(self, t: int, receiver: Receiver | None = None, posterior: SoftPosterior | None = None,
               pilots_tx=None, y_block=None) -> RetrainPlan:
        """Plan for block ``t``.  Detector policies need the pilot posteriors."""
        if self.kind == "always":
            return self._truncate(self._plan(t, self.groups), {})
        if self.kind == "periodic":
            return self._truncate(self._plan(t, self.groups if t % self.period == 0 else ()), {})
        # a detector reset by a retrain on this very block would otherwise take its
        # baseline from the pilots the receiver was just fitted to
        live = {g: d for g, d in self.detectors.items() if self._rebaselined.get(g) != t}
        self.evaluated = tuple(live)
        if self.kind == "unstructured":
            if not live:
                return self._plan(t, ())
            det = self.detectors[None]
            fired = det.step(group_evidence(receiver, posterior, pilots_tx, y_block, self.all_users))
            stats = {g: det.statistic for g in self.groups}
            margins = {g: det.margin for g in self.groups}
            plan = self._plan(t, self.groups if fired else (), 1, stats, self.groups if fired else ())
            return self._truncate(plan, margins, all_or_nothing=True)
        chosen, stats, margins = [], {}, {}
        for g, det in live.items():
            if det.step(group_evidence(receiver, posterior, pilots_tx, y_block, self.group_users[g])):
                chosen.append(g)
            stats[g], margins[g] = det.statistic, det.margin
        return self._truncate(self._plan(t, chosen, len(live), stats, chosen), margins)

    def _truncate(self, plan: RetrainPlan, margins: dict, all_or_nothing: bool = False) -> RetrainPlan:
        """Drop the least urgent groups until the plan fits the remaining budget."""
        if plan.n_modules <= self.budget.remaining:
            return plan
        if all_or_nothing:
            return self._plan(plan.block, (), plan.detections_run, plan.statistics, plan.fired)
        keep = sorted(plan.groups, key=lambda g: (margins.get(g, 0.0), -g), reverse=True)
        while keep and sum(self.group_modules[g] for g in keep) > self.budget.remaining:
            keep.pop()
        return self._plan(plan.block, keep, plan.detections_run, plan.statistics, plan.fired)

    def commit(self, plan: RetrainPlan) -> None:
        """Record that ``plan`` was executed: charge budget, update ledger, re-baseline detectors."""
        self.budget.charge(plan.n_modules)
        account(self.ledger, replace(plan, detections_run=0), self.group_params, self.group_modules)
        if not plan.groups:
            return
        if self.kind == "unstructured":
            self.detectors[None].reset()
            self._rebaselined[None] = plan.block
        elif self.kind == "modular":
            for g in plan.groups:
                self.detectors[g].reset()
                self._rebaselined[g] = plan.block

    def count_detections(self, plan: RetrainPlan) -> None:
        """Charge detection units when the plan is decided, separately from execution."""
        self.ledger.kappa_d_count += plan.detections_run
