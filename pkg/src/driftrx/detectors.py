"""Block-level drift detectors as pure state machines.

Each ``*_step`` function takes the previous state and one block of evidence
and returns ``(retrain, new_state)``.  A freshly reset state only records a
baseline on its first block and never fires there, which is how detectors
are re-baselined after the receiver has been retrained.

``margin`` on every state measures how far the last statistic went past its
threshold (positive means the detector fired); policies use it to rank groups
when a retraining budget runs short.

A threshold that every possible statistic passes (``always_fire_threshold``)
makes a detector fire unconditionally, baseline blocks included, so an
asynchronous policy degenerates exactly into retraining on every block.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DdmState:
    lam: float = 3.0
    beta: float = 0.2
    mu: float = 0.0          # reference error rate
    sigma: float = 0.0       # reference binomial std
    mu_t: float = 0.0        # last block's raw moments
    sigma_t: float = 0.0
    initialized: bool = False
    statistic: float = 0.0
    margin: float = -math.inf


def unconditional(kind: str, lam: float) -> bool:
    """True when ``lam`` lets every statistic value through."""
    if kind == "posterior":
        return lam > 1.0
    if kind == "ddm":
        return lam == -math.inf
    return lam < 0.0


def always_fire_threshold(kind: str) -> float:
    return {"ddm": -math.inf, "posterior": 2.0}.get(kind, -1.0)


def never_fire_threshold(kind: str) -> float:
    return -math.inf if kind == "posterior" else math.inf


def ddm_moments(decisions, truth) -> tuple[float, float]:
    """Pilot error rate and its binomial standard deviation."""
    decisions = np.asarray(decisions).ravel()
    truth = np.asarray(truth).ravel()
    if decisions.shape != truth.shape:
        raise ValueError(f"{decisions.size} decisions for {truth.size} pilots")
    n = truth.size
    if n < 1:
        raise ValueError("no pilots")
    mu = float(np.count_nonzero(decisions != truth)) / n
    return mu, math.sqrt(mu * (1.0 - mu) / n)


def ddm_step(state: DdmState, decisions, truth):
    mu_t, sigma_t = ddm_moments(decisions, truth)
    if not state.initialized:
        return unconditional("ddm", state.lam), replace(
            state, mu=mu_t, sigma=sigma_t, mu_t=mu_t, sigma_t=sigma_t,
            initialized=True, statistic=mu_t + sigma_t, margin=-math.inf)
    stat = mu_t + sigma_t
    # inf * 0 is nan, so the infinite thresholds are spelled out
    if math.isinf(state.lam):
        bound = state.lam
    else:
        bound = state.mu + state.lam * state.sigma
    margin = stat - bound
    if stat > bound:
        return True, replace(state, mu_t=mu_t, sigma_t=sigma_t, statistic=stat, margin=margin)
    b = state.beta
    return False, replace(state, mu=b * mu_t + (1 - b) * state.mu, sigma=b * sigma_t + (1 - b) * state.sigma,
                          mu_t=mu_t, sigma_t=sigma_t, statistic=stat, margin=margin)


@dataclass(frozen=True)
class PhtState:
    lam: float = 50.0
    beta: float = 0.2
    delta: float = 0.05
    mu: float = 0.0
    d_prev: float = 0.0
    initialized: bool = False
    statistic: float = 0.0
    margin: float = -math.inf


def output_magnitudes(y) -> np.ndarray:
    """Euclidean norm of each received sample (rows of ``y``)."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return np.abs(y)
    return np.linalg.norm(y, axis=1)


def pht_distance(mags: np.ndarray, mu: float, delta: float) -> float:
    return max(0.0, float(np.sum(np.abs(mags - mu) - delta)))


def pht_step(state: PhtState, y_block):
    mags = output_magnitudes(y_block)
    if mags.size == 0:
        raise ValueError("empty block")
    block_mean = float(mags.mean())
    if not state.initialized:
        d = pht_distance(mags, block_mean, state.delta)
        return unconditional("pht", state.lam), replace(state, mu=block_mean, d_prev=d, initialized=True,
                                                       statistic=0.0, margin=-math.inf)
    mu = state.beta * block_mean + (1 - state.beta) * state.mu
    d = pht_distance(mags, mu, state.delta)
    stat = abs(d - state.d_prev)
    margin = stat - state.lam
    if stat > state.lam:
        return True, replace(state, mu=block_mean, d_prev=d, statistic=stat, margin=margin)
    return False, replace(state, mu=mu, d_prev=d, statistic=stat, margin=margin)


@dataclass(frozen=True)
class SoftStats:
    """Per-symbol posterior moments shared by the posterior and Hotelling detectors.

    ``means``, ``variances`` and ``counts`` are indexed by constellation index.
    """

    lam: float = 5.0
    beta: float = 0.2
    n_symbols: int = 2
    means: tuple = ()
    variances: tuple = ()
    counts: tuple = ()
    initialized: bool = False
    statistic: float = 0.0
    margin: float = -math.inf

    def __post_init__(self):
        if not self.means:
            zeros = (0.0,) * self.n_symbols
            object.__setattr__(self, "means", zeros)
            object.__setattr__(self, "variances", zeros)
            object.__setattr__(self, "counts", (0,) * self.n_symbols)


def symbol_moments(probs, truth_idx, n_symbols: int):
    """Per-symbol mean and unbiased variance of P(s | y_i) over pilots carrying s.

    ``probs`` is (n, |S|) and ``truth_idx`` the transmitted symbol indices.
    Symbols with no pilots get mean/variance NaN and count 0; a single pilot
    gets variance 0.
    """
    probs = np.asarray(probs, dtype=float)
    truth_idx = np.asarray(truth_idx).ravel()
    if probs.ndim != 2 or len(probs) != truth_idx.size:
        raise ValueError(f"posteriors {probs.shape} do not match {truth_idx.size} pilots")
    if truth_idx.size == 0:
        raise ValueError("no pilots")
    means = np.full(n_symbols, np.nan)
    variances = np.full(n_symbols, np.nan)
    counts = np.zeros(n_symbols, dtype=np.int64)
    for s in range(n_symbols):
        vals = probs[truth_idx == s, s]
        counts[s] = vals.size
        if vals.size:
            means[s] = vals.mean()
            variances[s] = vals.var(ddof=1) if vals.size > 1 else 0.0
    return means, variances, counts


def weighted_posterior_mean(means, counts) -> float:
    """Average of the per-symbol means weighted by their pilot share."""
    counts = np.asarray(counts)
    total = counts.sum()
    present = counts > 0
    return float(np.sum(counts[present] / total * np.asarray(means)[present]))


def _carry(new: np.ndarray, old, counts: np.ndarray) -> tuple:
    return tuple(float(n) if c > 0 else float(o) for n, o, c in zip(new, old, counts))


def _blend(new: np.ndarray, old, counts: np.ndarray, beta: float) -> tuple:
    return tuple(beta * float(n) + (1 - beta) * float(o) if c > 0 else float(o)
                 for n, o, c in zip(new, old, counts))


def _update_counts(counts: np.ndarray, old) -> tuple:
    return tuple(int(c) if c > 0 else int(o) for c, o in zip(counts, old))


def posterior_step(state: SoftStats, probs, truth_idx):
    means, variances, counts = symbol_moments(probs, truth_idx, state.n_symbols)
    mu = weighted_posterior_mean(means, counts)
    if not state.initialized:
        return unconditional("posterior", state.lam), replace(
            state, means=_carry(means, state.means, counts), variances=_carry(variances, state.variances, counts),
            counts=_update_counts(counts, state.counts), initialized=True, statistic=mu, margin=-math.inf)
    margin = state.lam - mu
    if mu < state.lam:
        return True, replace(state, statistic=mu, margin=margin)
    return False, replace(state, means=_blend(means, state.means, counts, state.beta),
                          variances=_carry(variances, state.variances, counts),
                          counts=_update_counts(counts, state.counts), statistic=mu, margin=margin)


def pooled_variance(var_a: float, n_a: int, var_b: float, n_b: int) -> float:
    return ((n_a - 1) * var_a + (n_b - 1) * var_b) / (n_a + n_b - 2)


def hotelling_symbol_stat(mean_a: float, var_a: float, n_a: int, mean_b: float, var_b: float, n_b: int) -> float:
    """Two-sample t-squared for one symbol; zero if either sample has < 2 points."""
    if n_a < 2 or n_b < 2:
        return 0.0
    pooled = max(pooled_variance(var_a, n_a, var_b, n_b), VARIANCE_FLOOR)
    return n_a * n_b / (n_a + n_b) * (mean_a - mean_b) ** 2 / pooled


def hotelling_statistic(state: SoftStats, means, variances, counts) -> float:
    total = int(np.sum(counts))
    stat = 0.0
    for s in range(state.n_symbols):
        t_s = hotelling_symbol_stat(means[s], variances[s], int(counts[s]),
                                    state.means[s], state.variances[s], int(state.counts[s]))
        stat += counts[s] / total * t_s
    return float(stat)


def hotelling_step(state: SoftStats, probs, truth_idx):
    means, variances, counts = symbol_moments(probs, truth_idx, state.n_symbols)
    if not state.initialized:
        return unconditional("hotelling", state.lam), replace(
            state, means=_carry(means, state.means, counts), variances=_carry(variances, state.variances, counts),
            counts=_update_counts(counts, state.counts), initialized=True, statistic=0.0, margin=-math.inf)
    stat = hotelling_statistic(state, means, variances, counts)
    margin = stat - state.lam
    if stat > state.lam:
        return True, replace(state, statistic=stat, margin=margin)
    return False, replace(state, means=_blend(means, state.means, counts, state.beta),
                          variances=_blend(variances, state.variances, counts, state.beta),
                          counts=_update_counts(counts, state.counts), statistic=stat, margin=margin)


@dataclass(frozen=True)
class Evidence:
    """What one detector sees for one block and one module group.

    ``probs`` (n, |S|) and ``truth_idx`` (n,) pool the group's pilot slots
    over its users; ``decisions`` are the matching hard symbols and
    ``truth`` the pilot symbols; ``y`` is the whole received block.
    """

    probs: np.ndarray
    truth_idx: np.ndarray
    decisions: np.ndarray
    truth: np.ndarray
    y: np.ndarray


DETECTOR_KINDS = ("ddm", "pht", "posterior", "hotelling")
DEFAULT_THRESHOLDS = {"ddm": 3.0, "pht": 50.0, "posterior": 0.8, "hotelling": 5.0}


@dataclass
class DriftDetector:
    """Mutable wrapper pairing a detector kind with its state."""

    kind: str
    lam: float | None = None
    beta: float = 0.2
    delta: float = 0.05
    n_symbols: int = 2
    state: object = field(init=False)

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector {self.kind!r}; expected one of {DETECTOR_KINDS}")
        if self.lam is None:
            self.lam = DEFAULT_THRESHOLDS[self.kind]
        self.reset()

    def reset(self) -> None:
        if self.kind == "ddm":
            self.state = DdmState(self.lam, self.beta)
        elif self.kind == "pht":
            self.state = PhtState(self.lam, self.beta, self.delta)
        else:
            self.state = SoftStats(self.lam, self.beta, self.n_symbols)

    def step(self, ev: Evidence) -> bool:
        if self.kind == "ddm":
            fired, self.state = ddm_step(self.state, ev.decisions, ev.truth)
        elif self.kind == "pht":
            fired, self.state = pht_step(self.state, ev.y)
        elif self.kind == "posterior":
            fired, self.state = posterior_step(self.state, ev.probs, ev.truth_idx)
        else:
            fired, self.state = hotelling_step(self.state, ev.probs, ev.truth_idx)
        return fired

    @property
    def statistic(self) -> float:
        return self.state.statistic

    @property
    def margin(self) -> float:
        return self.state.margin


EVENT_FIELDS = ("block", "detector", "statistic", "threshold", "decision")


def write_event_log(path, events) -> None:
    """CSV with one row per (block, detector) evaluation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_FIELDS)
        for e in events:
            w.writerow([e["block"], e["detector"], repr(float(e["statistic"])), repr(float(e["threshold"])),
                        int(e["decision"])])
