"""Soft-output deep receivers sharing one interface.

Every receiver maps a block of channel outputs to per-slot, per-user
posteriors over the constellation and can retrain a subset of its modules
on pilots.  Modules are keyed by :class:`ModuleId`; receivers group modules
into retrainable units (one per user for DeepSIC, a single unit otherwise).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .channel import BPSK, Constellation, TransmissionBlock


class ModuleId(NamedTuple):
    user: int
    iteration: int


@dataclass
class SoftPosterior:
    """Posteriors of shape (B, K, |S|).

    ``iterations`` holds the per-iteration posteriors of iterative receivers;
    ``decisions`` holds sequence-detector hard decisions (symbol indices) when
    they differ from the per-slot argmax.
    """

    probs: np.ndarray
    iterations: list | None = None
    decisions: np.ndarray | None = None

    def __post_init__(self):
        if self.probs.ndim != 3:
            raise ValueError(f"posterior must be (B, K, |S|), got {self.probs.shape}")

    def user(self, k: int) -> np.ndarray:
        """Posteriors of user ``k`` (1-based), shape (B, |S|)."""
        return self.probs[:, k - 1, :]

    def head(self, n: int) -> "SoftPosterior":
        return SoftPosterior(
            self.probs[:n],
            None if self.iterations is None else [p[:n] for p in self.iterations],
            None if self.decisions is None else self.decisions[:n],
        )


def hard_decide(posterior, constellation: Constellation = BPSK) -> np.ndarray:
    """MAP symbol per slot and user; ties go to the lowest constellation index."""
    probs = posterior.probs if isinstance(posterior, SoftPosterior) else np.asarray(posterior)
    return constellation.array[np.argmax(probs, axis=-1)]


def decisions(posterior: SoftPosterior, constellation: Constellation = BPSK) -> np.ndarray:
    """Hard symbols, preferring sequence decisions when the receiver made them."""
    if posterior.decisions is not None:
        return constellation.array[posterior.decisions]
    return hard_decide(posterior, constellation)


@dataclass
class TrainingConfig:
    epochs: int = 50
    lr: float = nn.DEFAULT_LR
    batch_size: int = nn.DEFAULT_BATCH
    seed: int = 0


class Receiver:
    """Common machinery: module bookkeeping, snapshots and checkpoints."""

    name = "receiver"
    modules: dict

    def __init__(self, constellation: Constellation = BPSK):
        self.constellation = constellation

    @property
    def groups(self) -> list[int]:
        return [1]

    def modules_of(self, group: int) -> list[ModuleId]:
        return list(self.modules)

    def group_users(self, group: int) -> list[int]:
        """Users (1-based) whose posteriors the group is judged by."""
        return list(range(1, self.n_users + 1))

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    def module_param_counts(self) -> dict:
        return {m: p.n_params for m, p in self.modules.items()}

    def group_param_count(self, group: int) -> int:
        return sum(self.modules[m].n_params for m in self.modules_of(group))

    @property
    def n_params(self) -> int:
        return sum(self.module_param_counts().values())

    def snapshot(self) -> dict:
        return {m: p.to_bytes() for m, p in self.modules.items()}

    def save(self, directory) -> None:
        """One flat parameter file per module, named by (user, iteration)."""
        os.makedirs(directory, exist_ok=True)
        for m, p in self.modules.items():
            nn.save_mlp(p, os.path.join(directory, f"module_u{m.user}_q{m.iteration}.txt"))

    def load(self, directory) -> None:
        for m in self.modules:
            self.modules[m] = nn.load_mlp(os.path.join(directory, f"module_u{m.user}_q{m.iteration}.txt"))

    def _labels(self, symbols: np.ndarray) -> np.ndarray:
        return self.constellation.index_of(symbols)

    def detect(self, y: np.ndarray) -> SoftPosterior:
        raise NotImplementedError

    def retrain(self, groups, block: TransmissionBlock, hp: TrainingConfig) -> None:
        raise NotImplementedError


class DeepSIC(Receiver):
    """Unfolded soft interference cancellation with one MLP per (user, iteration).

    Iteration 1 modules see only ``y``; module (k, q>1) sees ``y`` and the
    previous-iteration soft estimates of every other user (|S|-1 free
    probabilities each).
    """

    name = "deepsic"

    def __init__(self, n_users: int, n_antennas: int, n_iterations: int = 3,
                 hidden=(nn.DEFAULT_HIDDEN,), constellation: Constellation = BPSK,
                 seed=0, init: str = "he"):
        super().__init__(constellation)
        self.n_users, self.n_antennas, self.n_iterations = n_users, n_antennas, n_iterations
        rng = np.random.default_rng(seed)
        self.modules = {}
        for q in range(1, n_iterations + 1):
            for k in range(1, n_users + 1):
                d_in = self._input_dim(q)
                self.modules[ModuleId(k, q)] = nn.init_mlp([d_in, *hidden], 1, constellation.size, rng, init)

    def _input_dim(self, q: int) -> int:
        if q == 1:
            return self.n_antennas
        return self.n_antennas + (self.n_users - 1) * (self.constellation.size - 1)

    @property
    def groups(self) -> list[int]:
        return list(range(1, self.n_users + 1))

    def modules_of(self, group: int) -> list[ModuleId]:
        return [ModuleId(group, q) for q in range(1, self.n_iterations + 1)]

    def group_users(self, group: int) -> list[int]:
        return [group]

    def _features(self, y: np.ndarray, prev: np.ndarray | None, k: int) -> np.ndarray:
        if prev is None:
            return y
        others = [j for j in range(self.n_users) if j != k - 1]
        return np.concatenate([y, prev[:, others, 1:].reshape(len(y), -1)], axis=1)

    def _iteration(self, y, prev, q) -> np.ndarray:
        out = np.empty((len(y), self.n_users, self.constellation.size))
        for k in range(1, self.n_users + 1):
            out[:, k - 1, :] = nn.predict_proba(self.modules[ModuleId(k, q)], self._features(y, prev, k))[:, 0, :]
        return out

    def detect(self, y) -> SoftPosterior:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.n_antennas:
            raise ValueError(f"outputs have {y.shape[1]} antennas, receiver expects {self.n_antennas}")
        prev, history = None, []
        for q in range(1, self.n_iterations + 1):
            prev = self._iteration(y, prev, q)
            history.append(prev)
        return SoftPosterior(prev, history)

    def retrain(self, groups, block: TransmissionBlock, hp: TrainingConfig) -> None:
        """Sequential per-module training, iteration by iteration.

        Modules of users outside ``groups`` keep their parameters; their
        current outputs still feed the next iteration's features.
        """
        users = sorted(set(groups))
        if not users:
            return
        y = np.asarray(block.pilots_rx, dtype=float)
        labels = self._labels(block.pilots_tx)
        prev = None
        for q in range(1, self.n_iterations + 1):
            mids = [ModuleId(k, q) for k in users]
            data = [nn.LabeledSet(self._features(y, prev, k), labels[:, k - 1], self.constellation.size)
                    for k in users]
            trained = nn.train_many([self.modules[m] for m in mids], data, hp.epochs, hp.lr, hp.batch_size,
                                    seeds=[[hp.seed, k, q] for k in users])
            self.modules.update(zip(mids, trained))
            if q < self.n_iterations:
                prev = self._iteration(y, prev, q)


class FullyConnected(Receiver):
    """Monolithic MLP with a shared trunk and one softmax head per user."""

    name = "fc"

    def __init__(self, n_users: int, n_antennas: int, hidden=(nn.DEFAULT_HIDDEN,),
                 constellation: Constellation = BPSK, seed=0, init: str = "he"):
        super().__init__(constellation)
        self.n_users, self.n_antennas = n_users, n_antennas
        self.modules = {ModuleId(1, 1): nn.init_mlp([n_antennas, *hidden], n_users, constellation.size,
                                                    np.random.default_rng(seed), init)}

    def detect(self, y) -> SoftPosterior:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.n_antennas:
            raise ValueError(f"outputs have {y.shape[1]} antennas, receiver expects {self.n_antennas}")
        return SoftPosterior(nn.predict_proba(self.modules[ModuleId(1, 1)], y))

    def retrain(self, groups, block: TransmissionBlock, hp: TrainingConfig) -> None:
        if not list(groups):
            return
        m = ModuleId(1, 1)
        data = nn.LabeledSet(block.pilots_rx, self._labels(block.pilots_tx), self.constellation.size)
        self.modules[m] = nn.train(self.modules[m], data, hp.epochs, hp.lr, hp.batch_size, seed=[hp.seed, 1, 1])


def state_digits(n_symbols: int, memory: int) -> np.ndarray:
    """``digits[l, n]``: constellation index of symbol s_{i-l} in trellis state n.

    States encode (s_i, s_{i-1}, ..., s_{i-L+1}) with the newest symbol as the
    least significant base-|S| digit.
    """
    n = np.arange(n_symbols ** memory)
    return np.stack([(n // n_symbols ** l) % n_symbols for l in range(memory)])


def state_labels(symbol_idx: np.ndarray, n_symbols: int, memory: int) -> np.ndarray:
    """Trellis state index at each time i >= L-1 for a sequence of symbol indices."""
    symbol_idx = np.asarray(symbol_idx)
    count = len(symbol_idx) - memory + 1
    out = np.zeros(count, dtype=np.int64)
    for l in range(memory):
        out += symbol_idx[memory - 1 - l: memory - 1 - l + count] * n_symbols ** l
    return out


def isi_state_means(taps, constellation: Constellation = BPSK) -> np.ndarray:
    """Noiseless output of every trellis state for an FIR channel."""
    taps = np.asarray(taps, dtype=float)
    digits = state_digits(constellation.size, len(taps))
    return (constellation.array[digits] * taps[:, None]).sum(axis=0)


def viterbi_decode(loglik: np.ndarray, n_symbols: int, memory: int):
    """Viterbi over the |S|^L trellis from per-state log-likelihoods (B, |S|^L).

    Row ``i`` scores the state ending at time ``i``; rows before ``L-1`` are
    ignored since they involve the zero channel memory.  Returns
    ``(symbol_indices, probs)`` where ``probs[j]`` comes from normalizing the
    forward path metrics at time ``min(j + L - 1, B - 1)`` and marginalizing
    over the position of ``s_j`` in the state.
    """
    loglik = np.asarray(loglik, dtype=float)
    n_states = n_symbols ** memory
    B = len(loglik)
    if loglik.shape != (B, n_states):
        raise ValueError(f"loglik must be (B, {n_states}), got {loglik.shape}")
    if B < memory:
        raise ValueError(f"block of {B} samples is shorter than channel memory {memory}")
    n_prefix = n_states // n_symbols
    start = memory - 1
    metrics = np.full((B, n_states), -np.inf)
    back = np.zeros((B, n_prefix), dtype=np.int64)
    metrics[start] = loglik[start]
    for i in range(start + 1, B):
        prev = metrics[i - 1].reshape(n_symbols, n_prefix)  # [oldest symbol, remaining digits]
        back[i] = np.argmax(prev, axis=0)
        metrics[i] = np.repeat(prev[back[i], np.arange(n_prefix)], n_symbols) + loglik[i]

    path = np.zeros(B, dtype=np.int64)
    state = int(np.argmax(metrics[B - 1]))
    for i in range(B - 1, start, -1):
        path[i] = state % n_symbols
        state = state // n_symbols + n_prefix * int(back[i][state // n_symbols])
    for l in range(memory):
        path[start - l] = (state // n_symbols ** l) % n_symbols

    valid = metrics[start:]
    weights = np.exp(valid - valid.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    digits = state_digits(n_symbols, memory)
    onehot = (digits[:, :, None] == np.arange(n_symbols)).astype(float)  # (L, states, S)
    marg = np.einsum("tn,lns->tls", weights, onehot)
    j = np.arange(B)
    tau = np.minimum(j + memory - 1, B - 1)
    probs = marg[tau - start, tau - j]
    return path, probs


class ViterbiNet(Receiver):
    """Viterbi equalizer whose state likelihoods come from a learned classifier.

    The MLP maps a scalar output ``y_i`` to a posterior over the |S|^L states;
    dividing by the uniform state prior gives the likelihood proxy.
    """

    name = "viterbinet"

    def __init__(self, memory: int = 4, hidden=(nn.DEFAULT_HIDDEN,), constellation: Constellation = BPSK,
                 seed=0, init: str = "he"):
        super().__init__(constellation)
        self.memory = memory
        self.n_users = 1
        n_states = constellation.size ** memory
        self.modules = {ModuleId(1, 1): nn.init_mlp([1, *hidden], 1, n_states, np.random.default_rng(seed), init)}

    @property
    def n_states(self) -> int:
        return self.constellation.size ** self.memory

    def state_loglik(self, y: np.ndarray) -> np.ndarray:
        post = nn.predict_proba(self.modules[ModuleId(1, 1)], y.reshape(-1, 1))[:, 0, :]
        return np.log(np.clip(post, nn.PROB_FLOOR, 1.0)) + np.log(self.n_states)

    def detect(self, y) -> SoftPosterior:
        y = np.asarray(y, dtype=float)
        if y.ndim == 2:
            if y.shape[1] != 1:
                raise ValueError("ViterbiNet expects scalar channel outputs")
            y = y[:, 0]
        path, probs = viterbi_decode(self.state_loglik(y), self.constellation.size, self.memory)
        return SoftPosterior(probs[:, None, :], None, path[:, None])

    def retrain(self, groups, block: TransmissionBlock, hp: TrainingConfig) -> None:
        if not list(groups):
            return
        y = np.asarray(block.pilots_rx, dtype=float).reshape(-1)
        idx = self._labels(np.asarray(block.pilots_tx).reshape(-1))
        if len(y) < self.memory:
            raise ValueError("fewer pilots than channel memory")
        labels = state_labels(idx, self.constellation.size, self.memory)
        data = nn.LabeledSet(y[self.memory - 1:, None], labels, self.n_states)
        m = ModuleId(1, 1)
        self.modules[m] = nn.train(self.modules[m], data, hp.epochs, hp.lr, hp.batch_size, seed=[hp.seed, 1, 1])


def retrain_modules(receiver: Receiver, groups, block: TransmissionBlock, hp: TrainingConfig) -> Receiver:
    """Retrain the modules of ``groups`` on the block's pilots, in place."""
    groups = list(groups)
    if not groups:
        raise ValueError("retrain plan is empty")
    if block.n_pilots < 1:
        raise ValueError("no pilots to train on")
    unknown = set(groups) - set(receiver.groups)
    if unknown:
        raise ValueError(f"unknown module groups {sorted(unknown)}")
    receiver.retrain(groups, block, hp)
    return receiver


def build_receiver(name: str, n_users: int = 4, n_antennas: int = 4, memory: int = 4,
                   n_iterations: int = 3, hidden=(nn.DEFAULT_HIDDEN,), seed=0, init: str = "he") -> Receiver:
    if name == "deepsic":
        return DeepSIC(n_users, n_antennas, n_iterations, hidden, seed=seed, init=init)
    if name == "fc":
        return FullyConnected(n_users, n_antennas, hidden, seed=seed, init=init)
    if name == "viterbinet":
        return ViterbiNet(memory, hidden, seed=seed, init=init)
    raise ValueError(f"unknown receiver {name!r}")
