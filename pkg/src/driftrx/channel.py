"""Block-fading channels: variation profiles, BPSK mapping and noisy outputs.

Two link types are modeled.  The memoryless MIMO link computes
``y_i = H^T s_i + n_i`` with ``H`` of shape (K users, N antennas).  The SISO
link is a length-L FIR filter whose memory starts at zero in every block.
Noise is calibrated per receive antenna: average received signal power over
noise power equals the requested SNR.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid channel or profile configuration."""


@dataclass(frozen=True)
class Constellation:
    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            raise ConfigError("constellation is empty")
        if len(set(pts.tolist())) != pts.size:
            raise ConfigError("constellation points must be distinct")
        if not np.isclose(np.mean(np.abs(pts) ** 2), 1.0):
            raise ConfigError("constellation must have unit average energy")

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def index_of(self, symbols) -> np.ndarray:
        """Map symbol values back to constellation indices."""
        symbols = np.asarray(symbols)
        dist = np.abs(symbols[..., None] - self.array)
        return np.argmin(dist, axis=-1)


BPSK = Constellation((1.0, -1.0))


def modulate(bits) -> np.ndarray:
    """BPSK: bit 0 -> +1, bit 1 -> -1."""
    bits = np.asarray(bits)
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise ValueError("modulate expects bits in {0, 1}")
    return 1.0 - 2.0 * bits.astype(float)


def demap(symbols) -> np.ndarray:
    """Hard BPSK demapping by sign; 0 is mapped to bit 0."""
    return (np.asarray(symbols) < 0).astype(np.int64)


PROFILE_KINDS = ("single_user_bursty", "multi_user_bursty", "smooth_drift", "static")


@dataclass(frozen=True)
class VariationProfile:
    """How channel states evolve across blocks.

    Bursty kinds rescale the rows of ``affected_users`` by ``1 -/+ jump_scale``
    (alternating dip and recovery) at each block in ``change_blocks``; user
    indices are 1-based.  ``drift_rate`` adds a sinusoidal gain component
    whose per-block change never exceeds ``drift_rate``.
    """

    kind: str = "static"
    change_blocks: tuple = ()
    jump_scale: float = 0.0
    drift_rate: float = 0.0
    affected_users: tuple = ()
    drift_period: float = 20.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConfigError(f"unknown profile kind {self.kind!r}; expected one of {PROFILE_KINDS}")
        if self.jump_scale < 0 or self.drift_rate < 0:
            raise ConfigError("jump_scale and drift_rate must be nonnegative")
        if list(self.change_blocks) != sorted(self.change_blocks):
            raise ConfigError("change_blocks must be sorted")
        if self.kind == "single_user_bursty" and len(self.affected_users) != 1:
            raise ConfigError("single_user_bursty needs exactly one affected user")
        if self.drift_period <= 0:
            raise ConfigError("drift_period must be positive")


@dataclass
class ChannelTrajectory:
    """Per-block channel states; ``states[t - 1]`` is the state of block t."""

    kind: str
    states: np.ndarray  # (T, L) for siso_taps, (T, K, N) for mimo_matrix

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.kind == "siso_taps":
            if self.states.ndim != 2 or self.states.shape[1] < 1:
                raise ConfigError("siso trajectory states must have shape (T, L) with L >= 1")
        elif self.kind == "mimo_matrix":
            if self.states.ndim != 3 or min(self.states.shape[1:]) < 1:
                raise ConfigError("mimo trajectory states must have shape (T, K, N)")
        else:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if len(self.states) < 1:
            raise ConfigError("trajectory needs at least one block")

    @property
    def block_count(self) -> int:
        return len(self.states)

    def state(self, t: int) -> np.ndarray:
        """Channel state of block ``t`` (1-based)."""
        return self.states[t - 1]

    def save(self, path) -> None:
        """Plain-text table: one line per block, index then row-major values."""
        shape = " ".join(str(s) for s in self.states.shape[1:])
        with open(path, "w") as fh:
            fh.write(f"# {self.kind} {shape}\n")
            for t, st in enumerate(self.states, start=1):
                fh.write(" ".join([str(t)] + [repr(float(v)) for v in st.ravel()]) + "\n")

    @classmethod
    def load(cls, path) -> "ChannelTrajectory":
        with open(path) as fh:
            head = fh.readline().split()
            rows = [line.split() for line in fh if line.strip()]
        kind, shape = head[1], tuple(int(v) for v in head[2:])
        states = np.array([[float(v) for v in r[1:]] for r in rows]).reshape((len(rows),) + shape)
        return cls(kind, states)


def base_mimo_channel(n_users: int, n_antennas: int) -> np.ndarray:
    """Spatially decaying coupling, H[k, n] = exp(-|k - n|)."""
    k = np.arange(n_users)[:, None]
    n = np.arange(n_antennas)[None, :]
    return np.exp(-np.abs(k - n).astype(float))


def base_siso_taps(memory: int, decay: float = 0.5) -> np.ndarray:
    return np.exp(-decay * np.arange(memory))


def _row_gains(profile: VariationProfile, n_rows: int, n_blocks: int, rng) -> np.ndarray:
    """Multiplicative gain per (block, row)."""
    gains = np.ones((n_blocks, n_rows))
    affected = [u - 1 for u in profile.affected_users] or list(range(n_rows))
    if any(u < 0 or u >= n_rows for u in affected):
        raise ConfigError(f"affected_users {profile.affected_users} outside 1..{n_rows}")
    if profile.kind == "static":
        return gains
    t = np.arange(1, n_blocks + 1)
    if profile.drift_rate > 0:
        amp = profile.drift_rate * profile.drift_period / (2 * np.pi)
        for u in affected:
            phase = rng.uniform(0, 2 * np.pi)
            gains[:, u] *= 1.0 + amp * (np.sin(2 * np.pi * t / profile.drift_period + phase) - np.sin(phase))
    if profile.kind in ("single_user_bursty", "multi_user_bursty"):
        for i, u in enumerate(affected):
            level = 1.0
            sign = -1.0 if i % 2 == 0 else 1.0
            jump = np.ones(n_blocks)
            for cb in profile.change_blocks:
                if not 1 <= cb <= n_blocks:
                    raise ConfigError(f"change block {cb} outside [1, {n_blocks}]")
                level *= 1.0 + sign * profile.jump_scale
                sign = -sign
                jump[cb - 1:] = level
            gains[:, u] *= jump
    return gains


def generate_trajectory(profile: VariationProfile, shape, n_blocks: int, seed: int = 0) -> ChannelTrajectory:
    """Channel states for ``n_blocks`` blocks under ``profile``.

    ``shape`` is ``(K, N)`` for a MIMO link or an int ``L`` for a SISO tap
    vector.  A SISO tap vector counts as a single row (user 1).
    """
    if n_blocks < 1:
        raise ConfigError("n_blocks must be >= 1")
    if profile.kind == "single_user_bursty" and not profile.affected_users:
        raise ConfigError("single_user_bursty needs affected_users")
    rng = np.random.default_rng([seed, 7])
    if np.isscalar(shape) or len(np.atleast_1d(shape)) == 1:
        memory = int(np.atleast_1d(shape)[0])
        if memory < 1:
            raise ConfigError("tap count must be >= 1")
        gains = _row_gains(profile, 1, n_blocks, rng)
        states = gains[:, :1] * base_siso_taps(memory)[None, :]
        return ChannelTrajectory("siso_taps", states)
    n_users, n_antennas = (int(v) for v in shape)
    if n_users < 1 or n_antennas < 1:
        raise ConfigError("MIMO shape needs K >= 1 and N >= 1")
    gains = _row_gains(profile, n_users, n_blocks, rng)
    states = gains[:, :, None] * base_mimo_channel(n_users, n_antennas)[None]
    return ChannelTrajectory("mimo_matrix", states)


def _noise_std(signal_power: float, snr_db: float) -> float:
    if not np.isfinite(snr_db):
        if snr_db > 0:
            return 0.0
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    return float(np.sqrt(signal_power / 10.0 ** (snr_db / 10.0)))


def mimo_noise_variance(H: np.ndarray, snr_db: float) -> float:
    """Noise variance giving the requested per-antenna SNR for unit-energy symbols."""
    H = np.asarray(H, dtype=float)
    return _noise_std(np.sum(H ** 2) / H.shape[1], snr_db) ** 2


def siso_noise_variance(taps: np.ndarray, snr_db: float) -> float:
    return _noise_std(float(np.sum(np.asarray(taps, dtype=float) ** 2)), snr_db) ** 2


def transmit_mimo(H, s_block, snr_db: float, seed=0) -> np.ndarray:
    """Outputs ``(B, N)`` for symbols ``(B, K)`` through ``y = H^T s + n``."""
    H = np.asarray(H, dtype=float)
    s_block = np.atleast_2d(np.asarray(s_block, dtype=float))
    if H.ndim != 2 or s_block.shape[1] != H.shape[0]:
        raise ValueError(f"symbols of width {s_block.shape[1]} do not match H of shape {H.shape}")
    y = s_block @ H
    std = np.sqrt(mimo_noise_variance(H, snr_db))
    if std > 0:
        y = y + std * np.random.default_rng(seed).standard_normal(y.shape)
    return y


def transmit_siso_isi(taps, s_block, snr_db: float, seed=0) -> np.ndarray:
    """``y_i = sum_l taps[l] s_{i-l} + n_i`` with zero channel memory before the block."""
    taps = np.asarray(taps, dtype=float)
    s_block = np.asarray(s_block, dtype=float)
    if taps.ndim != 1 or taps.size < 1 or s_block.ndim != 1:
        raise ValueError("taps and symbols must be 1-D and taps nonempty")
    y = np.convolve(s_block, taps)[: len(s_block)]
    std = np.sqrt(siso_noise_variance(taps, snr_db))
    if std > 0:
        y = y + std * np.random.default_rng(seed).standard_normal(y.shape)
    return y


@dataclass
class TransmissionBlock:
    """One coherence block.  Symbols are (B, K); outputs are (B, N)."""

    pilots_tx: np.ndarray
    info_tx: np.ndarray
    pilots_rx: np.ndarray
    info_rx: np.ndarray
    block_index: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.pilots_tx) < 1:
            raise ValueError("a block needs at least one pilot")

    @property
    def n_pilots(self) -> int:
        return len(self.pilots_tx)

    @property
    def rx(self) -> np.ndarray:
        return np.concatenate([self.pilots_rx, self.info_rx])


def make_block(trajectory: ChannelTrajectory, t: int, n_total: int, n_pilot: int,
               snr_db: float, seed: int, constellation: Constellation = BPSK) -> TransmissionBlock:
    """Draw i.i.d. uniform symbols for block ``t`` and pass them through the channel.

    Pilots occupy the head of the block.  Randomness depends only on
    ``(seed, t)``, so every policy in a comparison sees the same block.
    """
    if not 1 <= n_pilot < n_total:
        raise ValueError(f"need 1 <= n_pilot < n_total, got {n_pilot}, {n_total}")
    rng = np.random.default_rng([seed, t, 1])
    noise_seed = [seed, t, 2]
    state = trajectory.state(t)
    if trajectory.kind == "mimo_matrix":
        idx = rng.integers(0, constellation.size, size=(n_total, state.shape[0]))
        s = constellation.array[idx]
        y = transmit_mimo(state, s, snr_db, noise_seed)
    else:
        idx = rng.integers(0, constellation.size, size=n_total)
        s1 = constellation.array[idx]
        y = transmit_siso_isi(state, s1, snr_db, noise_seed)[:, None]
        s = s1[:, None]
    return TransmissionBlock(s[:n_pilot], s[n_pilot:], y[:n_pilot], y[n_pilot:], t)
