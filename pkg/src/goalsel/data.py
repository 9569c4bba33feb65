"""Storage, sampling, filtering, and serialization of goal-reaching demonstrations.

A trajectory is goal-reaching when its final reward is 1 and every earlier
reward is 0. Datasets are append-then-freeze: once training starts nothing
mutates them, so concurrent readers and samplers (each with its own rng) are
safe.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"IRD1"
DATASET_VERSION = 1
STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    """Malformed dataset file: bad magic, bad version, or truncated payload."""


def _frozen_f32(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One goal-reaching demonstration.

    ``states`` has one more row than ``actions``/``rewards``; the final reward
    is 1 and all earlier rewards are 0 (single terminal success).
    """

    states: np.ndarray   # (L+1, obs_dim) float32
    actions: np.ndarray  # (L, act_dim) float32
    rewards: np.ndarray  # (L,) float32, entries in {0, 1}

    def __post_init__(self):
        states = _frozen_f32(self.states, "states")
        actions = _frozen_f32(self.actions, "actions")
        rewards = _frozen_f32(self.rewards, "rewards")
        if states.ndim != 2 or actions.ndim != 2 or rewards.ndim != 1:
            raise ValueError("states/actions must be 2-D and rewards 1-D")
        if len(states) != len(actions) + 1 or len(rewards) != len(actions):
            raise ValueError(
                f"length mismatch: {len(states)} states, {len(actions)} actions, "
                f"{len(rewards)} rewards"
            )
        if len(actions) < 1:
            raise ValueError("trajectory must contain at least one transition")
        if not np.all(np.isin(rewards, (0.0, 1.0))):
            raise ValueError("rewards must be 0 or 1")
        if rewards[-1] != 1.0 or np.any(rewards[:-1] != 0.0):
            raise ValueError(
                "not goal-reaching: expected final reward 1 and all earlier rewards 0"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def length(self) -> int:
        """Number of transitions (completion time in steps)."""
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and (floored) standard deviation for states and actions."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def norm_state(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def denorm_state(self, s):
        return np.asarray(s, dtype=np.float64) * self.state_std + self.state_mean

    def norm_action(self, a):
        return (np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_std

    def denorm_action(self, a):
        return np.asarray(a, dtype=np.float64) * self.action_std + self.action_mean


@dataclass(frozen=True)
class SequenceWindow:
    """A contiguous T-step slice of one stored trajectory.

    The goal field (last state) is ``states[-1]``; ``is_terminal`` is true iff
    the window ends at the trajectory's final state. ``traj_index``/``start``
    record where the slice came from so tests can verify it verbatim.
    """

    states: np.ndarray   # (T+1, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    rewards: np.ndarray  # (T,)
    is_terminal: bool
    traj_index: int
    start: int

    @property
    def goal(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class WindowBatch:
    """Stacked windows in float64, ready for the model boundary."""

    states: np.ndarray       # (B, T+1, obs_dim)
    actions: np.ndarray      # (B, T, act_dim)
    rewards: np.ndarray      # (B, T)
    is_terminal: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return self.states.shape[0]


class TrajectoryDataset:
    """A collection of goal-reaching trajectories with shared dimensions.

    Normalization statistics and window-sampling indices are computed lazily
    and invalidated by ``append``.
    """

    def __init__(self, obs_dim: int, act_dim: int, env_id: str = "",
                 trajectories=()):
        if obs_dim < 1 or act_dim < 1:
            raise ValueError("obs_dim and act_dim must be positive")
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.env_id = str(env_id)
        self.trajectories: list[Trajectory] = []
        self._norm: NormStats | None = None
        self._window_index: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._stacked_states: np.ndarray | None = None
        for traj in trajectories:
            self.append(traj)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def append(self, traj: Trajectory) -> "TrajectoryDataset":
        """Add a trajectory; its invariants were checked at construction."""
        if not isinstance(traj, Trajectory):
            raise TypeError("expected a Trajectory")
        if traj.obs_dim != self.obs_dim or traj.act_dim != self.act_dim:
            raise ValueError(
                f"dimension mismatch: trajectory is ({traj.obs_dim}, {traj.act_dim}), "
                f"dataset is ({self.obs_dim}, {self.act_dim})"
            )
        self.trajectories.append(traj)
        self._norm = None
        self._window_index.clear()
        self._stacked_states = None
        return self

    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.length for t in self.trajectories], dtype=np.int64)

    def compute_norm_stats(self) -> NormStats:
        """Mean/std over all states and all actions, std floored at STD_FLOOR."""
        if not self.trajectories:
            raise ValueError("cannot compute normalization statistics of an empty dataset")
        states = np.concatenate([t.states for t in self.trajectories]).astype(np.float64)
        actions = np.concatenate([t.actions for t in self.trajectories]).astype(np.float64)
        return NormStats(
            state_mean=states.mean(axis=0),
            state_std=np.maximum(states.std(axis=0), STD_FLOOR),
            action_mean=actions.mean(axis=0),
            action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
        )

    @property
    def norm_stats(self) -> NormStats:
        if self._norm is None:
            self._norm = self.compute_norm_stats()
        return self._norm

    def stacked_states(self) -> np.ndarray:
        """All states of all trajectories as one (N, obs_dim) float64 array."""
        if self._stacked_states is None:
            if not self.trajectories:
                raise ValueError("empty dataset")
            self._stacked_states = np.concatenate(
                [t.states for t in self.trajectories]
            ).astype(np.float64)
        return self._stacked_states

    def _windows(self, t_window: int) -> tuple[np.ndarray, np.ndarray]:
        """(eligible trajectory indices, cumulative window counts) for length T."""
        if t_window < 1:
            raise ValueError("window length must be positive")
        cached = self._window_index.get(t_window)
        if cached is not None:
            return cached
        idx = []
        counts = []
        for i, traj in enumerate(self.trajectories):
            n = traj.length - t_window + 1
            if n > 0:
                idx.append(i)
                counts.append(n)
        if not idx:
            raise ValueError(f"no trajectory admits a window of length {t_window}")
        entry = (np.array(idx, dtype=np.int64), np.cumsum(counts, dtype=np.int64))
        self._window_index[t_window] = entry
        return entry

    def _locate(self, t_window: int, flat: int) -> tuple[int, int]:
        idx, cumsum = self._windows(t_window)
        j = int(np.searchsorted(cumsum, flat, side="right"))
        prev = int(cumsum[j - 1]) if j > 0 else 0
        return int(idx[j]), int(flat - prev)

    def sample_window(self, t_window: int, rng: np.random.Generator) -> SequenceWindow:
        """Draw one window uniformly over all valid (trajectory, start) pairs.

        Trajectories shorter than ``t_window`` are excluded; each eligible
        trajectory is chosen proportional to its number of valid start indices.
        """
        _, cumsum = self._windows(t_window)
        flat = int(rng.integers(cumsum[-1]))
        ti, start = self._locate(t_window, flat)
        traj = self.trajectories[ti]
        return SequenceWindow(
            states=traj.states[start:start + t_window + 1],
            actions=traj.actions[start:start + t_window],
            rewards=traj.rewards[start:start + t_window],
            is_terminal=(start + t_window == traj.length),
            traj_index=ti,
            start=start,
        )

    def sample_window_batch(self, t_window: int, batch_size: int,
                            rng: np.random.Generator) -> WindowBatch:
        """Stack ``batch_size`` independent window draws as float64 arrays."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        _, cumsum = self._windows(t_window)
        flats = rng.integers(cumsum[-1], size=batch_size)
        states = np.empty((batch_size, t_window + 1, self.obs_dim), dtype=np.float64)
        actions = np.empty((batch_size, t_window, self.act_dim), dtype=np.float64)
        rewards = np.empty((batch_size, t_window), dtype=np.float64)
        terminal = np.empty(batch_size, dtype=bool)
        for b, flat in enumerate(flats):
            ti, start = self._locate(t_window, int(flat))
            traj = self.trajectories[ti]
            states[b] = traj.states[start:start + t_window + 1]
            actions[b] = traj.actions[start:start + t_window]
            rewards[b] = traj.rewards[start:start + t_window]
            terminal[b] = start + t_window == traj.length
        return WindowBatch(states=states, actions=actions, rewards=rewards,
                           is_terminal=terminal)


def filter_best_fraction(dataset: TrajectoryDataset, frac: float) -> TrajectoryDataset:
    """Keep the ceil(frac * N) shortest trajectories, ties by insertion order."""
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {frac}")
    if len(dataset) == 0:
        raise ValueError("cannot filter an empty dataset")
    keep = math.ceil(frac * len(dataset))
    order = np.argsort(dataset.lengths, kind="stable")[:keep]
    chosen = sorted(int(i) for i in order)
    return TrajectoryDataset(
        dataset.obs_dim,
        dataset.act_dim,
        env_id=dataset.env_id,
        trajectories=[dataset.trajectories[i] for i in chosen],
    )


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save(dataset: TrajectoryDataset, path) -> None:
    """Write the little-endian binary format (bit-exact round trip)."""
    env_bytes = dataset.env_id.encode("utf-8")
    parts = [
        DATASET_MAGIC,
        _pack_u32(DATASET_VERSION),
        _pack_u32(dataset.obs_dim),
        _pack_u32(dataset.act_dim),
        _pack_u32(len(env_bytes)),
        env_bytes,
        _pack_u32(len(dataset)),
    ]
    for traj in dataset:
        parts.append(_pack_u32(traj.length))
        parts.append(traj.states.astype("<f4").tobytes())
        parts.append(traj.actions.astype("<f4").tobytes())
        parts.append(traj.rewards.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DatasetFormatError(
                f"truncated file: wanted {n} bytes at offset {self.off}, "
                f"have {len(self.blob) - self.off}"
            )
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)


def load(path) -> TrajectoryDataset:
    """Read a dataset written by :func:`save`, validating magic and payload."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != DATASET_MAGIC:
        raise DatasetFormatError("bad magic bytes: not a dataset file")
    version = r.u32()
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    obs_dim = r.u32()
    act_dim = r.u32()
    env_id = r.take(r.u32()).decode("utf-8")
    n_traj = r.u32()
    dataset = TrajectoryDataset(obs_dim, act_dim, env_id=env_id)
    for _ in range(n_traj):
        length = r.u32()
        states = r.f32_array((length + 1, obs_dim))
        actions = r.f32_array((length, act_dim))
        rewards = r.f32_array((length,))
        dataset.append(Trajectory(states=states, actions=actions, rewards=rewards))
    if r.off != len(r.blob):
        raise DatasetFormatError(f"{len(r.blob) - r.off} unexpected trailing bytes")
    return dataset
