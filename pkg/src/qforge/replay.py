"""Experience storage: a uniform single-transition ring and a sequence ring.

Both buffers preallocate flat arrays indexed by ring position; when full,
the oldest slot is overwritten (FIFO). Sampling is uniform with
replacement and never mutates contents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NotReadyError, ShapeError

SNAPSHOT_MAGIC = b"QFRB"
SNAPSHOT_VERSION = 1


@dataclass
class Transition:
    state: np.ndarray  # [F,H,W]
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class UniformReplayBuffer:
    """FIFO ring of single-step transitions with uniform sampling."""

    def __init__(self, capacity: int, state_shape: tuple, dtype=np.float64):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.state_shape = tuple(state_shape)
        self.states = np.zeros((capacity, *state_shape), dtype=dtype)
        self.next_states = np.zeros((capacity, *state_shape), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=np.float64)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, t: Transition):
        if t.state.shape != self.state_shape or t.next_state.shape != self.state_shape:
            raise ShapeError(
                f"transition state shape {t.state.shape} != buffer {self.state_shape}"
            )
        i = self._next
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = 1.0 if t.done else 0.0
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def entries(self):
        """Stored transitions in insertion order (oldest first)."""
        start = self._next if self._size == self.capacity else 0
        for j in range(self._size):
            i = (start + j) % self.capacity
            yield Transition(
                self.states[i],
                int(self.actions[i]),
                float(self.rewards[i]),
                self.next_states[i],
                bool(self.dones[i]),
            )

    def sample(self, k: int, rng: np.random.Generator) -> dict:
        """k uniform draws with replacement, batched along a new axis."""
        if self._size < k:
            raise NotReadyError(f"buffer holds {self._size} < batch {k} transitions")
        idx = rng.integers(0, self._size, size=k)
        return {
            "states": self.states[idx].astype(np.float64),
            "actions": self.actions[idx].copy(),
            "rewards": self.rewards[idx].copy(),
            "next_states": self.next_states[idx].astype(np.float64),
            "dones": self.dones[idx].copy(),
        }

    # -- optional snapshot file -------------------------------------------------
    #
    # Layout (little-endian): magic "QFRB", uint32 version, uint64 header
    # length, JSON header {capacity, state_shape, dtype, size}, then the
    # stored records in ring order (oldest first): for each record the state
    # array, next-state array (buffer dtype), then action int64, reward
    # float64, done float64.

    def save(self, path):
        header = {
            "capacity": self.capacity,
            "state_shape": list(self.state_shape),
            "dtype": np.dtype(self.states.dtype).str,
            "size": self._size,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<I", SNAPSHOT_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for t in self.entries():
                fh.write(np.ascontiguousarray(t.state).tobytes())
                fh.write(np.ascontiguousarray(t.next_state).tobytes())
                fh.write(struct.pack("<qdd", t.action, t.reward, 1.0 if t.done else 0.0))

    @staticmethod
    def load(path) -> "UniformReplayBuffer":
        with open(path, "rb") as fh:
            if fh.read(4) != SNAPSHOT_MAGIC:
                raise ConfigError(f"bad replay snapshot magic in {path}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != SNAPSHOT_VERSION:
                raise ConfigError(f"unsupported replay snapshot version {version}")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            dtype = np.dtype(header["dtype"])
            shape = tuple(header["state_shape"])
            buf = UniformReplayBuffer(header["capacity"], shape, dtype=dtype)
            n = int(np.prod(shape))
            for _ in range(header["size"]):
                s = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
                s2 = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
                a, r, d = struct.unpack("<qdd", fh.read(24))
                buf.add(Transition(s.copy(), int(a), r, s2.copy(), bool(d)))
        return buf


class SequenceReplayBuffer:
    """Ring of fixed-length sequences; capacity counts sequences."""

    def __init__(
        self,
        capacity: int,
        state_shape: tuple,
        batch_size: int,
        seq_len: int,
        dtype=np.float64,
    ):
        if capacity < batch_size or batch_size < 1:
            raise ConfigError(
                f"need capacity >= batch >= 1, got capacity={capacity}, batch={batch_size}"
            )
        if seq_len < 1:
            raise ConfigError(f"sequence length must be >= 1, got {seq_len}")
        self.capacity = int(capacity)
        self.state_shape = tuple(state_shape)
        self.batch_size = int(batch_size)
        self.seq_len = int(seq_len)
        self.states = np.zeros((capacity, seq_len, *state_shape), dtype=dtype)
        self.next_states = np.zeros((capacity, seq_len, *state_shape), dtype=dtype)
        self.actions = np.zeros((capacity, seq_len, 1), dtype=np.int64)
        self.rewards = np.zeros((capacity, seq_len, 1), dtype=np.float64)
        self.dones = np.zeros((capacity, seq_len, 1), dtype=np.float64)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, states, actions, rewards, next_states, dones):
        states = np.asarray(states)
        actions = np.asarray(actions).reshape(-1, 1)
        rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
        next_states = np.asarray(next_states)
        dones = np.asarray(dones, dtype=np.float64).reshape(-1, 1)
        L = self.seq_len
        if not (
            states.shape == (L, *self.state_shape)
            and next_states.shape == (L, *self.state_shape)
            and actions.shape == (L, 1)
            and rewards.shape == (L, 1)
            and dones.shape == (L, 1)
        ):
            raise ShapeError(
                "sequence fields must share leading extent "
                f"{L} with state shape {self.state_shape}"
            )
        if not np.isin(dones, (0.0, 1.0)).all():
            raise ShapeError("dones must contain only 0 or 1")
        i = self._next
        self.states[i] = states
        self.next_states[i] = next_states
        self.actions[i] = actions
        self.rewards[i] = rewards
        self.dones[i] = dones
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator) -> dict:
        """Batch of batch_size sequences, uniform with replacement."""
        if self._size < self.batch_size:
            raise NotReadyError(
                f"buffer holds {self._size} < batch {self.batch_size} sequences"
            )
        idx = rng.integers(0, self._size, size=self.batch_size)
        return {
            "states": self.states[idx].astype(np.float64),
            "actions": self.actions[idx].copy(),
            "rewards": self.rewards[idx].copy(),
            "next_states": self.next_states[idx].astype(np.float64),
            "dones": self.dones[idx].copy(),
        }
