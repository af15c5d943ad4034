"""FIFO transition buffer with contiguous same-episode segment sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world_model import Segment


class InsufficientDataError(Exception):
    """Raised when the buffer holds no valid H-step segment yet."""


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    episode_id: int


@dataclass
class BufferConfig:
    capacity: int = 1_000_000
    horizon: int = 3

    def validate(self) -> None:
        if self.capacity < self.horizon + 1:
            raise ValueError("capacity must be at least horizon + 1")


class ReplayBuffer:
    """Ring storage of transitions, evicting oldest-first at capacity."""

    def __init__(self, capacity: int, d_s: int, d_a: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.d_s = d_s
        self.d_a = d_a
        self._states = np.empty((capacity, d_s))
        self._actions = np.empty((capacity, d_a))
        self._rewards = np.empty(capacity)
        self._next_states = np.empty((capacity, d_s))
        self._dones = np.zeros(capacity, dtype=bool)
        self._episode_ids = np.full(capacity, -1, dtype=np.int64)
        self._next_logical = 0  # total transitions ever pushed

    def __len__(self) -> int:
        return min(self._next_logical, self.capacity)

    @property
    def oldest_logical(self) -> int:
        return max(0, self._next_logical - self.capacity)

    def push(self, t: Transition) -> None:
        s = np.asarray(t.s, dtype=np.float64)
        a = np.asarray(t.a, dtype=np.float64)
        s_next = np.asarray(t.s_next, dtype=np.float64)
        if not (
            np.all(np.isfinite(s))
            and np.all(np.isfinite(a))
            and np.isfinite(t.r)
            and np.all(np.isfinite(s_next))
        ):
            raise ValueError("transition contains non-finite values")
        slot = self._next_logical % self.capacity
        self._states[slot] = s
        self._actions[slot] = a
        self._rewards[slot] = t.r
        self._next_states[slot] = s_next
        self._dones[slot] = t.done
        self._episode_ids[slot] = t.episode_id
        self._next_logical += 1

    def _ordered_indices(self) -> np.ndarray:
        """Physical slots in chronological order."""
        n = len(self)
        start = self.oldest_logical % self.capacity
        return (start + np.arange(n)) % self.capacity

    def stored_states(self) -> np.ndarray:
        """All currently held states in chronological order."""
        return self._states[self._ordered_indices()]

    def valid_segment_starts(self, horizon: int) -> np.ndarray:
        """Chronological positions that begin a same-episode H-run.

        A valid segment is H consecutive transitions with one episode id and
        no terminal flag before its final transition.
        """
        n = len(self)
        if n < horizon:
            return np.empty(0, dtype=np.int64)
        idx = self._ordered_indices()
        eids = self._episode_ids[idx]
        dones = self._dones[idx]
        valid = np.ones(n - horizon + 1, dtype=bool)
        for off in range(1, horizon):
            valid &= eids[off : off + n - horizon + 1] == eids[: n - horizon + 1]
        for off in range(horizon - 1):
            valid &= ~dones[off : off + n - horizon + 1]
        return np.nonzero(valid)[0]

    def segment_at(self, position: int, horizon: int) -> Segment:
        idx = self._ordered_indices()[position : position + horizon]
        return Segment(
            states=self._states[idx].copy(),
            actions=self._actions[idx].copy(),
            rewards=self._rewards[idx].copy(),
            next_states=self._next_states[idx].copy(),
        )

    def sample_segments(
        self, horizon: int, count: int, rng: np.random.Generator
    ) -> list[Segment]:
        """Draw ``count`` segments uniformly over valid start positions."""
        starts = self.valid_segment_starts(horizon)
        if starts.size == 0:
            raise InsufficientDataError(
                f"no contiguous {horizon}-step segment available yet"
            )
        picks = rng.integers(0, starts.size, size=count)
        return [self.segment_at(int(starts[p]), horizon) for p in picks]

    # ------------------------------------------------------------------
    # snapshot for resumable runs

    def state_arrays(self) -> dict[str, np.ndarray]:
        n = len(self)
        idx = self._ordered_indices()
        return {
            "buffer.states": self._states[idx],
            "buffer.actions": self._actions[idx],
            "buffer.rewards": self._rewards[idx],
            "buffer.next_states": self._next_states[idx],
            "buffer.dones": self._dones[idx],
            "buffer.episode_ids": self._episode_ids[idx],
            "buffer.next_logical": np.array([self._next_logical], dtype=np.int64),
        }

    @classmethod
    def from_state_arrays(
        cls, arrays: dict[str, np.ndarray], capacity: int
    ) -> "ReplayBuffer":
        states = arrays["buffer.states"]
        buf = cls(capacity, states.shape[1], arrays["buffer.actions"].shape[1])
        n = states.shape[0]
        next_logical = int(arrays["buffer.next_logical"][0])
        first_logical = next_logical - n
        slots = (first_logical + np.arange(n)) % capacity
        buf._states[slots] = states
        buf._actions[slots] = arrays["buffer.actions"]
        buf._rewards[slots] = arrays["buffer.rewards"]
        buf._next_states[slots] = arrays["buffer.next_states"]
        buf._dones[slots] = arrays["buffer.dones"]
        buf._episode_ids[slots] = arrays["buffer.episode_ids"]
        buf._next_logical = next_logical
        return buf
