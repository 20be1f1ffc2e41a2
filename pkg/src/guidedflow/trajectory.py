"""Flat trajectory representation shared by every other module.

A trajectory of ``H`` state-action pairs is stored as a single vector laid out as
``[s(0), a(0), s(1), a(1), ..., s(H-1), a(H-1)]``.  The interleaved order keeps
each ``(s(k), a(k))`` pair contiguous, so per-step gradient blocks can be written
directly into the flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TrajectoryLayout:
    """Shape of a flat trajectory: state size ``n``, action size ``m``, horizon ``H``."""

    state_dim: int
    action_dim: int
    horizon: int

    def __post_init__(self) -> None:
        for name in ("state_dim", "action_dim", "horizon"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def block(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def size(self) -> int:
        return self.block * self.horizon

    def _check(self, k: int) -> None:
        if not 0 <= k < self.horizon:
            raise IndexError(f"time index {k} out of range for horizon {self.horizon}")

    def state_slice(self, k: int) -> slice:
        self._check(k)
        start = k * self.block
        return slice(start, start + self.state_dim)

    def action_slice(self, k: int) -> slice:
        self._check(k)
        start = k * self.block + self.state_dim
        return slice(start, start + self.action_dim)

    def state_indices(self) -> np.ndarray:
        """Flat positions of all state entries, shape (H, n)."""
        base = np.arange(self.horizon)[:, None] * self.block
        return base + np.arange(self.state_dim)[None, :]

    def action_indices(self) -> np.ndarray:
        """Flat positions of all action entries, shape (H, m)."""
        base = np.arange(self.horizon)[:, None] * self.block + self.state_dim
        return base + np.arange(self.action_dim)[None, :]

    def split(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(states (H, n), actions (H, m))`` views of a flat vector."""
        blocks = np.asarray(values).reshape(self.horizon, self.block)
        return blocks[:, : self.state_dim], blocks[:, self.state_dim :]

    def join(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(self.horizon, self.state_dim)
        actions = np.asarray(actions, dtype=float).reshape(self.horizon, self.action_dim)
        return np.concatenate([states, actions], axis=1).reshape(-1)

    def to_dict(self) -> dict:
        return {"state_dim": self.state_dim, "action_dim": self.action_dim, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryLayout":
        return cls(int(d["state_dim"]), int(d["action_dim"]), int(d["horizon"]))


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FlatTrajectory:
    layout: TrajectoryLayout
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.values)
        if arr.size != self.layout.size:
            raise ValueError(f"expected {self.layout.size} values for {self.layout}, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trajectory values must be finite")
        object.__setattr__(self, "values", arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlatTrajectory):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def state_at(self, k: int) -> np.ndarray:
        return self.values[self.layout.state_slice(k)]

    def action_at(self, k: int) -> np.ndarray:
        return self.values[self.layout.action_slice(k)]

    @property
    def states(self) -> np.ndarray:
        return self.layout.split(self.values)[0]

    @property
    def actions(self) -> np.ndarray:
        return self.layout.split(self.values)[1]

    def replace(self, values: np.ndarray) -> "FlatTrajectory":
        return FlatTrajectory(self.layout, values)

    @classmethod
    def from_blocks(cls, layout: TrajectoryLayout, states, actions) -> "FlatTrajectory":
        return cls(layout, layout.join(states, actions))


def state_at(tau: FlatTrajectory, k: int) -> np.ndarray:
    return tau.state_at(k)


def action_at(tau: FlatTrajectory, k: int) -> np.ndarray:
    return tau.action_at(k)


@dataclass(frozen=True, eq=False)
class ConditioningMask:
    """Pins a set of flat positions to fixed values.

    Built with :meth:`initial_state` the frozen positions are exactly the
    ``s(0)`` block.  ``indices`` may be empty, in which case the mask is the
    identity.
    """

    indices: np.ndarray
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1)
        vals = _frozen_array(self.values)
        if idx.size != vals.size:
            raise ValueError("mask indices and values differ in length")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def initial_state(cls, layout: TrajectoryLayout, s0) -> "ConditioningMask":
        s0 = np.asarray(s0, dtype=float).reshape(-1)
        if s0.size != layout.state_dim:
            raise ValueError(f"s0 has {s0.size} entries, layout expects {layout.state_dim}")
        return cls(np.arange(layout.state_dim), s0)

    @classmethod
    def empty(cls) -> "ConditioningMask":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def free(self, size: int) -> np.ndarray:
        """Boolean vector, True at positions the mask does not pin."""
        keep = np.ones(size, dtype=bool)
        keep[self.indices] = False
        return keep

    def pin(self, values: np.ndarray) -> np.ndarray:
        """Array-level mask application (returns a new array)."""
        out = np.array(values, dtype=float, copy=True)
        out[..., self.indices] = self.values
        return out

    def zero(self, velocity: np.ndarray) -> np.ndarray:
        """Zero the frozen components of a velocity-like array (returns a new array)."""
        out = np.array(velocity, dtype=float, copy=True)
        out[..., self.indices] = 0.0
        return out


def apply_mask(tau: FlatTrajectory, mask: ConditioningMask) -> FlatTrajectory:
    if mask.indices.size and mask.indices.max() >= tau.layout.size:
        raise ValueError("mask references positions outside the trajectory")
    return tau.replace(mask.pin(tau.values))
