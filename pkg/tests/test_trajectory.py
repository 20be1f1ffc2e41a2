import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from guidedflow.trajectory import (ConditioningMask, FlatTrajectory, TrajectoryLayout, action_at,
                                   apply_mask, state_at)


def traj(n, m, H, values):
    return FlatTrajectory(TrajectoryLayout(n, m, H), np.asarray(values, dtype=float))


def test_state_at_examples():
    assert state_at(traj(1, 1, 2, [1, 2, 3, 4]), 1).tolist() == [3]
    assert state_at(traj(2, 2, 2, [0, 0, 9, 9, 5, 6, 9, 9]), 1).tolist() == [5, 6]
    t = traj(2, 1, 2, [1, 2, 3, 4, 5, 6])
    assert state_at(t, 0).tolist() == [1, 2]


def test_action_at_examples():
    t = traj(1, 1, 2, [1, 2, 3, 4])
    assert action_at(t, 0).tolist() == [2]
    assert action_at(t, 1).tolist() == [4]
    assert action_at(traj(2, 1, 1, [7, 7, 3]), 0).tolist() == [3]


@pytest.mark.parametrize("k", [-1, 2, 5])
def test_index_out_of_range(k):
    t = traj(1, 1, 2, [1, 2, 3, 4])
    with pytest.raises(IndexError):
        state_at(t, k)
    with pytest.raises(IndexError):
        action_at(t, k)


def test_layout_validation():
    with pytest.raises(ValueError):
        TrajectoryLayout(0, 1, 1)
    with pytest.raises(ValueError):
        traj(1, 1, 2, [1, 2, 3])
    with pytest.raises(ValueError):
        traj(1, 1, 1, [1, np.nan])


def test_values_are_immutable():
    t = traj(1, 1, 1, [1, 2])
    with pytest.raises(ValueError):
        t.values[0] = 5


def test_apply_mask_examples():
    L = TrajectoryLayout(4, 2, 3)
    t = FlatTrajectory(L, np.arange(1.0, L.size + 1))
    zeroed = apply_mask(t, ConditioningMask.initial_state(L, np.zeros(4)))
    assert np.all(zeroed.values[:4] == 0) and np.array_equal(zeroed.values[4:], t.values[4:])
    assert apply_mask(t, ConditioningMask.empty()) == t


layouts = st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5)).map(lambda x: TrajectoryLayout(*x))


@st.composite
def trajectories(draw):
    L = draw(layouts)
    vals = draw(arrays(np.float64, L.size, elements=st.floats(-1e6, 1e6)))
    return FlatTrajectory(L, vals)


@given(trajectories())
def test_blocks_tile_the_vector(t):
    L = t.layout
    rebuilt = np.concatenate([np.concatenate([state_at(t, k), action_at(t, k)]) for k in range(L.horizon)])
    assert rebuilt.tobytes() == t.values.tobytes()
    assert L.size == (L.state_dim + L.action_dim) * L.horizon
    idx = np.sort(np.concatenate([L.state_indices().ravel(), L.action_indices().ravel()]))
    assert np.array_equal(idx, np.arange(L.size))


@given(trajectories(), st.data())
@settings(max_examples=50)
def test_mask_idempotent_and_commutes(t, data):
    L = t.layout
    s0 = data.draw(arrays(np.float64, L.state_dim, elements=st.floats(-10, 10)))
    mask = ConditioningMask.initial_state(L, s0)
    once = apply_mask(t, mask)
    assert apply_mask(once, mask) == once
    assert np.array_equal(once.values[: L.state_dim], s0)
    # an update that touches only free entries commutes with the mask
    delta = data.draw(arrays(np.float64, L.size, elements=st.floats(-10, 10))) * mask.free(L.size)
    a = apply_mask(t.replace(t.values + delta), mask)
    b = once.replace(once.values + delta)
    assert a == b
