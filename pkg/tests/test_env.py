import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynmatch.env import (
    ActionSpaceTooLarge,
    ProblemInstance,
    StateSpace,
    build_horizontal_reward,
    build_vertical_reward,
    capacity_penalty,
    demand_penalty,
    enumerate_feasible_actions,
    is_feasible,
    matching_reward,
    sample_demand,
    step,
)


def test_horizontal_reward_examples():
    np.testing.assert_array_equal(build_horizontal_reward(10, [[0, 3], [5, 2]]), [[10, 7], [5, 8]])
    np.testing.assert_array_equal(build_horizontal_reward(0, np.zeros((2, 3))), np.zeros((2, 3)))
    np.testing.assert_array_equal(build_horizontal_reward(5, [[5]]), [[0]])
    with pytest.raises(ValueError):
        build_horizontal_reward(1, [1, 2])


def test_vertical_reward_examples():
    np.testing.assert_array_equal(build_vertical_reward([1, 2], [3, 4]), [[4, 5], [5, 6]])
    np.testing.assert_array_equal(build_vertical_reward([0], [0]), [[0]])
    np.testing.assert_array_equal(build_vertical_reward([2], [1, 5]), [[3, 7]])


def test_instance_validation():
    ok = dict(capacities=[1], demand_pmfs=[[1.0]], reward=[[1.0]])
    ProblemInstance(**ok)
    with pytest.raises(ValueError):
        ProblemInstance(**{**ok, "demand_pmfs": [[0.5, 0.4]]})
    with pytest.raises(ValueError):
        ProblemInstance(**{**ok, "capacities": [-1]})
    with pytest.raises(ValueError):
        ProblemInstance(**{**ok, "gamma": 1.0})
    with pytest.raises(ValueError):
        ProblemInstance(**{**ok, "reward": [[1.0, 2.0]]})


def test_instance_defaults(worked):
    assert worked.k1 == worked.k2 == 20.0
    # supports {0..4} and {0..8}, capacities up to 6
    assert worked.N_d == 2 * 8 + 6
    assert (worked.m, worked.n) == (2, 2)


def test_sample_demand_examples(rng):
    inst = ProblemInstance(capacities=[1], demand_pmfs=[[1.0]], reward=[[1.0]])
    assert all(sample_demand(inst, rng)[0] == 0 for _ in range(50))
    inst = ProblemInstance(capacities=[1], demand_pmfs=[[0.2] * 5 + [0] * 4], reward=[[1.0]])
    draws = {int(sample_demand(inst, rng)[0]) for _ in range(500)}
    assert draws == {0, 1, 2, 3, 4}
    a = [sample_demand(inst, np.random.default_rng(3)) for _ in range(1)]
    b = [sample_demand(inst, np.random.default_rng(3)) for _ in range(1)]
    np.testing.assert_array_equal(a, b)


def test_sample_demand_frequencies(worked):
    rng = np.random.default_rng(0)
    draws = np.array([sample_demand(worked, rng) for _ in range(20000)])
    freq = np.bincount(draws[:, 1], minlength=9) / len(draws)
    np.testing.assert_allclose(freq, worked.demand_pmfs[1], atol=0.015)


def test_reward_and_penalty_examples():
    R = [[10, 7], [5, 8]]
    assert matching_reward(R, [[6, 0], [0, 5]]) == 100
    assert matching_reward(R, np.zeros((2, 2))) == 0
    assert matching_reward(np.ones((2, 2)), [[2, 3], [4, 5]]) == 14
    with pytest.raises(ValueError):
        matching_reward(R, [[1, 2]])
    assert demand_penalty([8, 7], [[4, 0], [2, 5]], 10) == 0
    assert demand_penalty([5, 5], [[7, 0], [0, 4]], 10) == 20
    assert demand_penalty([0, 0], [[1, 0], [0, 1]], 1) == 2
    assert capacity_penalty([[6, 0], [0, 5]], [6, 5], 10) == 0
    assert capacity_penalty([[8, 0], [0, 5]], [6, 5], 10) == 20
    assert capacity_penalty([[3]], [0], 2) == 6


def test_is_feasible_examples():
    assert is_feasible([8, 7], [[4, 0], [2, 5]], [6, 5])
    assert not is_feasible([0, 0], [[1, 0], [0, 0]], [6, 5])
    assert is_feasible([0, 0], np.zeros((2, 2), int), [0, 0])


def test_enumeration_examples():
    assert len(enumerate_feasible_actions([1, 1], [1, 1])) == 7
    acts = enumerate_feasible_actions([0, 0, 0], [3, 2])
    assert len(acts) == 1 and not acts.any()
    np.testing.assert_array_equal(enumerate_feasible_actions([2], [1]).ravel(), [0, 1])
    with pytest.raises(ActionSpaceTooLarge):
        enumerate_feasible_actions([5, 5], [5, 5], cap=10)


def test_enumeration_set_equals_zero_penalty_set():
    x, c = [2, 1], [1, 2]
    acts = {a.tobytes() for a in enumerate_feasible_actions(x, c)}
    assert len(acts) == len(enumerate_feasible_actions(x, c))
    brute = set()
    for cells in itertools.product(range(4), repeat=4):
        Q = np.array(cells, dtype=np.int64).reshape(2, 2)
        if demand_penalty(x, Q, 1) == 0 and capacity_penalty(Q, c, 1) == 0:
            brute.add(Q.tobytes())
    assert acts == brute


def test_enumeration_is_lexicographic():
    acts = enumerate_feasible_actions([2, 2], [2, 2]).reshape(-1, 4)
    keys = [tuple(a) for a in acts]
    assert keys == sorted(keys)


def test_step_examples(worked):
    rng = np.random.default_rng(0)
    out = step(worked, [8, 7], [[4, 0], [2, 5]], rng, demand=[3, 2])
    np.testing.assert_array_equal(out.next_state, [7, 2])
    one = ProblemInstance(capacities=[3], demand_pmfs=[[1.0]], reward=[[1.0]], N_d=9)
    np.testing.assert_array_equal(step(one, [5], [[0]], rng, demand=[0]).next_state, [5])
    np.testing.assert_array_equal(step(one, [9], [[0]], rng, demand=[9]).next_state, [9])


def test_step_truncates_infeasible_rows(worked):
    out = step(worked, [1, 0], [[3, 0], [0, 0]], np.random.default_rng(0), demand=[0, 0])
    np.testing.assert_array_equal(out.next_state, [0, 0])
    assert out.demand_penalty == 2 * worked.k1
    assert out.net_reward == out.raw_reward - out.demand_penalty - out.capacity_penalty


def test_step_replay_is_bit_identical(worked):
    a = step(worked, [8, 7], [[4, 0], [2, 5]], np.random.default_rng(11))
    b = step(worked, [8, 7], [[4, 0], [2, 5]], np.random.default_rng(11))
    assert a.net_reward == b.net_reward
    np.testing.assert_array_equal(a.next_state, b.next_state)
    np.testing.assert_array_equal(a.demand_drawn, b.demand_drawn)


@settings(max_examples=150, deadline=None)
@given(
    x=st.lists(st.integers(0, 22), min_size=2, max_size=2),
    q=st.lists(st.integers(0, 12), min_size=4, max_size=4),
    seed=st.integers(0, 2**31),
)
def test_step_properties(worked, x, q, seed):
    Q = np.array(q).reshape(2, 2)
    out = step(worked, x, Q, np.random.default_rng(seed))
    assert np.all(out.next_state >= 0) and np.all(out.next_state <= worked.N_d)
    assert out.net_reward == out.raw_reward - out.demand_penalty - out.capacity_penalty
    assert out.net_reward <= out.raw_reward
    feasible = is_feasible(x, Q, worked.capacities)
    assert (out.net_reward == out.raw_reward) == feasible


@settings(max_examples=100, deadline=None)
@given(
    a=st.lists(st.integers(0, 9), min_size=6, max_size=6),
    b=st.lists(st.integers(0, 9), min_size=6, max_size=6),
)
def test_matching_reward_is_linear(a, b):
    R = np.arange(6.0).reshape(2, 3) - 2.5
    A, B = np.array(a).reshape(2, 3), np.array(b).reshape(2, 3)
    assert matching_reward(R, A + B) == pytest.approx(matching_reward(R, A) + matching_reward(R, B))


def test_state_space_roundtrip():
    space = StateSpace(3, 4)
    states = space.all_states()
    assert len(states) == 125
    assert [space.index(s) for s in states] == list(range(125))
    np.testing.assert_array_equal(space.state(space.index([1, 4, 2])), [1, 4, 2])
