"""Exact solvers over the truncated state space.

All value tables are numpy arrays shaped ``(N_d + 1,) * m`` so that
``V[tuple(x)]`` is the value of state ``x``.

The continuation value of a matching depends only on its row totals, so
every Bellman backup is organised around *row-total groups*: for each
feasible row-total vector the best single-period reward (and the
lexicographically smallest matrix attaining it) is computed once with the
transportation solver, and the backup maximizes over groups.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Union

import numpy as np

from .env import (
    ProblemInstance,
    StateSpace,
    capacity_penalty,
    demand_penalty,
    matching_reward,
)
from .transport import solve_transport

DEFAULT_STATE_CAP = 250_000
VI_TOL = 1e-8


class StateSpaceTooLarge(RuntimeError):
    pass


def _check_cap(instance: ProblemInstance, cap: int) -> None:
    if instance.n_states > cap:
        raise StateSpaceTooLarge(
            f"{instance.n_states} truncated states exceed the cap of {cap}"
        )


def solve_single_period(x, c, R) -> np.ndarray:
    """Best one-period matching; lexicographically smallest among optima."""
    return solve_transport(x, c, R)


@dataclass(frozen=True)
class RowTotalGroups:
    """Best reward per feasible row-total vector, sorted by representative matrix."""

    row_totals: np.ndarray  # (g, m)
    best_reward: np.ndarray  # (g,)
    actions: np.ndarray  # (g, m, n) lexicographically smallest optimal matrix

    def __len__(self) -> int:
        return len(self.best_reward)


def row_total_groups(instance: ProblemInstance) -> RowTotalGroups:
    c = instance.capacities
    total_cap = int(c.sum())
    hi = min(instance.N_d, total_cap)
    found = []
    for qbar in itertools.product(range(hi + 1), repeat=instance.m):
        if sum(qbar) > total_cap:
            continue
        Q = solve_transport(qbar, c, instance.reward, exact_rows=True)
        if Q is None:
            continue
        found.append((tuple(Q.ravel()), qbar, matching_reward(instance.reward, Q), Q))
    found.sort(key=lambda t: t[0])
    return RowTotalGroups(
        row_totals=np.array([f[1] for f in found], dtype=np.int64).reshape(-1, instance.m),
        best_reward=np.array([f[2] for f in found], dtype=float),
        actions=np.array([f[3] for f in found], dtype=np.int64).reshape(
            -1, instance.m, instance.n
        ),
    )


class TransitionModel:
    """Demand-driven transition kernel of the truncated chain.

    Next-state probabilities depend on (state, action) only through the
    post-decision state ``y = x - min(row_totals, x)``; arrivals are added
    and clamped at ``N_d``, so mass beyond the limit lands on the boundary.
    """

    def __init__(self, instance: ProblemInstance):
        self.instance = instance
        self.space = StateSpace(instance.m, instance.N_d)
        N = instance.N_d
        self._marginals = []
        for p in instance.demand_pmfs:
            K = np.zeros((N + 1, N + 1))
            for y in range(N + 1):
                for k, pk in enumerate(p):
                    if pk > 0:
                        K[y, min(y + k, N)] += pk
            self._marginals.append(K)

    def post_decision(self, x, Q) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        return x - np.minimum(np.asarray(Q).sum(axis=1), x)

    def distribution(self, x, Q) -> np.ndarray:
        """Dense next-state distribution shaped like the state grid."""
        y = self.post_decision(x, Q)
        out = np.ones(())
        for i, K in enumerate(self._marginals):
            out = np.multiply.outer(out, K[y[i]])
        return out

    def sparse_row(self, x, Q):
        """(next-state indices, probabilities) with zero-mass states dropped."""
        dist = self.distribution(x, Q).ravel()
        idx = np.flatnonzero(dist)
        return idx, dist[idx]

    def expect(self, V: np.ndarray) -> np.ndarray:
        """W(y) = E[V(clamp(y + d))] for every post-decision state y."""
        W = V
        for axis, K in enumerate(self._marginals):
            W = np.moveaxis(np.tensordot(K, W, axes=([1], [axis])), 0, axis)
        return W


def build_transition_model(
    instance: ProblemInstance, cap: int = DEFAULT_STATE_CAP
) -> TransitionModel:
    _check_cap(instance, cap)
    return TransitionModel(instance)


def _bellman_max(groups: RowTotalGroups, W: np.ndarray, gamma: float, N: int):
    """max over groups of reward + gamma * W(x - qbar); ties go to the earlier group."""
    best = np.full(W.shape, -np.inf)
    arg = np.full(W.shape, -1, dtype=np.int64)
    for g in range(len(groups)):
        qbar = groups.row_totals[g]
        dst = tuple(slice(int(q), N + 1) for q in qbar)
        src = tuple(slice(0, N + 1 - int(q)) for q in qbar)
        cand = groups.best_reward[g] + gamma * W[src]
        cur = best[dst]
        unset = np.isneginf(cur)
        tol = 1e-9 * np.maximum(1.0, np.abs(np.where(unset, 0.0, cur)))
        better = unset | (cand > cur + tol)
        if better.any():
            cur[better] = cand[better]
            arg[dst][better] = g
    return best, arg


@dataclass
class ValueTable:
    """Finite-horizon values and decisions; ``values[t]`` for t = 1..T+1."""

    instance: ProblemInstance
    groups: RowTotalGroups
    values: dict
    decisions: dict

    def value(self, t: int, x) -> float:
        return float(self.values[t][tuple(int(v) for v in x)])

    def action(self, t: int, x) -> np.ndarray:
        g = self.decisions[t][tuple(int(v) for v in x)]
        return self.groups.actions[g].copy()


def backward_induction(
    instance: ProblemInstance, cap: int = DEFAULT_STATE_CAP
) -> ValueTable:
    if instance.horizon_T < 1:
        raise ValueError("backward induction needs a finite horizon_T >= 1")
    model = build_transition_model(instance, cap)
    groups = row_total_groups(instance)
    N, T = instance.N_d, instance.horizon_T
    V = np.zeros(model.space.shape)
    values = {T + 1: V}
    decisions = {}
    for t in range(T, 0, -1):
        W = model.expect(values[t + 1])
        values[t], decisions[t] = _bellman_max(groups, W, instance.gamma, N)
    return ValueTable(instance, groups, values, decisions)


@dataclass
class QTableExact:
    """Optimal stationary action values, represented through the expected
    continuation ``W`` so any (state, action) pair can be queried."""

    instance: ProblemInstance
    groups: RowTotalGroups
    V: np.ndarray
    W: np.ndarray
    policy_groups: np.ndarray
    residual: float
    iterations: int

    def q_value(self, x, Q) -> float:
        x = np.asarray(x, dtype=np.int64)
        Q = np.asarray(Q, dtype=np.int64)
        inst = self.instance
        net = (
            matching_reward(inst.reward, Q)
            - demand_penalty(x, Q, inst.k1)
            - capacity_penalty(Q, inst.capacities, inst.k2)
        )
        y = x - np.minimum(Q.sum(axis=1), x)
        return net + inst.gamma * float(self.W[tuple(y)])

    def q_row(self, x, actions: np.ndarray) -> np.ndarray:
        """Q* for a stack of feasible actions (k, m, n) at state x."""
        x = np.asarray(x, dtype=np.int64)
        rewards = np.einsum("kij,ij->k", actions, self.instance.reward)
        y = x[None, :] - np.minimum(actions.sum(axis=2), x[None, :])
        return rewards + self.instance.gamma * self.W[tuple(y.T)]

    def value(self, x) -> float:
        return float(self.V[tuple(int(v) for v in x)])

    def greedy_action(self, x) -> np.ndarray:
        return self.groups.actions[self.policy_groups[tuple(int(v) for v in x)]].copy()

    def average_value(self) -> float:
        return float(self.V.mean())


def stationary_value_iteration(
    instance: ProblemInstance,
    tol: float = VI_TOL,
    cap: int = DEFAULT_STATE_CAP,
    max_iter: int = 100_000,
) -> QTableExact:
    """Iterate the Bellman optimality operator until successive Q iterates
    differ by less than ``tol`` in max norm."""
    model = build_transition_model(instance, cap)
    groups = row_total_groups(instance)
    N, gamma = instance.N_d, instance.gamma
    V = np.zeros(model.space.shape)
    W = model.expect(V)
    for it in range(1, max_iter + 1):
        V_new, arg = _bellman_max(groups, W, gamma, N)
        W_new = model.expect(V_new)
        # Q_k(s, a) = r(a) + gamma * W_k(y(s, a)) and every y is reachable
        residual = gamma * float(np.max(np.abs(W_new - W)))
        V, W = V_new, W_new
        if residual < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol {tol} (residual {residual})")
    V, arg = _bellman_max(groups, W, gamma, N)
    return QTableExact(instance, groups, V, W, arg, residual, it)


PolicyLike = Union[Callable[[np.ndarray], np.ndarray], Mapping]


def _policy_fn(policy: PolicyLike) -> Callable[[np.ndarray], np.ndarray]:
    if callable(policy):
        return policy
    return lambda x: policy[tuple(int(v) for v in x)]


def evaluate_policy(
    instance: ProblemInstance,
    policy: PolicyLike,
    tol: float = VI_TOL,
    cap: int = DEFAULT_STATE_CAP,
) -> np.ndarray:
    """Value of a deterministic policy on every truncated state.

    Finite-horizon instances are evaluated exactly over ``horizon_T`` periods
    (period-1 values are returned); otherwise the discounted fixed point is
    approximated to within ``tol``. Infeasible decisions are charged their
    penalties and executed truncated, as in the simulator.
    """
    model = build_transition_model(instance, cap)
    fn = _policy_fn(policy)
    states = model.space.all_states()
    net = np.empty(len(states))
    post = np.empty_like(states)
    for k, x in enumerate(states):
        Q = np.asarray(fn(x), dtype=np.int64)
        net[k] = (
            matching_reward(instance.reward, Q)
            - demand_penalty(x, Q, instance.k1)
            - capacity_penalty(Q, instance.capacities, instance.k2)
        )
        post[k] = x - np.minimum(Q.sum(axis=1), x)
    shape = model.space.shape
    net = net.reshape(shape)
    post_idx = tuple(post.T)
    gamma = instance.gamma
    V = np.zeros(shape)
    if instance.horizon_T >= 1:
        for _ in range(instance.horizon_T):
            V = net + gamma * model.expect(V)[post_idx].reshape(shape)
        return V
    if gamma == 0.0:
        return net.copy()
    stop = tol * (1.0 - gamma) / gamma
    while True:
        V_new = net + gamma * model.expect(V)[post_idx].reshape(shape)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta < stop:
            return V


def single_period_policy(instance: ProblemInstance) -> Callable[[np.ndarray], np.ndarray]:
    """Myopic policy: solve the one-period transportation problem at each state."""
    c = instance.capacities
    R = instance.reward

    @lru_cache(maxsize=None)
    def _solve(key):
        return solve_single_period(key, c, R)

    return lambda x: _solve(tuple(int(v) for v in x)).copy()


def oracle_dump(instance: ProblemInstance, tol: float = VI_TOL) -> dict:
    """Exact values and decisions for every truncated state, JSON-ready."""
    space = StateSpace(instance.m, instance.N_d)
    states = space.all_states()
    keys = [tuple(int(v) for v in x) for x in states]
    periods = []
    if instance.horizon_T >= 1:
        table = backward_induction(instance)
        for t in range(1, instance.horizon_T + 1):
            periods.append(
                {
                    "period": t,
                    "values": [float(table.values[t][k]) for k in keys],
                    "actions": [table.action(t, k).tolist() for k in keys],
                }
            )
    else:
        qt = stationary_value_iteration(instance, tol=tol)
        periods.append(
            {
                "period": "stationary",
                "values": [float(qt.V[k]) for k in keys],
                "actions": [qt.greedy_action(k).tolist() for k in keys],
            }
        )
    return {"states": [list(k) for k in keys], "periods": periods}
