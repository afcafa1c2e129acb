"""Bounded transportation problem by successive shortest paths.

Arc costs are lexicographic tuples ``(saturation, -reward, lex_weight)`` so a
single min-cost-flow run returns, among all reward-optimal integer matchings,
the lexicographically smallest one in row-major order. Rewards are converted
exactly to integers first: float round-off in path costs can otherwise create
spurious negative cycles and stall the shortest-path search.
"""

from __future__ import annotations

from collections import deque
from fractions import Fraction
from math import lcm
from typing import Optional

import numpy as np

_ZERO = (0, 0, 0)


def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _neg(a):
    return (-a[0], -a[1], -a[2])


class _Graph:
    def __init__(self, n_nodes: int):
        self.head = [[] for _ in range(n_nodes)]
        # parallel arc arrays; arc e and e ^ 1 are a residual pair
        self.to: list = []
        self.cap: list = []
        self.cost: list = []

    def add_arc(self, u: int, v: int, cap: int, cost) -> int:
        e = len(self.to)
        self.to += [v, u]
        self.cap += [cap, 0]
        self.cost += [cost, _neg(cost)]
        self.head[u].append(e)
        self.head[v].append(e + 1)
        return e

    def shortest_path(self, s: int):
        n = len(self.head)
        dist = [None] * n
        prev = [-1] * n
        inq = [False] * n
        dist[s] = _ZERO
        q = deque([s])
        inq[s] = True
        while q:
            u = q.popleft()
            inq[u] = False
            du = dist[u]
            for e in self.head[u]:
                if self.cap[e] <= 0:
                    continue
                v = self.to[e]
                nd = _add(du, self.cost[e])
                if dist[v] is None or nd < dist[v]:
                    dist[v] = nd
                    prev[v] = e
                    if not inq[v]:
                        inq[v] = True
                        q.append(v)
        return dist, prev


def _exact_integer_rewards(R: np.ndarray):
    """Scale finite float rewards by the lcm of their (power-of-two) denominators."""
    fr = [Fraction(float(v)) for v in R.ravel()]
    scale = lcm(*(f.denominator for f in fr)) if fr else 1
    return [[int(f * scale) for f in fr[i * R.shape[1] : (i + 1) * R.shape[1]]] for i in range(R.shape[0])]


def solve_transport(rows, cols, R, exact_rows: bool = False) -> Optional[np.ndarray]:
    """Maximize ``sum(R * Q)`` over integer Q >= 0 with row sums <= rows, column sums <= cols.

    With ``exact_rows`` the row sums must equal ``rows``; returns None when that
    is impossible. Ties are broken toward the lexicographically smallest Q.
    """
    rows = [int(v) for v in rows]
    cols = [int(v) for v in cols]
    R = np.asarray(R, dtype=float)
    m, n = len(rows), len(cols)
    if R.shape != (m, n):
        raise ValueError(f"reward shape {R.shape} != ({m}, {n})")
    if min(rows + cols, default=0) < 0:
        raise ValueError("row and column bounds must be nonnegative")
    if not np.all(np.isfinite(R)):
        raise ValueError("rewards must be finite")
    W = _exact_integer_rewards(R)
    ub = max(min(max(rows, default=0), max(cols, default=0)), 0)
    base = ub + 1
    S, T = 0, m + n + 1
    g = _Graph(m + n + 2)
    prim = -1 if exact_rows else 0
    for i in range(m):
        if rows[i] > 0:
            g.add_arc(S, 1 + i, rows[i], (prim, 0, 0))
    cell_arc = {}
    for i in range(m):
        for j in range(n):
            k = i * n + j
            hi = min(rows[i], cols[j])
            if hi <= 0:
                continue
            w = base ** (m * n - 1 - k)
            cell_arc[(i, j)] = g.add_arc(1 + i, 1 + m + j, hi, (0, -W[i][j], w))
    for j in range(n):
        if cols[j] > 0:
            g.add_arc(1 + m + j, T, cols[j], _ZERO)

    while True:
        dist, prev = g.shortest_path(S)
        if dist[T] is None or not dist[T] < _ZERO:
            break
        push = None
        v = T
        while v != S:
            e = prev[v]
            push = g.cap[e] if push is None else min(push, g.cap[e])
            v = g.to[e ^ 1]
        v = T
        while v != S:
            e = prev[v]
            g.cap[e] -= push
            g.cap[e ^ 1] += push
            v = g.to[e ^ 1]

    Q = np.zeros((m, n), dtype=np.int64)
    for (i, j), e in cell_arc.items():
        Q[i, j] = g.cap[e ^ 1]
    if exact_rows and not np.array_equal(Q.sum(axis=1), np.asarray(rows)):
        return None
    return Q
