"""Dynamic demand/capacity matching MDP: instances, rewards, penalties, transitions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

PMF_TOL = 1e-9
DEFAULT_ACTION_CAP = 200_000


class ActionSpaceTooLarge(RuntimeError):
    """Raised when an enumeration would exceed its configured cap."""


def _as_pmf(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("demand pmf must be a non-empty 1-d vector")
    # trailing zeros carry no information
    nz = np.flatnonzero(arr > 0)
    if nz.size:
        arr = arr[: nz[-1] + 1]
    return arr


def default_truncation(demand_pmfs: Sequence[np.ndarray], capacities) -> int:
    """Truncation limit: twice the largest demand support plus the largest capacity."""
    support = max(len(_as_pmf(p)) - 1 for p in demand_pmfs)
    cap = int(np.max(capacities)) if len(capacities) else 0
    return 2 * support + cap


@dataclass(frozen=True)
class ProblemInstance:
    """Immutable description of one matching problem.

    ``horizon_T == 0`` selects the stationary (episodic) regime.
    """

    capacities: np.ndarray
    demand_pmfs: tuple
    reward: np.ndarray
    gamma: float = 0.9
    horizon_T: int = 0
    k1: Optional[float] = None
    k2: Optional[float] = None
    N_d: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        caps = np.asarray(self.capacities, dtype=np.int64)
        pmfs = tuple(_as_pmf(p) for p in self.demand_pmfs)
        R = np.asarray(self.reward, dtype=float)
        if caps.ndim != 1 or caps.size < 1:
            raise ValueError("capacities must be a non-empty vector")
        if np.any(caps < 0):
            raise ValueError("capacities must be nonnegative")
        if len(pmfs) < 1:
            raise ValueError("need at least one demand type")
        if R.shape != (len(pmfs), caps.size):
            raise ValueError(f"reward shape {R.shape} != ({len(pmfs)}, {caps.size})")
        for i, p in enumerate(pmfs):
            if np.any(p < 0) or abs(p.sum() - 1.0) > PMF_TOL:
                raise ValueError(f"demand pmf {i} is not a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon_T < 0:
            raise ValueError("horizon_T must be >= 0")
        penalty = 2.0 * max(float(R.max()), 0.0)
        k1 = penalty if self.k1 is None else float(self.k1)
        k2 = penalty if self.k2 is None else float(self.k2)
        if k1 < 0 or k2 < 0:
            raise ValueError("penalty constants must be nonnegative")
        N_d = default_truncation(pmfs, caps) if self.N_d is None else int(self.N_d)
        if N_d < 0:
            raise ValueError("N_d must be nonnegative")
        caps.setflags(write=False)
        R.setflags(write=False)
        for p in pmfs:
            p.setflags(write=False)
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "demand_pmfs", pmfs)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)
        object.__setattr__(self, "N_d", N_d)
        object.__setattr__(
            self, "_cdfs", tuple(np.cumsum(p) for p in pmfs)
        )

    @property
    def m(self) -> int:
        return len(self.demand_pmfs)

    @property
    def n(self) -> int:
        return int(self.capacities.size)

    @property
    def n_states(self) -> int:
        return (self.N_d + 1) ** self.m

    def replace(self, **changes) -> "ProblemInstance":
        fields = dict(
            capacities=self.capacities,
            demand_pmfs=self.demand_pmfs,
            reward=self.reward,
            gamma=self.gamma,
            horizon_T=self.horizon_T,
            k1=self.k1,
            k2=self.k2,
            N_d=self.N_d,
            seed=self.seed,
        )
        fields.update(changes)
        return ProblemInstance(**fields)


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    net_reward: float
    raw_reward: float
    demand_drawn: np.ndarray
    demand_penalty: float
    capacity_penalty: float


def build_horizontal_reward(prize: float, delta) -> np.ndarray:
    """r_ij = prize - delta_ij."""
    delta = np.asarray(delta, dtype=float)
    if delta.ndim != 2:
        raise ValueError("distance matrix must be 2-d")
    if np.any(delta < 0):
        raise ValueError("distances must be nonnegative")
    return float(prize) - delta


def build_vertical_reward(
    a,
    b,
    f_d: Callable[[np.ndarray], np.ndarray] = lambda v: v,
    f_s: Callable[[np.ndarray], np.ndarray] = lambda v: v,
) -> np.ndarray:
    """r_ij = f_d(a_i) + f_s(b_j); both maps default to the identity."""
    a = np.asarray(f_d(np.asarray(a, dtype=float)), dtype=float)
    b = np.asarray(f_s(np.asarray(b, dtype=float)), dtype=float)
    return a[:, None] + b[None, :]


def sample_demand(instance: ProblemInstance, rng: np.random.Generator) -> np.ndarray:
    """Draw one demand vector, one uniform per type, by inverse CDF."""
    u = rng.random(instance.m)
    d = np.empty(instance.m, dtype=np.int64)
    for i, cdf in enumerate(instance._cdfs):
        d[i] = min(int(np.searchsorted(cdf, u[i], side="right")), cdf.size - 1)
    return d


def matching_reward(R, Q) -> float:
    R = np.asarray(R, dtype=float)
    Q = np.asarray(Q)
    if R.shape != Q.shape:
        raise ValueError(f"shape mismatch {R.shape} vs {Q.shape}")
    return float(np.sum(R * Q))


def demand_penalty(x, Q, k1: float) -> float:
    excess = np.asarray(Q).sum(axis=1) - np.asarray(x)
    return float(k1) * float(np.sum(np.maximum(excess, 0)))


def capacity_penalty(Q, c, k2: float) -> float:
    excess = np.asarray(Q).sum(axis=0) - np.asarray(c)
    return float(k2) * float(np.sum(np.maximum(excess, 0)))


def is_feasible(x, Q, c) -> bool:
    Q = np.asarray(Q)
    return bool(
        np.all(Q.sum(axis=1) <= np.asarray(x)) and np.all(Q.sum(axis=0) <= np.asarray(c))
    )


def iter_feasible_actions(x, c) -> Iterator[tuple]:
    """Yield feasible matchings as flat row-major tuples in lexicographic order."""
    x = [int(v) for v in x]
    c = [int(v) for v in c]
    m, n = len(x), len(c)
    size = m * n
    cell = [0] * size
    row_left = list(x)
    col_left = list(c)

    def rec(k):
        if k == size:
            yield tuple(cell)
            return
        i, j = divmod(k, n)
        hi = min(row_left[i], col_left[j])
        for v in range(hi + 1):
            cell[k] = v
            row_left[i] -= v
            col_left[j] -= v
            yield from rec(k + 1)
            row_left[i] += v
            col_left[j] += v
        cell[k] = 0

    yield from rec(0)


def enumerate_feasible_actions(x, c, cap: int = DEFAULT_ACTION_CAP) -> np.ndarray:
    """All feasible integer matchings at state ``x``, shape (k, m, n), lexicographic row-major."""
    m, n = len(x), len(c)
    out = []
    for k, flat in enumerate(iter_feasible_actions(x, c)):
        if k >= cap:
            raise ActionSpaceTooLarge(
                f"more than {cap} feasible actions at state {list(map(int, x))}"
            )
        out.append(flat)
    return np.asarray(out, dtype=np.int64).reshape(len(out), m, n)


def step(
    instance: ProblemInstance,
    x,
    Q,
    rng: np.random.Generator,
    demand: Optional[np.ndarray] = None,
) -> StepOutcome:
    """Apply matching ``Q`` at state ``x`` and draw the next period's demand.

    Matched quantities beyond the outstanding demand of a row are penalized but
    only ``min(row_total, x_i)`` units actually leave the system.
    """
    x = np.asarray(x, dtype=np.int64)
    Q = np.asarray(Q, dtype=np.int64)
    if np.any(Q < 0):
        raise ValueError("matching quantities must be nonnegative")
    d = sample_demand(instance, rng) if demand is None else np.asarray(demand, dtype=np.int64)
    raw = matching_reward(instance.reward, Q)
    u = demand_penalty(x, Q, instance.k1)
    v = capacity_penalty(Q, instance.capacities, instance.k2)
    served = np.minimum(Q.sum(axis=1), x)
    nxt = np.clip(x + d - served, 0, instance.N_d)
    return StepOutcome(
        next_state=nxt,
        net_reward=raw - u - v,
        raw_reward=raw,
        demand_drawn=d,
        demand_penalty=u,
        capacity_penalty=v,
    )


class StateSpace:
    """Mixed-radix indexing of the truncated state space [0, N_d]^m."""

    def __init__(self, m: int, N_d: int):
        self.m = m
        self.N_d = N_d
        self.shape = (N_d + 1,) * m
        self.size = (N_d + 1) ** m
        self._radix = np.array([(N_d + 1) ** (m - 1 - i) for i in range(m)], dtype=np.int64)

    def index(self, x) -> int:
        return int(np.dot(np.asarray(x, dtype=np.int64), self._radix))

    def state(self, idx: int) -> np.ndarray:
        return np.array(np.unravel_index(idx, self.shape), dtype=np.int64)

    def all_states(self) -> np.ndarray:
        grids = np.indices(self.shape).reshape(self.m, -1).T
        return grids.astype(np.int64)

    def __len__(self) -> int:
        return self.size


def check_state(instance: ProblemInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (instance.m,) or np.any(x < 0) or np.any(x > instance.N_d):
        raise ValueError(f"invalid state {x!r} for m={instance.m}, N_d={instance.N_d}")
    return x
