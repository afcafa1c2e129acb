"""Tabular Q-learning and domain-knowledge-informed Q-learning (DKQL)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .env import (
    DEFAULT_ACTION_CAP,
    ActionSpaceTooLarge,
    ProblemInstance,
    StateSpace,
    StepOutcome,
    capacity_penalty,
    demand_penalty,
    enumerate_feasible_actions,
    matching_reward,
    step,
)
from .exact import solve_single_period
from .records import EpisodeRow, RunRecord, convergence_detector
from .schedules import BetaSchedule, ConstantEpsilon, ExplorationSchedule

PGA_MAX_ITER = 10_000
PGA_RESIDUAL = 1e-8


class SolverDidNotConverge(RuntimeError):
    def __init__(self, residual: float):
        super().__init__(f"simplex maximization stopped with residual {residual:.3e}")
        self.residual = residual


@dataclass(frozen=True)
class DivergenceSpec:
    """Convex divergence h between learned and prior action probabilities.

    ``kind`` is ``"l2"`` (squared difference) or ``"kl"``. With the default
    ``sign=-1`` the penalty is g = -h, so maximizing F pulls the policy toward
    the prior; ``sign=+1`` is the literal g = +h reading.
    """

    kind: str = "kl"
    smoothing: float = 0.01
    sign: int = -1

    def __post_init__(self):
        if self.kind not in ("l2", "kl"):
            raise ValueError(f"unknown divergence {self.kind!r}")
        if self.smoothing < 0 or self.smoothing > 1:
            raise ValueError("smoothing must lie in [0, 1]")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be -1 or +1")

    def smooth(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.kind != "kl" or self.smoothing == 0.0:
            return mu
        return (1.0 - self.smoothing) * mu + self.smoothing / mu.size

    def h(self, p, mu) -> float:
        """Whole-vector divergence; used for convexity checks and by the deep learner."""
        p = np.asarray(p, dtype=float)
        mu = self.smooth(mu)
        if self.kind == "l2":
            return float(np.sum((p - mu) ** 2))
        pos = p > 0
        if np.any(mu[pos] <= 0):
            raise ValueError("KL divergence undefined: prior has zero mass where policy does not")
        return float(np.sum(p[pos] * np.log(p[pos] / mu[pos])))


def penalty_g(pi_row, mu_row, spec: DivergenceSpec, a: int) -> float:
    """Per-action penalty g(a) entering F with weight pi(a)."""
    pi_a = float(pi_row[a])
    mu_a = float(spec.smooth(mu_row)[a])
    if spec.kind == "l2":
        h = (pi_a - mu_a) ** 2
    else:
        if mu_a <= 0.0:
            raise ValueError("KL penalty undefined: smoothed prior mass is zero")
        # the pi(a) * g(a) term vanishes at pi(a) = 0; g itself diverges there
        h = -np.inf if pi_a == 0.0 else np.log(pi_a / mu_a)
    return float(spec.sign * h)


def value_penalty_F(Q_row, pi_row, mu_row, beta: float, spec: DivergenceSpec) -> float:
    """sum_a pi(a) * (g(a) / beta + Q(a)); terms with pi(a) = 0 contribute nothing."""
    Q_row = np.asarray(Q_row, dtype=float)
    pi = np.asarray(pi_row, dtype=float)
    mu = spec.smooth(mu_row)
    total = 0.0
    for a in np.flatnonzero(pi > 0):
        if spec.kind == "l2":
            g = spec.sign * (pi[a] - mu[a]) ** 2
        else:
            if mu[a] <= 0.0:
                raise ValueError("KL penalty undefined: smoothed prior mass is zero")
            g = spec.sign * np.log(pi[a] / mu[a])
        total += pi[a] * (g / beta + Q_row[a])
    return float(total)


def _logsumexp(z: np.ndarray) -> float:
    top = z.max()
    return float(top + np.log(np.exp(z - top).sum()))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _pga_l2(Q, mu, beta, sign, start):
    # gradient of sum_a pi_a Q_a + (sign/beta) pi_a (pi_a - mu_a)^2
    lr = 0.1 * beta / 6.0
    pi = start
    for _ in range(PGA_MAX_ITER):
        grad = Q + (sign / beta) * (pi - mu) * (3.0 * pi - mu)
        nxt = project_simplex(pi + lr * grad)
        residual = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        if residual < PGA_RESIDUAL:
            return pi
    raise SolverDidNotConverge(residual)


def _f_l2(Q, pi, mu, beta, sign):
    return float(pi @ Q + (sign / beta) * np.sum(pi * (pi - mu) ** 2))


def max_policy_F(Q_row, mu_row, beta: float, spec: DivergenceSpec):
    """Maximize the value-penalty function over the simplex.

    Returns ``(pi_star, F_star)``. KL with the penalty sign has the closed form
    pi* ~ mu * exp(beta * Q) and F* = logsumexp(beta * Q + log mu) / beta.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    Q = np.asarray(Q_row, dtype=float)
    k = Q.size
    mu = spec.smooth(mu_row)
    if spec.kind == "kl":
        if spec.sign < 0:
            support = mu > 0
            if not support.any():
                raise ValueError("KL penalty undefined: prior has no mass")
            z = np.full(k, -np.inf)
            z[support] = beta * Q[support] + np.log(mu[support])
            lse = _logsumexp(z)
            pi = np.exp(z - lse)
            return pi, float(lse / beta)
        # convex objective: the maximum sits at a vertex
        if np.any(mu <= 0):
            raise ValueError("KL penalty undefined: smoothed prior mass is zero")
        vals = Q - np.log(mu) / beta
        a = int(np.argmax(vals))
        pi = np.zeros(k)
        pi[a] = 1.0
        return pi, float(vals[a])

    candidates = [np.eye(k)[a] for a in range(k)] + [mu.copy()]
    best_pi, best_f = None, -np.inf
    for c in candidates:
        f = _f_l2(Q, c, mu, beta, spec.sign)
        if f > best_f:
            best_pi, best_f = c, f
    failure = None
    solved = 0
    for start in (mu.copy(), np.full(k, 1.0 / k), best_pi.copy()):
        try:
            pi = _pga_l2(Q, mu, beta, spec.sign, start)
        except SolverDidNotConverge as exc:
            # extra starts are optional; an error needs every start to stall
            failure = exc
            continue
        solved += 1
        f = _f_l2(Q, pi, mu, beta, spec.sign)
        if f > best_f:
            best_pi, best_f = pi, f
    if not solved:
        raise failure
    return best_pi, best_f


class QTable:
    """Action values over the truncated states; action a at state s indexes
    the lexicographic feasible enumeration of s."""

    def __init__(self, instance: ProblemInstance, action_cap: int = DEFAULT_ACTION_CAP):
        self.instance = instance
        self.space = StateSpace(instance.m, instance.N_d)
        self.states = self.space.all_states()
        self.actions = []
        total = 0
        for x in self.states:
            acts = enumerate_feasible_actions(x, instance.capacities, cap=action_cap)
            total += len(acts)
            if total > action_cap:
                raise ActionSpaceTooLarge(f"more than {action_cap} state-action pairs")
            self.actions.append(acts)
        self.values = [np.zeros(len(a)) for a in self.actions]
        self.visits = [np.zeros(len(a), dtype=np.int64) for a in self.actions]

    def __len__(self) -> int:
        return len(self.states)

    def index(self, x) -> int:
        return self.space.index(x)

    def _check(self, s: int) -> None:
        if not 0 <= s < len(self.values):
            raise KeyError(f"unknown state index {s}")

    def max_value(self, s: int) -> float:
        self._check(s)
        return float(self.values[s].max())

    def greedy(self, s: int) -> int:
        return int(np.argmax(self.values[s]))

    def greedy_action(self, x) -> np.ndarray:
        s = self.index(x)
        return self.actions[s][self.greedy(s)].copy()

    def average_max(self) -> float:
        return float(np.mean([v.max() for v in self.values]))

    def copy_values(self) -> List[np.ndarray]:
        return [v.copy() for v in self.values]

    def to_dict(self) -> dict:
        return {
            "N_d": self.instance.N_d,
            "m": self.instance.m,
            "q": {
                ",".join(map(str, x)): self.values[s].tolist()
                for s, x in enumerate(self.states)
            },
        }

    def load_dict(self, d: dict) -> None:
        for s, x in enumerate(self.states):
            vals = d["q"][",".join(map(str, x))]
            if len(vals) != len(self.values[s]):
                raise ValueError(f"action count mismatch at state {x.tolist()}")
            self.values[s] = np.asarray(vals, dtype=float)


def q_learning_update(Q: QTable, s: int, a: int, r: float, s_next: int, alpha: float, gamma: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    Q._check(s)
    Q._check(s_next)
    target = r + gamma * float(Q.values[s_next].max())
    new = (1.0 - alpha) * Q.values[s][a] + alpha * target
    Q.values[s][a] = new
    return float(new)


@dataclass
class PriorPolicy:
    """Per-state probability vectors over the feasible enumeration."""

    rows: List[np.ndarray]

    def __getitem__(self, s: int) -> np.ndarray:
        return self.rows[s]


def make_prior_policy(instance: ProblemInstance, table: Optional[QTable] = None, smoothing: float = 0.0) -> PriorPolicy:
    """One-hot at the single-period optimum, optionally mixed with uniform."""
    table = table if table is not None else QTable(instance)
    rows = []
    for s, x in enumerate(table.states):
        best = solve_single_period(x, instance.capacities, instance.reward)
        acts = table.actions[s]
        hit = np.flatnonzero(np.all(acts == best[None], axis=(1, 2)))
        if hit.size != 1:
            raise RuntimeError(f"single-period action missing from enumeration at {x}")
        row = np.zeros(len(acts))
        row[hit[0]] = 1.0
        if smoothing:
            row = (1.0 - smoothing) * row + smoothing / len(acts)
        rows.append(row)
    return PriorPolicy(rows)


def dk_q_update(
    Q: QTable,
    s: int,
    a: int,
    r: float,
    s_next: int,
    alpha: float,
    gamma: float,
    beta: float,
    mu: Union[PriorPolicy, np.ndarray],
    spec: DivergenceSpec,
) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    Q._check(s)
    Q._check(s_next)
    mu_row = mu[s_next] if isinstance(mu, PriorPolicy) else np.asarray(mu)
    _, f_star = max_policy_F(Q.values[s_next], mu_row, beta, spec)
    new = (1.0 - alpha) * Q.values[s][a] + alpha * (r + gamma * f_star)
    Q.values[s][a] = new
    return float(new)


def polynomial_step_size(visits: int, exponent: float = 0.85) -> float:
    """alpha = 1 / (1 + visits) ** exponent; Robbins-Monro for exponent in (0.5, 1]."""
    return 1.0 / (1.0 + visits) ** exponent


@dataclass
class LearningConfig:
    episodes: int = 3000
    steps_per_episode: int = 500
    step_exponent: float = 0.85
    exploration: Union[ExplorationSchedule, ConstantEpsilon] = field(
        default_factory=lambda: ExplorationSchedule(floor=0.1, horizon=300)
    )
    convergence_threshold: float = 0.02
    stop_on_convergence: bool = False
    wall_clock_s: Optional[float] = None

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episode and step caps must be >= 1")
        if not 0.5 < self.step_exponent <= 1.0:
            raise ValueError("step exponent must lie in (0.5, 1] for Robbins-Monro step sizes")


StepHook = Callable[[np.ndarray, np.ndarray, StepOutcome], None]


def train_tabular(
    instance: ProblemInstance,
    config: LearningConfig,
    method: str,
    beta_schedule: Optional[BetaSchedule],
    prior: Optional[PriorPolicy],
    rng: np.random.Generator,
    spec: Optional[DivergenceSpec] = None,
    table: Optional[QTable] = None,
    on_step: Optional[StepHook] = None,
    on_episode: Optional[Callable[[int, QTable], None]] = None,
):
    """Episodic epsilon-greedy training of QL or DKQL; returns (QTable, RunRecord)."""
    method = method.upper()
    if method not in ("QL", "DKQL"):
        raise ValueError(f"unknown tabular method {method!r}")
    table = table if table is not None else QTable(instance)
    spec = spec or DivergenceSpec()
    if method == "DKQL":
        if beta_schedule is None:
            raise ValueError("DKQL needs a beta schedule")
        prior = prior if prior is not None else make_prior_policy(instance, table)
    gamma = instance.gamma
    N = instance.N_d
    space = table.space
    radix = space._radix
    cdfs = instance._cdfs

    # per-state, per-action net reward and post-decision state
    net = []
    post = []
    for x, acts in zip(table.states, table.actions):
        rewards = np.array(
            [
                matching_reward(instance.reward, Q)
                - demand_penalty(x, Q, instance.k1)
                - capacity_penalty(Q, instance.capacities, instance.k2)
                for Q in acts
            ]
        )
        net.append(rewards)
        post.append(x[None, :] - np.minimum(acts.sum(axis=2), x[None, :]))

    kl_fast = method == "DKQL" and spec.kind == "kl" and spec.sign < 0
    if kl_fast:
        with np.errstate(divide="ignore"):
            log_mu = [np.log(spec.smooth(prior[s])) for s in range(len(table))]

    record = RunRecord(method)
    t_global = 0
    start = time.perf_counter()
    values, visits = table.values, table.visits
    for episode in range(config.episodes):
        eps = config.exploration(episode)
        s = int(rng.integers(len(table)))
        x = table.states[s]
        ep_reward = 0.0
        beta_t = float("nan")
        for _ in range(config.steps_per_episode):
            t_global += 1
            k = len(values[s])
            if rng.random() < eps:
                a = int(rng.integers(k))
            else:
                a = int(np.argmax(values[s]))
            u = rng.random(instance.m)
            d = np.array(
                [min(int(np.searchsorted(cdf, u[i], side="right")), cdf.size - 1) for i, cdf in enumerate(cdfs)],
                dtype=np.int64,
            )
            x_next = np.minimum(post[s][a] + d, N)
            s_next = int(x_next @ radix)
            r = float(net[s][a])
            if on_step is not None:
                on_step(x, table.actions[s][a], step(instance, x, table.actions[s][a], rng, demand=d))
            alpha = polynomial_step_size(int(visits[s][a]), config.step_exponent)
            visits[s][a] += 1
            if method == "QL":
                target = r + gamma * float(values[s_next].max())
            else:
                beta_t = beta_schedule(t_global)
                if kl_fast:
                    f_star = _logsumexp(beta_t * values[s_next] + log_mu[s_next]) / beta_t
                else:
                    _, f_star = max_policy_F(values[s_next], prior[s_next], beta_t, spec)
                target = r + gamma * f_star
            values[s][a] = (1.0 - alpha) * values[s][a] + alpha * target
            ep_reward += r
            s, x = s_next, x_next
        wall_ms = (time.perf_counter() - start) * 1000.0
        record.append(
            EpisodeRow(
                episode=episode + 1,
                steps=config.steps_per_episode,
                avg_Q=table.average_max(),
                episode_reward=ep_reward,
                infeasible_action_count=0,
                beta=beta_t,
                epsilon=eps,
                wall_ms=wall_ms,
            )
        )
        if on_episode is not None:
            on_episode(episode + 1, table)
        ok, ep = convergence_detector(record.metric_series(), config.convergence_threshold)
        if ok and not record.converged:
            record.converged = True
            record.episodes_to_convergence = ep
            record.time_to_convergence_ms = record.rows[ep - 1].wall_ms
            if config.stop_on_convergence:
                break
        if config.wall_clock_s is not None and wall_ms > 1000.0 * config.wall_clock_s:
            record.timed_out = True
            break
    return table, record
