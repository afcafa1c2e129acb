"""DDPG and domain-knowledge-informed DDPG (DKDDPG) for the matching MDP.

DDPG is run through the DKDDPG code path with the regularization weight
fixed at ``HUGE_BETA``, so the two share every random draw.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .env import ProblemInstance, StepOutcome, is_feasible, step
from .exact import solve_single_period
from .nn import (
    Mlp,
    OptimizerState,
    backward,
    forward,
    forward_cached,
    init_network,
    mse_loss_grad,
    optimizer_step,
)
from .records import EpisodeRow, RunRecord, convergence_detector
from .schedules import HUGE_BETA, BetaSchedule, ConstantEpsilon, ExplorationSchedule
from .tabular import DivergenceSpec


def transform_action(prob_vector, x) -> np.ndarray:
    """Map an actor output over the m*n cells to an integer matching at state x.

    Rows are normalized, scaled by the outstanding demand and rounded half-up;
    any row that then exceeds x_i is repaired by decrementing the cells that
    were rounded up the most. All-zero rows match nothing.
    """
    x = np.asarray(x, dtype=np.int64)
    m = x.size
    p = np.asarray(prob_vector, dtype=float)
    if np.any(p < 0):
        raise ValueError("action probabilities must be nonnegative")
    if p.size % m:
        raise ValueError(f"action length {p.size} is not a multiple of m={m}")
    P = p.reshape(m, -1)
    sums = P.sum(axis=1, keepdims=True)
    frac = np.divide(P, sums, out=np.zeros_like(P), where=sums > 0)
    scaled = frac * x[:, None]
    Q = np.floor(scaled + 0.5).astype(np.int64)
    for i in range(m):
        excess = int(Q[i].sum() - x[i])
        if excess > 0:
            # stable sort keeps the lowest column first among equal residuals
            order = np.argsort(-(Q[i] - scaled[i]), kind="stable")
            for j in order[:excess]:
                Q[i, j] -= 1
    return Q


def row_fractions(prob_vector, x) -> np.ndarray:
    """Fraction of each row's outstanding demand sent to each column (rows with x_i = 0 are zero)."""
    x = np.asarray(x, dtype=np.int64)
    p = np.asarray(prob_vector, dtype=float)
    return _batch_row_fractions(p[None, :], x[None, :])[0]


def _batch_row_fractions(probs: np.ndarray, states: np.ndarray) -> np.ndarray:
    B, m = states.shape
    P = probs.reshape(B, m, -1)
    sums = P.sum(axis=2, keepdims=True)
    frac = np.divide(P, sums, out=np.zeros_like(P), where=sums > 0)
    frac[states <= 0] = 0.0
    return frac.reshape(B, -1)


class SinglePeriodPrior:
    """Prior action fractions: the single-period optimum divided row-wise by x_i."""

    def __init__(self, instance: ProblemInstance):
        self.instance = instance
        c, R = instance.capacities, instance.reward

        @lru_cache(maxsize=None)
        def _frac(key):
            xs = np.asarray(key, dtype=np.int64)
            Q = solve_single_period(xs, c, R).astype(float)
            out = np.divide(Q, xs[:, None], out=np.zeros_like(Q), where=xs[:, None] > 0)
            return out.ravel()

        self._frac = _frac

    def __call__(self, x) -> np.ndarray:
        return self._frac(tuple(int(v) for v in x))

    def batch(self, states: np.ndarray) -> np.ndarray:
        return np.stack([self._frac(tuple(s)) for s in states.tolist()])


def batch_divergence(p: np.ndarray, mu: np.ndarray, spec: DivergenceSpec) -> np.ndarray:
    """Row-wise h(p, mu) for fraction vectors; KL treats both as distributions over cells."""
    if spec.kind == "l2":
        return np.sum((p - mu) ** 2, axis=1)
    k = p.shape[1]
    ps = p.sum(axis=1, keepdims=True)
    ms = mu.sum(axis=1, keepdims=True)
    pn = np.divide(p, ps, out=np.full_like(p, 1.0 / k), where=ps > 0)
    mn = np.divide(mu, ms, out=np.full_like(mu, 1.0 / k), where=ms > 0)
    mn = (1.0 - spec.smoothing) * mn + spec.smoothing / k
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pn > 0, pn * np.log(pn / mn), 0.0)
    if np.any(~np.isfinite(terms)):
        raise ValueError("KL divergence undefined: prior has zero mass where the actor does not")
    return terms.sum(axis=1)


class ReplayBuffer:
    """Bounded FIFO of (state, action probabilities, reward, next state)."""

    def __init__(self, capacity: int, m: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, m), dtype=np.int64)
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, m), dtype=np.int64)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward: float, next_state) -> None:
        k = self._next
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self._next = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> "Batch":
        idx = rng.integers(self.size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx])

    def ordered(self) -> "Batch":
        """Contents oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx])


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class AgentPair:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    actor_opt: OptimizerState
    critic_opt: OptimizerState
    tau: float
    N_d: int

    def encode(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        return s / self.N_d if self.N_d > 0 else np.zeros_like(s)

    def policy(self, x) -> np.ndarray:
        return forward(self.actor, self.encode(x))

    def q_value(self, states, probs, target: bool = False) -> np.ndarray:
        net = self.target_critic if target else self.critic
        inp = np.concatenate([self.encode(states), np.asarray(probs, dtype=float)], axis=-1)
        return forward(net, inp)[..., 0]


ACTOR_HIDDEN = (50, 200, 100)
CRITIC_HIDDEN = (50, 100, 200)


def make_agent(
    instance: ProblemInstance,
    rng: np.random.Generator,
    actor_lr: float = 1e-4,
    critic_lr: float = 5e-4,
    tau: float = 5e-4,
    final_layer_bound: float = 0.003,
    actor_hidden: Sequence[int] = ACTOR_HIDDEN,
    critic_hidden: Sequence[int] = CRITIC_HIDDEN,
    optimizer: str = "adam",
) -> AgentPair:
    m, a_dim = instance.m, instance.m * instance.n
    actor = init_network(
        [m, *actor_hidden, a_dim],
        ["relu"] * len(actor_hidden) + ["softmax"],
        rng,
        final_layer_bound,
    )
    # critic: ReLU hidden stack then a width-1 linear value head
    critic = init_network(
        [m + a_dim, *critic_hidden, 1],
        ["relu"] * len(critic_hidden) + ["linear"],
        rng,
        final_layer_bound,
    )
    return AgentPair(
        actor=actor,
        critic=critic,
        target_actor=actor.copy(),
        target_critic=critic.copy(),
        actor_opt=OptimizerState(optimizer, lr=actor_lr),
        critic_opt=OptimizerState(optimizer, lr=critic_lr),
        tau=tau,
        N_d=instance.N_d,
    )


def select_action(agent: AgentPair, x, schedule, episode: int, rng: np.random.Generator):
    """Epsilon-greedy: with probability epsilon, perturb the actor output with Gaussian noise."""
    p = agent.policy(x)
    eps = schedule(episode)
    if rng.random() < eps:
        noisy = np.maximum(p + rng.normal(0.0, schedule.sigma, size=p.shape), 0.0)
        total = noisy.sum()
        if total > 0:
            p = noisy / total
    return p, transform_action(p, x)


def compute_dk_target(
    batch: Batch,
    agent: AgentPair,
    gamma: float,
    beta: float,
    prior: Callable,
    spec: DivergenceSpec,
) -> np.ndarray:
    """y = r + gamma * (g(a+) / beta + Q'(s', a+)) with a+ the target actor's output at s'."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    s_next = agent.encode(batch.next_states)
    a_plus = forward(agent.target_actor, s_next)
    q_next = forward(agent.target_critic, np.concatenate([s_next, a_plus], axis=1))[:, 0]
    mu = prior.batch(batch.next_states) if hasattr(prior, "batch") else np.stack(
        [prior(s) for s in batch.next_states]
    )
    g = spec.sign * batch_divergence(_batch_row_fractions(a_plus, batch.next_states), mu, spec)
    return batch.rewards + gamma * (g / beta + q_next)


def critic_update(agent: AgentPair, batch: Batch, targets) -> float:
    """One optimizer step on mean squared TD error; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    inp = np.concatenate([agent.encode(batch.states), batch.actions], axis=1)
    grad = mse_loss_grad(agent.critic, inp, np.asarray(targets, dtype=float)[:, None])
    optimizer_step(agent.critic, grad, agent.critic_opt)
    return grad.loss


def actor_gradient(agent: AgentPair, batch: Batch):
    """(objective, flat actor gradient of the objective) for mean Q(s, actor(s))."""
    s = agent.encode(batch.states)
    a_cache = forward_cached(agent.actor, s)
    a = a_cache.outputs[-1]
    c_cache = forward_cached(agent.critic, np.concatenate([s, a], axis=1))
    q = c_cache.outputs[-1][:, 0]
    n = len(q)
    c_grad = backward(agent.critic, c_cache, np.full((n, 1), 1.0 / n))
    dq_da = c_grad.inputs[:, s.shape[1] :]
    a_grad = backward(agent.actor, a_cache, dq_da, input_grad=False)
    return float(q.mean()), a_grad.params


def actor_update(agent: AgentPair, batch: Batch) -> float:
    """Ascend mean Q(s, actor(s)) through the critic's action gradient; returns the pre-step objective."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    objective, grad = actor_gradient(agent, batch)
    optimizer_step(agent.actor, -grad, agent.actor_opt)
    return objective


def soft_update(agent: AgentPair, tau: Optional[float] = None) -> None:
    tau = agent.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for tgt, src in ((agent.target_actor, agent.actor), (agent.target_critic, agent.critic)):
        tgt.params *= 1.0 - tau
        tgt.params += tau * src.params


@dataclass
class DeepConfig:
    episodes: int = 3000
    steps_per_episode: int = 500
    batch_size: int = 64
    buffer_capacity: int = 1_000_000
    actor_lr: float = 1e-4
    critic_lr: float = 5e-4
    tau: float = 5e-4
    exploration: Union[ExplorationSchedule, ConstantEpsilon] = field(
        default_factory=lambda: ExplorationSchedule(floor=0.1, horizon=300, sigma=0.1)
    )
    divergence: DivergenceSpec = field(default_factory=lambda: DivergenceSpec("l2"))
    convergence_threshold: float = 0.02
    stop_on_convergence: bool = False
    metric_sample_cap: int = 5000
    metric_seed: int = 12345
    wall_clock_s: Optional[float] = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1 or self.batch_size < 1:
            raise ValueError("episode, step and batch caps must be >= 1")


def metric_states(instance: ProblemInstance, cap: int, seed: int) -> np.ndarray:
    """All truncated states, or a seeded uniform sample of ``cap`` of them."""
    N, m = instance.N_d, instance.m
    if instance.n_states <= cap:
        return np.indices((N + 1,) * m).reshape(m, -1).T.astype(np.int64)
    return np.random.default_rng(seed).integers(0, N + 1, size=(cap, m))


def deep_average_q(agent: AgentPair, states: np.ndarray) -> float:
    probs = forward(agent.actor, agent.encode(states))
    return float(agent.q_value(states, probs).mean())


def train_agent(
    instance: ProblemInstance,
    config: DeepConfig,
    method: str,
    beta_schedule: Optional[BetaSchedule],
    prior: Optional[Callable] = None,
    rng: Optional[np.random.Generator] = None,
    agent: Optional[AgentPair] = None,
    on_step: Optional[Callable[[np.ndarray, np.ndarray, StepOutcome], None]] = None,
    on_update: Optional[Callable[[AgentPair], None]] = None,
):
    """Algorithm loop for DDPG / DKDDPG; returns (AgentPair, RunRecord)."""
    method = method.upper()
    if method not in ("DDPG", "DKDDPG"):
        raise ValueError(f"unknown deep method {method!r}")
    if method == "DDPG":
        beta_schedule = BetaSchedule.fixed(HUGE_BETA)
    elif beta_schedule is None:
        raise ValueError("DKDDPG needs a beta schedule")
    rng = rng if rng is not None else np.random.default_rng()
    if agent is None:
        agent = make_agent(
            instance, rng, config.actor_lr, config.critic_lr, config.tau, optimizer=config.optimizer
        )
    prior = prior if prior is not None else SinglePeriodPrior(instance)
    buffer = ReplayBuffer(config.buffer_capacity, instance.m, instance.m * instance.n)
    probe = metric_states(instance, config.metric_sample_cap, config.metric_seed)
    gamma, N = instance.gamma, instance.N_d
    schedule = config.exploration

    record = RunRecord(method)
    t_global = 0
    start = time.perf_counter()
    for episode in range(config.episodes):
        x = rng.integers(0, N + 1, size=instance.m)
        ep_reward = 0.0
        infeasible = 0
        beta_t = float("nan")
        for _ in range(config.steps_per_episode):
            t_global += 1
            beta_t = beta_schedule(t_global)
            probs, Q = select_action(agent, x, schedule, episode, rng)
            out = step(instance, x, Q, rng)
            if on_step is not None:
                on_step(x, Q, out)
            if not is_feasible(x, Q, instance.capacities):
                infeasible += 1
            buffer.add(x, probs, out.net_reward, out.next_state)
            ep_reward += out.net_reward
            x = out.next_state
            if len(buffer) >= config.batch_size:
                batch = buffer.sample(rng, config.batch_size)
                y = compute_dk_target(batch, agent, gamma, beta_t, prior, config.divergence)
                critic_update(agent, batch, y)
                actor_update(agent, batch)
                soft_update(agent)
                if on_update is not None:
                    on_update(agent)
        wall_ms = (time.perf_counter() - start) * 1000.0
        record.append(
            EpisodeRow(
                episode=episode + 1,
                steps=config.steps_per_episode,
                avg_Q=deep_average_q(agent, probe),
                episode_reward=ep_reward,
                infeasible_action_count=infeasible,
                beta=beta_t,
                epsilon=schedule(episode),
                wall_ms=wall_ms,
            )
        )
        if not record.converged:
            ok, ep = convergence_detector(record.metric_series(), config.convergence_threshold)
            if ok:
                record.converged = True
                record.episodes_to_convergence = ep
                record.time_to_convergence_ms = record.rows[ep - 1].wall_ms
                if config.stop_on_convergence:
                    break
        if config.wall_clock_s is not None and wall_ms > 1000.0 * config.wall_clock_s:
            record.timed_out = True
            break
    return agent, record


def kappa_search(
    instance: ProblemInstance,
    config: DeepConfig,
    candidates: Optional[Sequence[float]],
    probe_episodes: int,
    rng: np.random.Generator,
    low: float = 1e-4,
    high: float = 10.0,
) -> float:
    """Pick the slope of the linear beta schedule with the highest total probe reward.

    Without explicit candidates, ten are drawn log-uniformly from [low, high].
    Every candidate is probed with the same seed; the first best index wins.
    """
    if candidates is None:
        candidates = np.exp(rng.uniform(np.log(low), np.log(high), size=10))
    candidates = [float(k) for k in candidates]
    if not candidates or min(candidates) <= 0:
        raise ValueError("kappa candidates must be positive")
    if len(candidates) == 1:
        return candidates[0]
    probe_seed = int(rng.integers(2**63 - 1))
    probe_cfg = DeepConfig(**{**config.__dict__, "episodes": probe_episodes, "stop_on_convergence": False})
    totals = []
    for kappa in candidates:
        _, rec = train_agent(
            instance,
            probe_cfg,
            "DKDDPG",
            BetaSchedule.linear(kappa),
            rng=np.random.default_rng(probe_seed),
        )
        totals.append(sum(r.episode_reward for r in rec.rows))
    return candidates[int(np.argmax(totals))]
