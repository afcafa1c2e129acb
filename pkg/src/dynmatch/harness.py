"""Instance generation, metrics, evaluation and the multi-method comparison runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .ddpg import AgentPair, DeepConfig, deep_average_q, kappa_search, metric_states, train_agent, transform_action
from .env import ProblemInstance, build_horizontal_reward, step
from .exact import QTableExact, StateSpaceTooLarge, stationary_value_iteration
from .io import canonical_json, instance_hash, load_instance
from .records import RunRecord, convergence_detector  # noqa: F401  (re-exported)
from .schedules import BetaSchedule, ConstantEpsilon, ExplorationSchedule
from .tabular import DivergenceSpec, LearningConfig, QTable, train_tabular

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("EXACT", "QL", "DKQL", "DDPG", "DKDDPG")
TABULAR = ("QL", "DKQL")
DEEP = ("DDPG", "DKDDPG")


def generate_instance(
    m: int,
    seed: int,
    prize: float = 10.0,
    delta_range: Sequence[float] = (0.0, 8.0),
    max_demand: int = 20,
    max_capacity: int = 20,
    gamma: float = 0.9,
) -> ProblemInstance:
    """Random square instance: uniform demand up to U_i, capacities and U_i uniform on {0..20}."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    upper = rng.integers(0, max_demand + 1, size=m)
    caps = rng.integers(0, max_capacity + 1, size=m)
    delta = rng.uniform(delta_range[0], delta_range[1], size=(m, m))
    return ProblemInstance(
        capacities=caps,
        demand_pmfs=tuple(np.full(u + 1, 1.0 / (u + 1)) for u in upper),
        reward=build_horizontal_reward(prize, delta),
        gamma=gamma,
        seed=seed,
    )


def average_q_metric(artifact, instance: ProblemInstance, sample_cap: int = 5000, seed: int = 12345) -> float:
    """Mean learned value over the truncated states (deep: over a seeded sample when too many)."""
    if isinstance(artifact, QTable):
        return artifact.average_max()
    if isinstance(artifact, QTableExact):
        return artifact.average_value()
    if isinstance(artifact, AgentPair):
        return deep_average_q(artifact, metric_states(instance, sample_cap, seed))
    raise TypeError(f"no average-Q metric for {type(artifact).__name__}")


def _check_shape(artifact, instance: ProblemInstance) -> None:
    if isinstance(artifact, (QTable, QTableExact)):
        other = artifact.instance
        if (other.m, other.n, other.N_d) != (instance.m, instance.n, instance.N_d):
            raise ValueError("table was built for a differently shaped instance")
    elif isinstance(artifact, AgentPair):
        if artifact.actor.in_dim != instance.m or artifact.actor.out_dim != instance.m * instance.n:
            raise ValueError("agent networks do not match the instance shape")
    else:
        raise TypeError(f"cannot evaluate {type(artifact).__name__}")


def greedy_policy(artifact):
    if isinstance(artifact, (QTable, QTableExact)):
        return artifact.greedy_action
    return lambda x: transform_action(artifact.policy(x), x)


def evaluate_trained(artifact, instance: ProblemInstance, horizon: int = 500, seed: int = 0) -> float:
    """Undiscounted net reward of a greedy rollout from a seeded random start."""
    _check_shape(artifact, instance)
    rng = np.random.default_rng(seed)
    act = greedy_policy(artifact)
    x = rng.integers(0, instance.N_d + 1, size=instance.m)
    total = 0.0
    for _ in range(horizon):
        out = step(instance, x, act(x), rng)
        total += out.net_reward
        x = out.next_state
    return total


@dataclass
class ExperimentConfig:
    instance_file: Optional[str] = None
    generator_m: int = 2
    generator_seed: int = 0
    methods: List[str] = field(default_factory=lambda: ["EXACT", "QL", "DKQL", "DDPG", "DKDDPG"])
    episodes: int = 3000
    steps_per_episode: int = 500
    convergence_threshold: float = 0.02
    stop_on_convergence: bool = False
    eval_horizon: int = 500
    seeds: List[int] = field(default_factory=lambda: [0])
    wall_clock_s: Optional[float] = None
    # tabular
    dkql_beta: float = 50.0
    divergence: str = "kl"
    step_exponent: float = 0.85
    epsilon: Optional[float] = None  # constant epsilon; None selects the annealed schedule
    epsilon_floor: float = 0.1
    epsilon_horizon: int = 300
    # deep
    kappa: Optional[float] = None  # None runs the random search
    kappa_probe_episodes: int = 5
    kappa_seed: int = 0
    tau: float = 5e-4
    actor_lr: float = 1e-4
    critic_lr: float = 5e-4
    batch_size: int = 64
    noise_sigma: float = 0.1
    deep_divergence: str = "l2"
    metric_sample_cap: int = 5000
    oracle_state_cap: int = 250_000
    record_wall_time: bool = True
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.convergence_threshold < 1.0:
            raise ValueError("convergence threshold must lie in (0, 1)")
        if min(self.episodes, self.steps_per_episode, self.eval_horizon) < 1:
            raise ValueError("episode, step and evaluation caps must be >= 1")
        self.methods = [m.upper() for m in self.methods]
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        text = p.read_text()
        if p.suffix.lower() == ".toml":
            return cls.from_dict(tomllib.loads(text))
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def manifest_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def instance(self) -> ProblemInstance:
        if self.instance_file:
            return load_instance(self.instance_file)
        return generate_instance(self.generator_m, self.generator_seed)

    def exploration(self):
        if self.epsilon is not None:
            return ConstantEpsilon(self.epsilon, self.noise_sigma)
        return ExplorationSchedule(self.epsilon_floor, self.epsilon_horizon, self.noise_sigma)

    def learning_config(self) -> LearningConfig:
        return LearningConfig(
            episodes=self.episodes,
            steps_per_episode=self.steps_per_episode,
            step_exponent=self.step_exponent,
            exploration=self.exploration(),
            convergence_threshold=self.convergence_threshold,
            stop_on_convergence=self.stop_on_convergence,
            wall_clock_s=self.wall_clock_s,
        )

    def deep_config(self, episodes: Optional[int] = None) -> DeepConfig:
        return DeepConfig(
            episodes=episodes or self.episodes,
            steps_per_episode=self.steps_per_episode,
            batch_size=self.batch_size,
            actor_lr=self.actor_lr,
            critic_lr=self.critic_lr,
            tau=self.tau,
            exploration=self.exploration(),
            divergence=DivergenceSpec(self.deep_divergence),
            convergence_threshold=self.convergence_threshold,
            stop_on_convergence=self.stop_on_convergence,
            metric_sample_cap=self.metric_sample_cap,
            wall_clock_s=self.wall_clock_s,
        )


@dataclass
class CellResult:
    method: str
    instance: str
    seed: int
    record: Optional[RunRecord]
    average_Q: float
    eval_reward: float
    elapsed_s: float
    kappa: Optional[float] = None
    artifact: object = None


def train_method(config: ExperimentConfig, instance: ProblemInstance, method: str, seed: int, kappa=None):
    """Train one (method, seed) cell; returns (artifact, RunRecord or None)."""
    rng = np.random.default_rng(seed)
    if method == "EXACT":
        return stationary_value_iteration(instance), None
    if method in TABULAR:
        beta = BetaSchedule.fixed(config.dkql_beta) if method == "DKQL" else None
        return train_tabular(
            instance, config.learning_config(), method, beta, None, rng, spec=DivergenceSpec(config.divergence)
        )
    beta = BetaSchedule.linear(kappa) if method == "DKDDPG" else None
    return train_agent(instance, config.deep_config(), method, beta, rng=rng)


def _run_cell(args) -> CellResult:
    config, instance, name, method, seed, kappa = args
    start = time.perf_counter()
    artifact, record = train_method(config, instance, method, seed, kappa)
    elapsed = time.perf_counter() - start
    avg = average_q_metric(artifact, instance, config.metric_sample_cap)
    reward = evaluate_trained(artifact, instance, config.eval_horizon, seed)
    return CellResult(method, name, seed, record, avg, reward, elapsed, kappa if method == "DKDDPG" else None)


def percent_diff(value: float, reference: float) -> float:
    """(value - reference) / |reference| * 100; NaN without a usable reference."""
    if reference is None or not np.isfinite(reference) or reference == 0:
        return float("nan")
    return (value - reference) / abs(reference) * 100.0


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)


COMPARISON_COLUMNS = (
    "method",
    "instance",
    "seed",
    "converged",
    "convergence_time_s",
    "episodes",
    "average_Q",
    "oracle_average_V",
    "pct_diff_vs_oracle",
    "eval_reward",
    "kappa",
    "timed_out",
)

PAIR_COLUMNS = ("instance", "seed", "metric", "base", "dk", "pct_change")


@dataclass
class ComparisonReport:
    rows: List[dict]
    pairs: List[dict]
    files: List[Path]
    cells: List[CellResult]
    timed_out: bool


def _write_csv(path: Path, header: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.write_text(buf.getvalue())


def run_comparison(config: ExperimentConfig, out_dir, plots: bool = True) -> ComparisonReport:
    """Run every (method, seed) cell and write comparison.csv, pairs.csv, series CSVs and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    instance = config.instance()
    name = config.instance_file and Path(config.instance_file).stem or f"gen-m{config.generator_m}-s{config.generator_seed}"
    header = f"manifest sha256={config.manifest_hash()} instance sha256={instance_hash(instance)}"

    oracle_avg = float("nan")
    if instance.n_states <= config.oracle_state_cap:
        try:
            oracle_avg = stationary_value_iteration(instance).average_value()
        except StateSpaceTooLarge:
            pass

    kappa = config.kappa
    if "DKDDPG" in config.methods and kappa is None:
        kappa = kappa_search(
            instance,
            config.deep_config(),
            None,
            config.kappa_probe_episodes,
            np.random.default_rng(config.kappa_seed),
        )

    tasks = [(config, instance, name, m, s, kappa) for m in config.methods for s in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    cells.sort(key=lambda c: (c.instance, METHODS.index(c.method), c.seed))

    rows = []
    files = []
    for c in cells:
        rec = c.record
        conv_time = None
        if rec is not None and rec.converged and config.record_wall_time:
            conv_time = rec.time_to_convergence_ms / 1000.0
        if c.method == "EXACT" and config.record_wall_time:
            conv_time = c.elapsed_s
        rows.append(
            {
                "method": c.method,
                "instance": c.instance,
                "seed": c.seed,
                "converged": True if rec is None else rec.converged,
                "convergence_time_s": conv_time,
                "episodes": None if rec is None else rec.episodes_to_convergence,
                "average_Q": c.average_Q,
                "oracle_average_V": oracle_avg,
                "pct_diff_vs_oracle": percent_diff(c.average_Q, oracle_avg),
                "eval_reward": c.eval_reward,
                "kappa": c.kappa,
                "timed_out": False if rec is None else rec.timed_out,
            }
        )
        if rec is not None:
            p = out / f"series_{c.instance}_{c.method}_seed{c.seed}.csv"
            p.write_text(rec.to_csv(header, wall_time=config.record_wall_time))
            files.append(p)

    pairs = []
    by_key = {(c.method, c.seed): c for c in cells}
    for base, dk in (("QL", "DKQL"), ("DDPG", "DKDDPG")):
        for seed in config.seeds:
            b, d = by_key.get((base, seed)), by_key.get((dk, seed))
            if b is None or d is None:
                continue
            metrics = {
                "average_Q": (b.average_Q, d.average_Q),
                "eval_reward": (b.eval_reward, d.eval_reward),
                "episodes": (
                    _episodes(b.record),
                    _episodes(d.record),
                ),
            }
            for metric, (bv, dv) in metrics.items():
                pairs.append(
                    {
                        "instance": name,
                        "seed": seed,
                        "metric": f"{dk}_vs_{base}:{metric}",
                        "base": bv,
                        "dk": dv,
                        "pct_change": percent_diff(dv, bv),
                    }
                )

    comp = out / "comparison.csv"
    _write_csv(comp, header, COMPARISON_COLUMNS, rows)
    pair_path = out / "pairs.csv"
    _write_csv(pair_path, header, PAIR_COLUMNS, pairs)
    files = [comp, pair_path] + files
    if plots:
        from .plotting import plot_comparison, plot_series

        files.append(plot_series(cells, out / "average_q.png", "avg_Q", oracle_avg))
        files.append(plot_series(cells, out / "episode_reward.png", "episode_reward"))
        files.append(plot_comparison(rows, out / "final_average_q.png"))
    timed_out = any(r["timed_out"] for r in rows)
    return ComparisonReport(rows, pairs, files, cells, timed_out)


def _episodes(record: Optional[RunRecord]) -> float:
    """Episodes to convergence, or NaN when the run never converged."""
    if record is None or not record.converged:
        return float("nan")
    return float(record.episodes_to_convergence)


def read_comparison(path) -> List[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def tiny_instance() -> ProblemInstance:
    """Two demand and two supply types, demands uniform on {0, 1, 2}, capacities 2."""
    return ProblemInstance(
        capacities=np.array([2, 2]),
        demand_pmfs=(np.full(3, 1 / 3), np.full(3, 1 / 3)),
        reward=np.array([[10.0, 7.0], [5.0, 8.0]]),
        gamma=0.9,
    )


@dataclass
class SuiteResult:
    seed: int
    final_distance: float
    early_distance: float
    distances: List[float]
    episodes: int

    @property
    def passed_bar(self) -> bool:
        return self.final_distance < 0.05

    @property
    def not_worse(self) -> bool:
        return self.final_distance <= self.early_distance


def convergence_suite(
    schedule: str,
    seeds: Sequence[int] = range(5),
    episodes: int = 3000,
    steps_per_episode: int = 500,
    beta: float = 50.0,
    kappa: float = 0.01,
    epsilon: float = 1.0,
    step_exponent: float = 0.85,
    divergence: str = "kl",
    instance: Optional[ProblemInstance] = None,
    n_checkpoints: int = 10,
) -> List[SuiteResult]:
    """Train DKQL per seed and measure ||Q - Q*||_inf / ||Q*||_inf at evenly spaced checkpoints.

    ``schedule`` is "fixed" (constant beta) or "linear" (beta_t = kappa * t).
    ``early_distance`` is the distance after 20% of the episodes.
    """
    instance = instance or tiny_instance()
    exact = stationary_value_iteration(instance)
    table0 = QTable(instance)
    q_star = [exact.q_row(x, a) for x, a in zip(table0.states, table0.actions)]
    scale = max(float(np.abs(q).max()) for q in q_star)
    beta_schedule = BetaSchedule.fixed(beta) if schedule == "fixed" else BetaSchedule.linear(kappa)
    cfg = LearningConfig(
        episodes=episodes,
        steps_per_episode=steps_per_episode,
        step_exponent=step_exponent,
        exploration=ConstantEpsilon(epsilon),
    )
    every = max(1, episodes // n_checkpoints)
    early_ep = max(1, round(0.2 * episodes))
    results = []
    for seed in seeds:
        dist = {}

        def probe(ep, table):
            if ep % every == 0 or ep == early_ep:
                dist[ep] = max(float(np.abs(v - q).max()) for v, q in zip(table.values, q_star)) / scale

        table, _ = train_tabular(
            instance,
            cfg,
            "DKQL",
            beta_schedule,
            None,
            np.random.default_rng(seed),
            spec=DivergenceSpec(divergence),
            on_episode=probe,
        )
        final = max(float(np.abs(v - q).max()) for v, q in zip(table.values, q_star)) / scale
        results.append(SuiteResult(seed, final, dist.get(early_ep, float("nan")), [dist[k] for k in sorted(dist)], episodes))
    return results
