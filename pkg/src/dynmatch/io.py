"""JSON serialization for instances, Q-tables, networks and agent checkpoints."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Union

import numpy as np

from .ddpg import AgentPair
from .env import ProblemInstance
from .nn import Mlp, OptimizerState
from .tabular import QTable

FILE_PMF_TOL = 1e-6

PathLike = Union[str, Path]


class ValidationError(ValueError):
    """Input file content violates the documented schema."""


def instance_to_dict(instance: ProblemInstance) -> dict:
    return {
        "m": instance.m,
        "n": instance.n,
        "horizon_T": int(instance.horizon_T),
        "gamma": float(instance.gamma),
        "capacities": [int(c) for c in instance.capacities],
        "demand_pmfs": [[float(v) for v in p] for p in instance.demand_pmfs],
        "reward": [[float(v) for v in row] for row in instance.reward],
        "k1": float(instance.k1),
        "k2": float(instance.k2),
        "N_d": int(instance.N_d),
        "seed": instance.seed,
    }


def instance_from_dict(d: dict) -> ProblemInstance:
    try:
        pmfs = [np.asarray(p, dtype=float) for p in d["demand_pmfs"]]
        caps = d["capacities"]
        reward = d["reward"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"instance is missing a required field: {exc}") from exc
    for i, p in enumerate(pmfs):
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > FILE_PMF_TOL:
            raise ValidationError(f"demand pmf {i} does not sum to 1 within {FILE_PMF_TOL}")
    if any(not float(c).is_integer() for c in caps):
        raise ValidationError("capacities must be integers")
    # tolerated file-level rounding is removed before the strict in-memory check
    pmfs = [p / p.sum() for p in pmfs]
    if "m" in d and d["m"] != len(pmfs):
        raise ValidationError(f"m={d['m']} but {len(pmfs)} demand pmfs")
    if "n" in d and d["n"] != len(caps):
        raise ValidationError(f"n={d['n']} but {len(caps)} capacities")
    try:
        return ProblemInstance(
            capacities=np.asarray(caps, dtype=np.int64),
            demand_pmfs=tuple(pmfs),
            reward=np.asarray(reward, dtype=float),
            gamma=float(d.get("gamma", 0.9)),
            horizon_T=int(d.get("horizon_T", 0)),
            k1=d.get("k1"),
            k2=d.get("k2"),
            N_d=d.get("N_d"),
            seed=d.get("seed"),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def instance_hash(instance: ProblemInstance) -> str:
    return hashlib.sha256(canonical_json(instance_to_dict(instance)).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_json(obj, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def load_json(path: PathLike) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc


def save_instance(instance: ProblemInstance, path: PathLike) -> None:
    save_json(instance_to_dict(instance), path)


def load_instance(path: PathLike) -> ProblemInstance:
    return instance_from_dict(load_json(path))


def save_qtable(table: QTable, path: PathLike) -> None:
    save_json({"kind": "qtable", **table.to_dict()}, path)


def load_qtable(instance: ProblemInstance, path: PathLike) -> QTable:
    d = load_json(path)
    if d.get("m") != instance.m or d.get("N_d") != instance.N_d:
        raise ValidationError("Q-table does not match the instance shape")
    table = QTable(instance)
    table.load_dict(d)
    return table


def _opt_to_dict(opt: OptimizerState) -> dict:
    out = {k: getattr(opt, k) for k in ("kind", "lr", "beta1", "beta2", "eps", "step")}
    out["m"] = None if opt.m is None else opt.m.tolist()
    out["v"] = None if opt.v is None else opt.v.tolist()
    return out


def _opt_from_dict(d: dict) -> OptimizerState:
    opt = OptimizerState(d["kind"], d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"])
    if d.get("m") is not None:
        opt.m = np.asarray(d["m"], dtype=float)
        opt.v = np.asarray(d["v"], dtype=float)
    return opt


def agent_to_dict(agent: AgentPair, manifest: dict) -> dict:
    return {
        "kind": "agent",
        "manifest": {**manifest, "tau": agent.tau},
        "N_d": agent.N_d,
        "actor": agent.actor.to_dict(),
        "critic": agent.critic.to_dict(),
        "target_actor": agent.target_actor.to_dict(),
        "target_critic": agent.target_critic.to_dict(),
        "actor_opt": _opt_to_dict(agent.actor_opt),
        "critic_opt": _opt_to_dict(agent.critic_opt),
    }


def agent_from_dict(d: dict) -> AgentPair:
    return AgentPair(
        actor=Mlp.from_dict(d["actor"]),
        critic=Mlp.from_dict(d["critic"]),
        target_actor=Mlp.from_dict(d["target_actor"]),
        target_critic=Mlp.from_dict(d["target_critic"]),
        actor_opt=_opt_from_dict(d["actor_opt"]),
        critic_opt=_opt_from_dict(d["critic_opt"]),
        tau=float(d["manifest"]["tau"]),
        N_d=int(d["N_d"]),
    )


def save_agent(agent: AgentPair, manifest: dict, path: PathLike) -> None:
    save_json(agent_to_dict(agent, manifest), path)


def load_checkpoint(instance: ProblemInstance, path: PathLike):
    """Load either a Q-table or an agent checkpoint, returning the trained artifact."""
    d = load_json(path)
    kind = d.get("kind")
    if kind == "qtable":
        return load_qtable(instance, path)
    if kind == "agent":
        agent = agent_from_dict(d)
        want = d["manifest"].get("instance_hash")
        if want is not None and want != instance_hash(instance):
            raise ValidationError("checkpoint was trained on a different instance")
        return agent
    raise ValidationError(f"{path}: unknown checkpoint kind {kind!r}")
