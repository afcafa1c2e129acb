"""Regularization and exploration schedules shared by tabular and deep learners."""

from __future__ import annotations

from dataclasses import dataclass

HUGE_BETA = 1e12


@dataclass(frozen=True)
class BetaSchedule:
    """``fixed``: beta_t = beta. ``linear``: beta_t = kappa * t with t >= 1 the global step."""

    mode: str = "fixed"
    beta: float = HUGE_BETA
    kappa: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "linear"):
            raise ValueError(f"unknown beta schedule mode {self.mode!r}")
        if self.mode == "fixed" and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.mode == "linear" and not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("beta schedule is indexed from t = 1")
        if self.mode == "fixed":
            return self.beta
        return self.kappa * t

    @classmethod
    def fixed(cls, beta: float) -> "BetaSchedule":
        return cls("fixed", beta=beta)

    @classmethod
    def linear(cls, kappa: float) -> "BetaSchedule":
        return cls("linear", kappa=kappa)

    def to_dict(self) -> dict:
        if self.mode == "fixed":
            return {"mode": "fixed", "beta": self.beta}
        return {"mode": "linear", "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "BetaSchedule":
        return cls(d["mode"], beta=d.get("beta", HUGE_BETA), kappa=d.get("kappa", 1.0))


@dataclass(frozen=True)
class ExplorationSchedule:
    """epsilon(e) = max(floor, floor ** (e / horizon)); starts at 1 for e = 0."""

    floor: float = 0.1
    horizon: int = 300
    sigma: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError("epsilon floor must be in [0, 1]")
        if self.horizon < 1:
            raise ValueError("anneal horizon must be >= 1")

    def __call__(self, episode: int) -> float:
        return max(self.floor, self.floor ** (episode / self.horizon))

    def to_dict(self) -> dict:
        return {"floor": self.floor, "horizon": self.horizon, "sigma": self.sigma}


@dataclass(frozen=True)
class ConstantEpsilon:
    epsilon: float = 0.1
    sigma: float = 0.1

    def __call__(self, episode: int) -> float:
        return self.epsilon

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "sigma": self.sigma}
