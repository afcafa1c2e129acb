"""Per-episode run records and convergence detection."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

COLUMNS = (
    "episode",
    "steps",
    "avg_Q",
    "episode_reward",
    "infeasible_action_count",
    "beta",
    "epsilon",
    "wall_ms",
)


@dataclass
class EpisodeRow:
    episode: int
    steps: int
    avg_Q: float
    episode_reward: float
    infeasible_action_count: int
    beta: float
    epsilon: float
    wall_ms: float


@dataclass
class RunRecord:
    method: str
    rows: List[EpisodeRow] = field(default_factory=list)
    converged: bool = False
    episodes_to_convergence: Optional[int] = None
    time_to_convergence_ms: Optional[float] = None
    timed_out: bool = False

    def append(self, row: EpisodeRow) -> None:
        if self.rows and row.episode <= self.rows[-1].episode:
            raise ValueError("episode indices must be strictly increasing")
        self.rows.append(row)

    def metric_series(self) -> List[float]:
        return [r.avg_Q for r in self.rows]

    def deterministic_rows(self) -> List[tuple]:
        """Rows without the wall-clock column, for replay comparisons."""
        return [
            tuple(v for k, v in asdict(r).items() if k != "wall_ms") for r in self.rows
        ]

    def to_csv(self, header_comment: Optional[str] = None, wall_time: bool = True) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            d = asdict(r)
            if not wall_time:
                d["wall_ms"] = ""
            w.writerow([_fmt(d[c]) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, method: str = "") -> "RunRecord":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rec = cls(method)
        for d in csv.DictReader(lines):
            rec.append(
                EpisodeRow(
                    episode=int(d["episode"]),
                    steps=int(d["steps"]),
                    avg_Q=float(d["avg_Q"]),
                    episode_reward=float(d["episode_reward"]),
                    infeasible_action_count=int(d["infeasible_action_count"]),
                    beta=float(d["beta"]),
                    epsilon=float(d["epsilon"]),
                    wall_ms=float(d["wall_ms"]) if d["wall_ms"] else float("nan"),
                )
            )
        return rec


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def convergence_detector(
    values: Sequence[float],
    threshold: float,
    spacing: int = 10,
    window: int = 3,
) -> Tuple[bool, Optional[int]]:
    """Detect convergence of a per-episode metric.

    The metric is sampled every ``spacing`` episodes (checkpoint k is episode
    ``(k + 1) * spacing``). Convergence is declared at the first checkpoint
    whose relative change, and that of the ``window - 1`` checkpoints before
    it, are all below ``threshold``. Returns ``(converged, episode)`` where
    ``episode`` is 1-based.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    checkpoints = [values[e - 1] for e in range(spacing, len(values) + 1, spacing)]
    run = 0
    for k in range(1, len(checkpoints)):
        prev, cur = checkpoints[k - 1], checkpoints[k]
        if prev == cur:
            change = 0.0
        elif prev == 0.0:
            change = float("inf")
        else:
            change = abs(cur - prev) / abs(prev)
        run = run + 1 if change < threshold else 0
        if run >= window:
            return True, (k + 1) * spacing
    return False, None


def convergence_checkpoint(values: Sequence[float], threshold: float, spacing: int = 10, window: int = 3):
    """Checkpoint index (0-based) at which convergence is declared, or None."""
    ok, ep = convergence_detector(values, threshold, spacing, window)
    return ep // spacing - 1 if ok else None
