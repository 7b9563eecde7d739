"""Trajectory logs, evaluation metrics and learning curves.

Every artifact is CSV.  Floats are written with ``repr`` so a log read back
reproduces the in-memory numbers exactly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hero.errors import MalformedLogError

TRAJECTORY_COLUMNS = ("episode", "step", "vehicle", "learner", "x", "y", "heading", "speed",
                      "option", "reward", "collided", "merge_start", "merge_done", "merge_fail")
_INT_COLUMNS = {"episode", "step", "vehicle", "learner", "option", "collided",
                "merge_start", "merge_done", "merge_fail"}
CURVE_COLUMNS = ("episode", "mean", "min", "max")
CURVE_METRICS = {"reward": "mean_reward", "collision": "collision", "success": "merge_success"}


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    """Deterministic CSV: fixed column order, ``\\n`` line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


@dataclass
class EvalReport:
    episodes: int
    mean_episode_reward: float
    collision_rate: float
    merge_success_rate: float
    mean_speed: float

    def as_dict(self) -> dict:
        return asdict(self)


def read_trajectory(path_or_text) -> list[dict]:
    """Parse a trajectory CSV; errors carry the 1-based line number."""
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = path_or_text
    lines = text.splitlines()
    if not lines or tuple(next(csv.reader([lines[0]]))) != TRAJECTORY_COLUMNS:
        raise MalformedLogError("missing or wrong header", line=1)
    rows = []
    for lineno, fields in enumerate(csv.reader(lines[1:]), start=2):
        if not fields:
            continue
        if len(fields) != len(TRAJECTORY_COLUMNS):
            raise MalformedLogError(f"expected {len(TRAJECTORY_COLUMNS)} fields, got {len(fields)}", line=lineno)
        row = {}
        for name, raw in zip(TRAJECTORY_COLUMNS, fields):
            try:
                row[name] = int(raw) if name in _INT_COLUMNS else float(raw)
            except ValueError:
                raise MalformedLogError(f"bad value {raw!r} for {name}", line=lineno) from None
            if name not in _INT_COLUMNS and not np.isfinite(row[name]):
                raise MalformedLogError(f"non-finite {name}", line=lineno)
        rows.append(row)
    return rows


def compute_metrics(rows: Sequence[dict]) -> EvalReport:
    """Metrics over complete episodes of trajectory rows.

    * mean episode reward: mean over all logged steps of the team reward,
      the per-step average of the learners' high-level rewards;
    * collision rate: episodes with any collision / episodes;
    * merge success rate: completed lane changes / lane-change initiations
      (0 when nothing was attempted);
    * mean speed: mean linear speed over steps and learning vehicles.
    """
    if not rows:
        raise MalformedLogError("no episodes in log")
    step_rewards: dict[tuple[int, int], list[float]] = {}
    collided: dict[int, bool] = {}
    starts = dones = 0
    speeds = []
    for r in rows:
        ep = r["episode"]
        collided[ep] = collided.get(ep, False) or bool(r["collided"])
        if not r["learner"]:
            continue
        step_rewards.setdefault((ep, r["step"]), []).append(r["reward"])
        speeds.append(r["speed"])
        starts += r["merge_start"]
        dones += r["merge_done"]
    team = [float(np.mean(v)) for _, v in sorted(step_rewards.items())]
    n_eps = len(collided)
    return EvalReport(
        episodes=n_eps,
        mean_episode_reward=float(np.mean(team)) if team else 0.0,
        collision_rate=sum(collided.values()) / n_eps,
        merge_success_rate=dones / starts if starts else 0.0,
        mean_speed=float(np.mean(speeds)) if speeds else 0.0,
    )


def episode_columns(learner_ids: Sequence[int]) -> tuple[str, ...]:
    return (("episode", "seed", "steps", "mean_reward")
            + tuple(f"reward_agent_{i}" for i in learner_ids)
            + ("collision", "merge_attempts", "merges", "merge_success", "mean_speed"))


def read_episode_log(path) -> list[dict]:
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            rows.append({k: float(v) for k, v in row.items()})
        except (TypeError, ValueError):
            raise MalformedLogError(f"bad row {row}", line=lineno) from None
    return rows


def windowed(values: Sequence[float], window: int = 100) -> list[dict]:
    """Trailing-window mean/min/max; the first ``window - 1`` points use what exists."""
    values = np.asarray(values, dtype=float)
    out = []
    for k in range(len(values)):
        chunk = values[max(0, k - window + 1):k + 1]
        out.append({"episode": k + 1, "mean": float(chunk.mean()),
                    "min": float(chunk.min()), "max": float(chunk.max())})
    return out


def emit_curves(episode_log, out_dir, window: int = 100) -> dict[str, Path]:
    """Write ``curve_reward.csv``, ``curve_collision.csv`` and ``curve_success.csv``."""
    rows = read_episode_log(episode_log) if isinstance(episode_log, (str, Path)) else list(episode_log)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, column in CURVE_METRICS.items():
        path = out_dir / f"curve_{name}.csv"
        write_csv(path, CURVE_COLUMNS, windowed([r[column] for r in rows], window))
        paths[name] = path
    return paths
