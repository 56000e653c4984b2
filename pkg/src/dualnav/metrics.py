"""Trajectory-level evaluation: success, SPL, nDTW, aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class EpisodeResult:
    episode_id: str
    success: bool
    path_length: float
    shortest_path: float
    ndtw: float
    spl: float
    mode: str  # "high" | "low"

    def to_json(self) -> str:
        return json.dumps({
            "episode_id": self.episode_id,
            "success": self.success,
            "path_length": self.path_length,
            "shortest_path": self.shortest_path,
            "ndtw": self.ndtw,
            "spl": self.spl,
            "mode": self.mode,
        })

    @classmethod
    def from_json(cls, line: str) -> "EpisodeResult":
        d = json.loads(line)
        return cls(episode_id=d["episode_id"], success=bool(d["success"]),
                   path_length=float(d["path_length"]),
                   shortest_path=float(d["shortest_path"]),
                   ndtw=float(d["ndtw"]), spl=float(d["spl"]), mode=d["mode"])


def path_length(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(np.hypot(*np.diff(points, axis=0).T).sum())


def success(final_position, goal, d_th: float) -> bool:
    """Closed threshold: exactly d_th away still counts."""
    fx, fy = final_position
    gx, gy = goal
    return math.hypot(fx - gx, fy - gy) <= d_th


def spl(succeeded: bool, length: float, shortest: float) -> float:
    """Success weighted by (shortest / max(actual, shortest)) path length."""
    if shortest <= 0.0:
        return float(succeeded)
    return float(succeeded) * shortest / max(length, shortest)


def dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Dynamic-time-warping alignment cost with Euclidean point distance."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("paths must be non-empty")
    n, m = len(a), len(b)
    cost = np.full((n + 1, m + 1), np.inf)
    cost[0, 0] = 0.0
    pair = np.hypot(a[:, 0:1] - b[None, :, 0], a[:, 1:2] - b[None, :, 1])
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = pair[i - 1, j - 1] + min(cost[i - 1, j],
                                                  cost[i, j - 1],
                                                  cost[i - 1, j - 1])
    return float(cost[n, m])


def ndtw(traj: np.ndarray, reference: np.ndarray, d_th: float) -> float:
    """exp(-DTW / (|reference| * d_th)); 1.0 for identical paths."""
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    return float(math.exp(-dtw(traj, ref) / (len(ref) * d_th)))


def aggregate(results: list[EpisodeResult]) -> list[dict]:
    """Per-mode means of SR/SPL/nDTW, sorted by mode name."""
    if not results:
        raise ValueError("no results to aggregate")
    out = []
    for mode in sorted({r.mode for r in results}):
        rs = [r for r in results if r.mode == mode]
        out.append({
            "mode": mode,
            "SR": float(np.mean([r.success for r in rs])),
            "SPL": float(np.mean([r.spl for r in rs])),
            "nDTW": float(np.mean([r.ndtw for r in rs])),
            "n_episodes": len(rs),
        })
    return out


def format_summary(summaries: list[dict]) -> str:
    """Two-decimal display table mirroring the usual nDTW/SR/SPL layout."""
    lines = [f"{'mode':<6} {'nDTW':>6} {'SR':>6} {'SPL':>6} {'n':>5}"]
    for s in summaries:
        lines.append(f"{s['mode']:<6} {s['nDTW']:>6.2f} {s['SR']:>6.2f} "
                     f"{s['SPL']:>6.2f} {s['n_episodes']:>5d}")
    return "\n".join(lines)
