"""Obstacle-aware waypoint prediction over 120x12 polar heatmaps.

Angle bin a covers [3a, 3a+3) degrees of relative heading; distance bin
d is centered at 0.25*(d+1) meters. Targets are Gaussian bumps around
graph neighbors; predictions come from a small windowed network over
per-sector panorama features, thinned by greedy non-maximum suppression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .nets import Adam, DivergenceError, uniform_init
from .seeds import substream
from .world import (
    OPEN,
    N_SECTORS,
    NavGraph,
    Panorama,
    Pose,
    SemanticGrid,
    bearing_deg,
    heading_vector,
)

N_ANGLE = 120
N_DIST = 12
ANGLE_STEP = 3.0
DIST_STEP = 0.25
MAX_RANGE = 3.0
BINS_PER_SECTOR = N_ANGLE // N_SECTORS

DEFAULT_OPEN_VOCAB = ("floor", "stairs", "door")


def bin_of(heading: float, distance: float) -> tuple[int, int]:
    """Quantize a relative (heading, distance) into heatmap bins."""
    if not (DIST_STEP - 1e-9 <= distance <= MAX_RANGE + 1e-9):
        raise ValueError(f"distance {distance} outside [{DIST_STEP}, {MAX_RANGE}]")
    a = int(math.floor((heading % 360.0) / ANGLE_STEP)) % N_ANGLE
    d = int(math.floor(distance / DIST_STEP + 0.5)) - 1
    return a, min(max(d, 0), N_DIST - 1)


def center_of(angle_bin: int, dist_bin: int) -> tuple[float, float]:
    return angle_bin * ANGLE_STEP + ANGLE_STEP / 2, DIST_STEP * (dist_bin + 1)


def circular_deg_diff(a: float, b: float) -> float:
    """Absolute circular difference of two angles in degrees, in [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


@dataclass
class Waypoint:
    heading: float  # degrees, relative to the agent
    distance: float  # meters
    dx: float  # Cartesian offset in the agent frame
    dy: float

    @classmethod
    def from_polar(cls, heading: float, distance: float) -> "Waypoint":
        ux, uy = heading_vector(heading)
        return cls(heading=heading, distance=distance, dx=distance * ux, dy=distance * uy)


def gt_heatmap(graph: NavGraph, node: tuple[float, float],
               kernel: tuple[float, float] = (15.0, 1.75)) -> np.ndarray:
    """Gaussian-bump target heatmap for the graph node at `node`.

    kernel = (sigma_angle degrees, sigma_dist meters); each neighbor
    contributes a separable bump (peak 1.0, truncated at 2 sigma,
    circular in angle) and bumps combine by elementwise max.
    """
    sigma_a, sigma_d = kernel
    idx = graph.nearest_node(node[0], node[1])
    if not np.allclose(graph.nodes[idx], node, atol=1e-6):
        raise ValueError(f"position {node} is not a graph node")
    hm = np.zeros((N_ANGLE, N_DIST))
    angle_centers = np.arange(N_ANGLE) * ANGLE_STEP + ANGLE_STEP / 2
    dist_centers = DIST_STEP * (np.arange(N_DIST) + 1)
    for j in graph.neighbors(idx):
        off = graph.nodes[j] - graph.nodes[idx]
        dist = float(np.hypot(*off))
        a0, d0 = bin_of(bearing_deg(off[0], off[1]), dist)
        ca, cd = center_of(a0, d0)
        da = np.abs(angle_centers - ca)
        da = np.minimum(da, 360.0 - da)
        dd = np.abs(dist_centers - cd)
        bump_a = np.where(da <= 2 * sigma_a, np.exp(-(da ** 2) / (2 * sigma_a ** 2)), 0.0)
        bump_d = np.where(dd <= 2 * sigma_d, np.exp(-(dd ** 2) / (2 * sigma_d ** 2)), 0.0)
        hm = np.maximum(hm, np.outer(bump_a, bump_d))
    return hm


def neighbor_waypoints(graph: NavGraph, node: tuple[float, float]) -> list[Waypoint]:
    """The node's graph neighbors as relative waypoints (canonical heading 0)."""
    idx = graph.nearest_node(node[0], node[1])
    out = []
    for j in graph.neighbors(idx):
        off = graph.nodes[j] - graph.nodes[idx]
        out.append(Waypoint.from_polar(bearing_deg(off[0], off[1]), float(np.hypot(*off))))
    return out


# ---------------------------------------------------------------------------
# Obstacle masking and panorama features


def obstacle_mask(panorama: Panorama, open_vocab) -> np.ndarray:
    """Per-ray binary mask: 1 iff the hit is in the open-area vocabulary.

    Rays clamped at max range (OPEN) always count as open; rays that left
    the grid never do.
    """
    vocab = set(open_vocab)
    known = set(panorama.legend_names.values()) | {"OPEN"}
    unknown = vocab - known
    if unknown:
        raise ValueError(f"open vocabulary names not in legend: {sorted(unknown)}")
    mask = np.zeros_like(panorama.hit, dtype=np.uint8)
    for cid, name in panorama.legend_names.items():
        if name in vocab:
            mask[panorama.hit == cid] = 1
    mask[panorama.hit == OPEN] = 1
    return mask


def feature_class_ids(legend_names: dict[int, str]) -> list[int]:
    """Class-id columns of the feature histogram (sorted ids, then OPEN)."""
    return sorted(legend_names) + [OPEN]


def features(panorama: Panorama, mask: np.ndarray) -> np.ndarray:
    """Per-angle-bin panorama features, (120, F).

    Each sector's rays are summarized into [masked openness ratio,
    min depth, mean depth, class histogram over masked first hits] and
    the row is broadcast to the sector's 10 angle bins. Depth features
    are divided by max range; the histogram counts only rays with m=1,
    normalized by rays per sector.
    """
    if mask.shape != panorama.hit.shape:
        raise ValueError("mask shape does not match panorama")
    ids = feature_class_ids(panorama.legend_names)
    r = panorama.rays_per_sector
    rows = np.zeros((N_SECTORS, 3 + len(ids)))
    for s in range(N_SECTORS):
        m = mask[s].astype(float)
        rows[s, 0] = m.mean()
        rows[s, 1] = panorama.depth[s].min() / panorama.max_range
        rows[s, 2] = panorama.depth[s].mean() / panorama.max_range
        for c, cid in enumerate(ids):
            rows[s, 3 + c] = np.count_nonzero((panorama.hit[s] == cid) & (mask[s] == 1)) / r
    return np.repeat(rows, BINS_PER_SECTOR, axis=0)


# ---------------------------------------------------------------------------
# Predictor network: shared two-layer net over a circular window of angle bins


@dataclass
class PredictorParams:
    w1: np.ndarray  # (hidden, window*F)
    b1: np.ndarray
    w2: np.ndarray  # (12, hidden)
    b2: np.ndarray
    window: int
    n_features: int

    @classmethod
    def init(cls, n_features: int, hidden: int = 64, window: int = 5,
             seed: int = 0) -> "PredictorParams":
        rng = substream(seed, "init/predictor")
        fan1 = window * n_features
        return cls(
            w1=uniform_init(rng, (hidden, fan1), fan1),
            b1=uniform_init(rng, (hidden,), fan1),
            w2=uniform_init(rng, (N_DIST, hidden), hidden),
            b2=uniform_init(rng, (N_DIST,), hidden),
            window=window,
            n_features=n_features,
        )

    def check_finite(self) -> None:
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite predictor parameter")

    def to_json(self) -> str:
        doc = {
            "window": self.window,
            "n_features": self.n_features,
            "shapes": {k: list(getattr(self, k).shape) for k in ("w1", "b1", "w2", "b2")},
            "weights": {k: getattr(self, k).reshape(-1).tolist() for k in ("w1", "b1", "w2", "b2")},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "PredictorParams":
        doc = json.loads(text)
        arrays = {
            k: np.array(doc["weights"][k], dtype=float).reshape(doc["shapes"][k])
            for k in ("w1", "b1", "w2", "b2")
        }
        return cls(window=int(doc["window"]), n_features=int(doc["n_features"]), **arrays)


def _windows(feats: np.ndarray, window: int) -> np.ndarray:
    """Circularly windowed angle-bin rows, (120, window*F)."""
    half = window // 2
    idx = (np.arange(N_ANGLE)[:, None] + np.arange(-half, half + 1)[None, :]) % N_ANGLE
    return feats[idx].reshape(N_ANGLE, -1)


def predict_heatmap(params: PredictorParams, feats: np.ndarray) -> np.ndarray:
    """Sigmoid scores per bin, (120, 12); deterministic in the inputs."""
    params.check_finite()
    if feats.shape != (N_ANGLE, params.n_features):
        raise ValueError(f"feature shape {feats.shape} incompatible with predictor")
    x = _windows(feats, params.window)
    h = np.tanh(x @ params.w1.T + params.b1)
    logits = h @ params.w2.T + params.b2
    return 1.0 / (1.0 + np.exp(-logits))


# ---------------------------------------------------------------------------
# NMS sampling


def nms_sample(hm: np.ndarray, k: int = 5, r_angle: float = 30.0,
               r_dist: float = 0.75, tau: float = 0.35) -> list[Waypoint]:
    """Greedy peak extraction: take the global max bin >= tau, emit its
    center, zero every bin within both suppression radii, repeat."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hm = np.array(hm, dtype=float, copy=True)
    angle_centers = np.arange(N_ANGLE) * ANGLE_STEP + ANGLE_STEP / 2
    dist_centers = DIST_STEP * (np.arange(N_DIST) + 1)
    out: list[Waypoint] = []
    while len(out) < k:
        flat = int(np.argmax(hm))
        a, d = divmod(flat, N_DIST)
        if hm[a, d] < tau:
            break
        heading, distance = center_of(a, d)
        out.append(Waypoint.from_polar(heading, distance))
        da = np.abs(angle_centers - angle_centers[a])
        da = np.minimum(da, 360.0 - da)
        dd = np.abs(dist_centers - dist_centers[d])
        hm[np.ix_(da < r_angle, dd < r_dist)] = 0.0
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class PredictorHyper:
    lr: float = 3e-3
    epochs: int = 150
    hidden: int = 64
    window: int = 5
    seed: int = 0


def predictor_loss_and_grads(params: PredictorParams, x: np.ndarray,
                             targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-bin squared error over a batch of windowed inputs.

    x: (B, window*F) stacked windowed rows; targets: (B, 12).
    """
    h = np.tanh(x @ params.w1.T + params.b1)
    logits = h @ params.w2.T + params.b2
    scores = 1.0 / (1.0 + np.exp(-logits))
    err = scores - targets
    loss = float(np.mean(err ** 2))
    dlogits = 2.0 * err * scores * (1.0 - scores) / err.size
    grads = {
        "w2": dlogits.T @ h,
        "b2": dlogits.sum(axis=0),
    }
    dh = dlogits @ params.w2
    dz = dh * (1.0 - h * h)
    grads["w1"] = dz.T @ x
    grads["b1"] = dz.sum(axis=0)
    return loss, grads


def train_predictor(corpus: list[tuple[np.ndarray, np.ndarray]],
                    hyper: PredictorHyper = PredictorHyper()) -> tuple[PredictorParams, list[float]]:
    """Full-batch Adam on per-bin MSE against the Gaussian targets.

    Returns the trained parameters and the per-epoch training loss trace.
    Deterministic given the seed.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    n_features = corpus[0][0].shape[1]
    params = PredictorParams.init(n_features, hidden=hyper.hidden,
                                  window=hyper.window, seed=hyper.seed)
    x = np.concatenate([_windows(f, hyper.window) for f, _ in corpus], axis=0)
    t = np.concatenate([hm for _, hm in corpus], axis=0)
    opt = Adam(lr=hyper.lr)
    arrays = {"w1": params.w1, "b1": params.b1, "w2": params.w2, "b2": params.b2}
    losses: list[float] = []
    for _ in range(hyper.epochs):
        loss, grads = predictor_loss_and_grads(params, x, t)
        if not math.isfinite(loss):
            raise DivergenceError(f"predictor training diverged at epoch {len(losses)}")
        losses.append(loss)
        opt.step(arrays, grads)
    return params, losses


# ---------------------------------------------------------------------------
# Waypoint-set evaluation


@dataclass
class WaypointEvalReport:
    delta: float  # mean |#pred - #target| per panorama
    pct_open: float  # fraction of predicted waypoints on traversable cells
    d_c: float  # mean symmetric Chamfer distance (meters)
    d_h: float  # mean Hausdorff distance (meters)

    def to_json(self) -> str:
        return json.dumps({"delta": self.delta, "pct_open": self.pct_open,
                           "d_C": self.d_c, "d_H": self.d_h})


def _set_distances(pred: list[Waypoint], target: list[Waypoint]) -> tuple[float, float]:
    if not pred or not target:
        return MAX_RANGE, MAX_RANGE
    p = np.array([[w.dx, w.dy] for w in pred])
    t = np.array([[w.dx, w.dy] for w in target])
    d = np.hypot(p[:, 0:1] - t[None, :, 0], p[:, 1:2] - t[None, :, 1])
    d_pt = d.min(axis=1)
    d_tp = d.min(axis=0)
    chamfer = 0.5 * (d_pt.mean() + d_tp.mean())
    hausdorff = max(d_pt.max(), d_tp.max())
    return float(chamfer), float(hausdorff)


def eval_waypoints(pred_sets: list[list[Waypoint]], target_sets: list[list[Waypoint]],
                   grid: SemanticGrid, poses: list[Pose]) -> WaypointEvalReport:
    """Waypoint-set metrics over aligned per-panorama prediction/target lists."""
    if not (len(pred_sets) == len(target_sets) == len(poses)):
        raise ValueError("pred/target/pose lists are misaligned")
    deltas = []
    chamfers = []
    hausdorffs = []
    n_open = 0
    n_pred = 0
    for pred, target, pose in zip(pred_sets, target_sets, poses):
        deltas.append(abs(len(pred) - len(target)))
        c, h = _set_distances(pred, target)
        chamfers.append(c)
        hausdorffs.append(h)
        for w in pred:
            ux, uy = heading_vector(pose.heading + w.heading)
            n_open += int(grid.is_traversable(pose.x + w.distance * ux,
                                              pose.y + w.distance * uy))
            n_pred += 1
    return WaypointEvalReport(
        delta=float(np.mean(deltas)),
        pct_open=(n_open / n_pred) if n_pred else 0.0,
        d_c=float(np.mean(chamfers)),
        d_h=float(np.mean(hausdorffs)),
    )
