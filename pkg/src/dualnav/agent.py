"""Dual-level navigation agent.

High level: a scorer ranks candidate waypoints against an instruction
context and a running history. Low level: an autoregressive token
decoder, conditioned on the scorer's step context, generates the
turn/forward sequence reaching the selected waypoint. Both are trained
jointly: teacher-forced cross-entropy plus an advantage-weighted term on
sampled actions for the high level, token cross-entropy for the low
level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .actions import (
    Action,
    MAX_SEQ_LEN,
    compile_waypoint,
    execute_sequence,
    label_low_sequence,
    reduce_heading,
    render_tokens,
)
from .nets import Adam, DivergenceError, softmax, uniform_init
from .seeds import substream
from .waypoint import (
    DEFAULT_OPEN_VOCAB,
    MAX_RANGE,
    PredictorParams,
    Waypoint,
    features,
    feature_class_ids,
    nms_sample,
    obstacle_mask,
    predict_heatmap,
)
from .world import (
    N_SECTORS,
    Episode,
    NavGraph,
    Panorama,
    Pose,
    SemanticGrid,
    bearing_deg,
    geodesic_distance,
    heading_vector,
    raycast_panorama,
)

BOS = 5  # decoder-only token; emissions are Action values 0..4
N_EMIT = 5


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.75  # IL/RL mixture weight
    epochs: int = 60
    seed: int = 0
    beam: int = 3
    max_decode_len: int = 30
    max_high_steps: int = 15
    max_low_actions: int = 200
    d_th: float = 3.0
    lr: float = 1e-3
    discount: float = 0.9
    waypoints: str = "gt"  # "gt" | "predictor"
    open_vocab: tuple[str, ...] = DEFAULT_OPEN_VOCAB
    ctx_dim: int = 64
    hidden: int = 64
    dec_state: int = 64

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam, "epochs": self.epochs, "seed": self.seed,
            "beam": self.beam, "max_decode_len": self.max_decode_len,
            "max_high_steps": self.max_high_steps,
            "max_low_actions": self.max_low_actions, "d_th": self.d_th,
            "lr": self.lr, "discount": self.discount,
            "waypoints": self.waypoints, "open_vocab": list(self.open_vocab),
            "ctx_dim": self.ctx_dim, "hidden": self.hidden,
            "dec_state": self.dec_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lam"] = d.pop("lambda", d.get("lam", 0.75))
        d["open_vocab"] = tuple(d.get("open_vocab", DEFAULT_OPEN_VOCAB))
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ScorerParams:
    instr: np.ndarray  # (V, E) instruction token embeddings
    stop: np.ndarray  # (D,) learned stop-candidate embedding
    phi_w: np.ndarray  # (D, F) candidate featurizer
    phi_b: np.ndarray
    psi_w1: np.ndarray  # (H, E + 2D) context network
    psi_b1: np.ndarray
    psi_w2: np.ndarray  # (D, H)
    psi_b2: np.ndarray
    low_w: np.ndarray  # (4, D) baseline single-action head
    low_b: np.ndarray
    vocab: list[str]  # instruction vocabulary, index = token id

    @classmethod
    def init(cls, vocab: list[str], n_features: int, emb_dim: int = 32,
             ctx_dim: int = 64, hidden: int = 64, seed: int = 0) -> "ScorerParams":
        rng = substream(seed, "init/scorer")
        zin = emb_dim + 2 * ctx_dim
        return cls(
            instr=uniform_init(rng, (len(vocab), emb_dim), emb_dim),
            stop=uniform_init(rng, (ctx_dim,), ctx_dim),
            phi_w=uniform_init(rng, (ctx_dim, n_features), n_features),
            phi_b=uniform_init(rng, (ctx_dim,), n_features),
            psi_w1=uniform_init(rng, (hidden, zin), zin),
            psi_b1=uniform_init(rng, (hidden,), zin),
            psi_w2=uniform_init(rng, (ctx_dim, hidden), hidden),
            psi_b2=uniform_init(rng, (ctx_dim,), hidden),
            low_w=uniform_init(rng, (4, ctx_dim), ctx_dim),
            low_b=uniform_init(rng, (4,), ctx_dim),
            vocab=list(vocab),
        )

    ARRAYS = ("instr", "stop", "phi_w", "phi_b", "psi_w1", "psi_b1",
              "psi_w2", "psi_b2", "low_w", "low_b")

    def params(self, prefix: str = "scorer/") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in self.ARRAYS}

    @property
    def ctx_dim(self) -> int:
        return self.stop.shape[0]

    def token_ids(self, tokens: list[str]) -> list[int]:
        index = {t: i for i, t in enumerate(self.vocab)}
        return [index[t] for t in tokens if t in index]


@dataclass
class DecoderParams:
    tok: np.ndarray  # (6, Ed) embeddings for LEFT/RIGHT/FORWARD/STOP/END/BOS
    win_w: np.ndarray  # (S, D) context -> initial state
    win_b: np.ndarray
    upd_w: np.ndarray  # (S, S + Ed) state update
    upd_b: np.ndarray
    out_w: np.ndarray  # (5, S) emission head
    out_b: np.ndarray

    @classmethod
    def init(cls, ctx_dim: int = 64, state_dim: int = 64, emb_dim: int = 32,
             seed: int = 0) -> "DecoderParams":
        rng = substream(seed, "init/decoder")
        zin = state_dim + emb_dim
        return cls(
            tok=uniform_init(rng, (6, emb_dim), emb_dim),
            win_w=uniform_init(rng, (state_dim, ctx_dim), ctx_dim),
            win_b=uniform_init(rng, (state_dim,), ctx_dim),
            upd_w=uniform_init(rng, (state_dim, zin), zin),
            upd_b=uniform_init(rng, (state_dim,), zin),
            out_w=uniform_init(rng, (N_EMIT, state_dim), state_dim),
            out_b=uniform_init(rng, (N_EMIT,), state_dim),
        )

    ARRAYS = ("tok", "win_w", "win_b", "upd_w", "upd_b", "out_w", "out_b")

    def params(self, prefix: str = "decoder/") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in self.ARRAYS}

    def check_finite(self) -> None:
        for k in self.ARRAYS:
            if not np.all(np.isfinite(getattr(self, k))):
                raise ValueError(f"non-finite decoder parameter {k}")


@dataclass
class AgentParams:
    scorer: ScorerParams
    decoder: DecoderParams
    config: TrainConfig
    seed: int

    def params(self) -> dict[str, np.ndarray]:
        out = self.scorer.params()
        out.update(self.decoder.params())
        return out

    def to_json(self) -> str:
        def arrays(obj, names):
            return {k: getattr(obj, k).reshape(-1).tolist() for k in names}

        def shapes(obj, names):
            return {k: list(getattr(obj, k).shape) for k in names}

        doc = {
            "scorer": {"shapes": shapes(self.scorer, ScorerParams.ARRAYS),
                       "weights": arrays(self.scorer, ScorerParams.ARRAYS),
                       "vocab": self.scorer.vocab},
            "decoder": {"shapes": shapes(self.decoder, DecoderParams.ARRAYS),
                        "weights": arrays(self.decoder, DecoderParams.ARRAYS)},
            "config": self.config.to_dict(),
            "seed": self.seed,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AgentParams":
        doc = json.loads(text)

        def restore(section, names):
            return {k: np.array(section["weights"][k], dtype=float).reshape(section["shapes"][k])
                    for k in names}

        scorer = ScorerParams(vocab=list(doc["scorer"]["vocab"]),
                              **restore(doc["scorer"], ScorerParams.ARRAYS))
        decoder = DecoderParams(**restore(doc["decoder"], DecoderParams.ARRAYS))
        return cls(scorer=scorer, decoder=decoder,
                   config=TrainConfig.from_dict(doc["config"]), seed=int(doc["seed"]))


# ---------------------------------------------------------------------------
# Candidates and scorer state


@dataclass
class CandidateSet:
    """Stop-candidate at index 0 plus one row per real candidate."""

    feats: np.ndarray  # (n_real, F)
    waypoints: list[Waypoint]  # relative to the agent
    world: np.ndarray  # (n_real, 2) absolute positions

    @property
    def n(self) -> int:
        return len(self.waypoints) + 1


def _candidate_rows(panorama: Panorama, mask: np.ndarray,
                    waypoints: list[Waypoint], pose: Pose) -> CandidateSet:
    ids = feature_class_ids(panorama.legend_names)
    sector_rows = np.zeros((N_SECTORS, 3 + len(ids)))
    r = panorama.rays_per_sector
    for s in range(N_SECTORS):
        sector_rows[s, 0] = mask[s].astype(float).mean()
        sector_rows[s, 1] = panorama.depth[s].min() / panorama.max_range
        sector_rows[s, 2] = panorama.depth[s].mean() / panorama.max_range
        for c, cid in enumerate(ids):
            sector_rows[s, 3 + c] = np.count_nonzero(
                (panorama.hit[s] == cid) & (mask[s] == 1)) / r
    feats = np.zeros((len(waypoints), 3 + sector_rows.shape[1]))
    world = np.zeros((len(waypoints), 2))
    for i, w in enumerate(waypoints):
        rel = w.heading % 360.0
        sector = int(math.floor((rel + 15.0) / 30.0)) % N_SECTORS
        feats[i, 0] = math.sin(math.radians(rel))
        feats[i, 1] = math.cos(math.radians(rel))
        feats[i, 2] = min(w.distance, MAX_RANGE) / MAX_RANGE
        feats[i, 3:] = sector_rows[sector]
        ux, uy = heading_vector(pose.heading + w.heading)
        world[i] = (pose.x + w.distance * ux, pose.y + w.distance * uy)
    return CandidateSet(feats=feats, waypoints=waypoints, world=world)


def candidate_features(panorama: Panorama, mask: np.ndarray,
                       waypoints: list[Waypoint], pose: Pose) -> CandidateSet:
    """Feature rows for waypoint candidates (stop-candidate is implicit)."""
    return _candidate_rows(panorama, mask, waypoints, pose)


def sector_candidates(panorama: Panorama, mask: np.ndarray, pose: Pose) -> CandidateSet:
    """Waypoint-free candidate pool: one pseudo-candidate per sector.

    Used in low-level mode, where the waypoint predictor is not loaded;
    each sector contributes its center bearing and clamped minimum depth.
    """
    wps = []
    for s in range(N_SECTORS):
        depth = float(panorama.depth[s].min())
        d = min(max(depth, 0.25), MAX_RANGE)
        wps.append(Waypoint.from_polar(s * 30.0, d))
    return _candidate_rows(panorama, mask, wps, pose)


def candidate_feature_dim(n_legend_classes: int) -> int:
    # sin/cos/dist + sector openness/min/mean + class histogram (+OPEN)
    return 3 + 3 + n_legend_classes + 1


@dataclass
class ScorerState:
    instr_ids: list[int]
    instr_ctx: np.ndarray  # mean instruction embedding
    hist: np.ndarray  # exact mean of committed step contexts
    h: np.ndarray | None = None  # current step context
    _hist_sum: np.ndarray = field(default=None, repr=False)
    _hist_n: int = 0

    @classmethod
    def init(cls, params: ScorerParams, instruction: list[str]) -> "ScorerState":
        ids = params.token_ids(instruction)
        ctx = params.instr[ids].mean(axis=0) if ids else np.zeros(params.instr.shape[1])
        d = params.ctx_dim
        return cls(instr_ids=ids, instr_ctx=ctx, hist=np.zeros(d),
                   _hist_sum=np.zeros(d), _hist_n=0)

    def push_history(self) -> None:
        """Fold the current step context into the running-mean history."""
        if self.h is None:
            return
        self._hist_sum = self._hist_sum + self.h
        self._hist_n += 1
        self.hist = self._hist_sum / self._hist_n


def score_candidates(params: ScorerParams, cands: CandidateSet,
                     state: ScorerState) -> tuple[np.ndarray, dict]:
    """Probability over [stop] + candidates; sets state.h to the step context."""
    emb_real = np.tanh(cands.feats @ params.phi_w.T + params.phi_b)
    emb = np.vstack([params.stop[None, :], emb_real]) if len(emb_real) else params.stop[None, :]
    pooled = emb.mean(axis=0)
    z = np.concatenate([state.instr_ctx, state.hist, pooled])
    a1 = np.tanh(params.psi_w1 @ z + params.psi_b1)
    c = params.psi_w2 @ a1 + params.psi_b2
    logits = emb @ c
    p = softmax(logits)
    state.h = c
    cache = {"feats": cands.feats, "emb_real": emb_real, "emb": emb, "z": z,
             "a1": a1, "c": c, "p": p, "instr_ids": state.instr_ids}
    return p, cache


def scorer_backward(params: ScorerParams, cache: dict, dlogits: np.ndarray,
                    dh_extra: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a step loss given d(loss)/d(logits) and optional extra
    gradient flowing into the step context (from the low-level decoder)."""
    emb = cache["emb"]
    n = emb.shape[0]
    dc = emb.T @ dlogits
    if dh_extra is not None:
        dc = dc + dh_extra
    demb = np.outer(dlogits, cache["c"])
    g: dict[str, np.ndarray] = {}
    g["scorer/psi_w2"] = np.outer(dc, cache["a1"])
    g["scorer/psi_b2"] = dc
    da1 = params.psi_w2.T @ dc
    dz1 = da1 * (1.0 - cache["a1"] ** 2)
    g["scorer/psi_w1"] = np.outer(dz1, cache["z"])
    g["scorer/psi_b1"] = dz1
    dz = params.psi_w1.T @ dz1
    e = params.instr.shape[1]
    d = params.stop.shape[0]
    d_instr_ctx = dz[:e]
    d_pooled = dz[e + d:]
    demb = demb + d_pooled[None, :] / n
    g["scorer/stop"] = demb[0]
    g["scorer/instr"] = np.zeros_like(params.instr)
    ids = cache["instr_ids"]
    if ids:
        np.add.at(g["scorer/instr"], np.asarray(ids, dtype=int), d_instr_ctx / len(ids))
    if n > 1:
        dpre = demb[1:] * (1.0 - cache["emb_real"] ** 2)
        g["scorer/phi_w"] = dpre.T @ cache["feats"]
        g["scorer/phi_b"] = dpre.sum(axis=0)
    else:
        g["scorer/phi_w"] = np.zeros_like(params.phi_w)
        g["scorer/phi_b"] = np.zeros_like(params.phi_b)
    return g


def classify_low_baseline(params: ScorerParams, state: ScorerState) -> np.ndarray:
    """Single-action 4-way head on the step context (comparison baseline)."""
    if state.h is None:
        raise ValueError("no step context; call score_candidates first")
    return softmax(params.low_w @ state.h + params.low_b)


# ---------------------------------------------------------------------------
# Teacher


REACH = 0.75  # a path node counts as visited within this geodesic radius


def advance_progress(grid: SemanticGrid, gt_path: list[tuple[float, float]],
                     pose: Pose, progress: int, reach: float = REACH) -> int:
    """Monotone pointer into gt_path: skip nodes already within reach."""
    while (progress < len(gt_path) - 1
           and geodesic_distance(grid, (pose.x, pose.y), gt_path[progress]) <= reach):
        progress += 1
    return progress


def next_path_node(grid: SemanticGrid, gt_path: list[tuple[float, float]],
                   pose: Pose, reach: float = REACH) -> tuple[float, float]:
    """First not-yet-reached node of the (remaining) ground-truth path."""
    j = advance_progress(grid, gt_path, pose, 0, reach)
    return gt_path[j]


def teacher_action(grid: SemanticGrid, gt_path: list[tuple[float, float]],
                   pose: Pose, cands: CandidateSet, d_th: float = 3.0) -> int:
    """Index of the candidate geodesically closest to the next unvisited
    path node; 0 (stop) once the goal is within the success threshold or
    nothing is reachable. Callers tracking progress pass the path suffix."""
    if not gt_path:
        raise ValueError("empty ground-truth path")
    goal = gt_path[-1]
    if math.hypot(pose.x - goal[0], pose.y - goal[1]) <= d_th:
        return 0
    if not cands.waypoints:
        return 0
    target = next_path_node(grid, gt_path, pose)
    dists = []
    for wx, wy in cands.world:
        ix, iy = grid.cell_of(wx, wy)
        if not grid.in_bounds(ix, iy):
            dists.append(math.inf)
        else:
            dists.append(geodesic_distance(grid, (wx, wy), target))
    best = int(np.argmin(dists))
    if math.isinf(dists[best]):
        return 0
    return best + 1


# ---------------------------------------------------------------------------
# Low-level decoder


def _decode_step(dec: DecoderParams, s: np.ndarray, prev: int) -> tuple[np.ndarray, np.ndarray]:
    """Advance the decoder state with the previous token; return (state, logp)."""
    u = np.concatenate([s, dec.tok[prev]])
    s2 = np.tanh(dec.upd_w @ u + dec.upd_b)
    logits = dec.out_w @ s2 + dec.out_b
    z = logits - logits.max()
    logp = z - math.log(np.exp(z).sum())
    return s2, logp


def decode_low(dec: DecoderParams, h: np.ndarray, beam: int = 3,
               max_len: int = 30) -> list[Action]:
    """Beam-search decode; returns the complete hypothesis with the highest
    total log-probability. A hypothesis completes at END or max_len."""
    dec.check_finite()
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite decoder context")
    s0 = np.tanh(dec.win_w @ h + dec.win_b)
    alive: list[tuple[float, list[int], np.ndarray, int]] = [(0.0, [], s0, BOS)]
    pool: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        ext: list[tuple[float, list[int], np.ndarray, int]] = []
        for lp, toks, s, prev in alive:
            s2, logps = _decode_step(dec, s, prev)
            for t in range(N_EMIT):
                cand = (lp + float(logps[t]), toks + [t], s2, t)
                if t == Action.END or len(cand[1]) >= max_len:
                    pool.append((cand[0], cand[1]))
                else:
                    ext.append(cand)
        ext.sort(key=lambda e: -e[0])
        alive = ext[:beam]
        if not alive:
            break
    best = max(pool, key=lambda e: e[0])
    return [Action(t) for t in best[1]]


def decode_logprob(dec: DecoderParams, h: np.ndarray, toks: list[Action]) -> float:
    """Total log-probability the decoder assigns to a token sequence."""
    s = np.tanh(dec.win_w @ h + dec.win_b)
    prev = BOS
    total = 0.0
    for t in toks:
        s, logp = _decode_step(dec, s, prev)
        total += float(logp[int(t)])
        prev = int(t)
    return total


def loss_low(dec: DecoderParams, h: np.ndarray,
             label: list[Action]) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Teacher-forced negative log-likelihood of the label sequence.

    Returns (loss, decoder gradients, gradient wrt the context h).
    """
    if not label or label[-1] != Action.END:
        raise ValueError("label must end with END")
    if len(label) > MAX_SEQ_LEN + 1:
        raise ValueError("label too long")
    targets = [int(t) for t in label]
    inputs = [BOS] + targets[:-1]
    state_dim = dec.win_b.shape[0]
    s_prev = np.tanh(dec.win_w @ h + dec.win_b)
    states = [s_prev]
    us = []
    probs = []
    loss = 0.0
    for j, (inp, tgt) in enumerate(zip(inputs, targets)):
        u = np.concatenate([states[-1], dec.tok[inp]])
        s = np.tanh(dec.upd_w @ u + dec.upd_b)
        logits = dec.out_w @ s + dec.out_b
        z = logits - logits.max()
        logp = z - math.log(np.exp(z).sum())
        loss -= float(logp[tgt])
        us.append(u)
        states.append(s)
        probs.append(np.exp(logp))

    g = {k: np.zeros_like(getattr(dec, k)) for k in
         ("tok", "win_w", "win_b", "upd_w", "upd_b", "out_w", "out_b")}
    ds_carry = np.zeros(state_dim)
    for j in reversed(range(len(targets))):
        dlogits = probs[j].copy()
        dlogits[targets[j]] -= 1.0
        s = states[j + 1]
        g["out_w"] += np.outer(dlogits, s)
        g["out_b"] += dlogits
        ds = dec.out_w.T @ dlogits + ds_carry
        dz = ds * (1.0 - s * s)
        g["upd_w"] += np.outer(dz, us[j])
        g["upd_b"] += dz
        du = dec.upd_w.T @ dz
        ds_carry = du[:state_dim]
        g["tok"][inputs[j]] += du[state_dim:]
    s0 = states[0]
    dz0 = ds_carry * (1.0 - s0 * s0)
    g["win_w"] += np.outer(dz0, h)
    g["win_b"] += dz0
    dh = dec.win_w.T @ dz0
    return loss, {f"decoder/{k}": v for k, v in g.items()}, dh


# ---------------------------------------------------------------------------
# High-level loss


@dataclass
class StepRecord:
    step: int
    probs: np.ndarray
    chosen: int
    teacher: int | None = None
    sampled: int | None = None
    reward: float = 0.0
    decoded: list[Action] | None = None
    poses: list[Pose] = field(default_factory=list)
    heatmap_argmax: tuple[int, int] | None = None

    def to_json(self) -> str:
        doc = {
            "step": self.step,
            "probs": [float(v) for v in self.probs],
            "chosen": self.chosen,
            "teacher": self.teacher,
            "sampled": self.sampled,
            "reward": self.reward,
            "decoded": render_tokens(self.decoded) if self.decoded is not None else None,
            "poses": [{"x": p.x, "y": p.y, "heading": p.heading} for p in self.poses],
            "heatmap_argmax": list(self.heatmap_argmax) if self.heatmap_argmax else None,
        }
        return json.dumps(doc)


def discounted_returns(rewards: list[float], discount: float) -> list[float]:
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def loss_high(records: list[StepRecord], lam: float, discount: float = 0.9,
              baseline: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """Teacher cross-entropy plus lambda-weighted advantage term.

    Returns the scalar loss and per-step gradients wrt the candidate
    logits (softmax already folded in).
    """
    returns = discounted_returns([r.reward for r in records], discount)
    total = 0.0
    dlogits = []
    for rec, g in zip(records, returns):
        p = rec.probs
        il = -math.log(max(p[rec.teacher], 1e-300))
        d = p.copy()
        d[rec.teacher] -= 1.0
        if lam != 0.0 and rec.sampled is not None:
            adv = g - baseline
            il_rl = -adv * math.log(max(p[rec.sampled], 1e-300))
            total += il + lam * il_rl
            d_rl = p.copy()
            d_rl[rec.sampled] -= 1.0
            d = d + lam * adv * d_rl
        else:
            total += il
        dlogits.append(d)
    return total, dlogits


def loss_joint(high: float, low: float) -> float:
    return high + low


def joint_step_loss(scorer: ScorerParams, decoder: DecoderParams,
                    instr_ids: list[int], hist: np.ndarray, feats: np.ndarray,
                    teacher: int, sampled: int | None, advantage: float,
                    lam: float, label: list[Action],
                    waypoints: list[Waypoint] | None = None
                    ) -> tuple[float, dict[str, np.ndarray]]:
    """Single-step joint objective with exact gradients for all parameters.

    The step context is shared: it produces the candidate distribution and
    conditions the low-level decoder, so gradients from both losses
    accumulate into the scorer.
    """
    n_real = feats.shape[0]
    wps = waypoints or [Waypoint.from_polar(0.0, 1.0)] * n_real
    cands = CandidateSet(feats=feats, waypoints=wps, world=np.zeros((n_real, 2)))
    state = ScorerState(instr_ids=instr_ids,
                        instr_ctx=(scorer.instr[instr_ids].mean(axis=0)
                                   if instr_ids else np.zeros(scorer.instr.shape[1])),
                        hist=hist, _hist_sum=np.zeros(scorer.ctx_dim))
    p, cache = score_candidates(scorer, cands, state)
    hi = -math.log(max(p[teacher], 1e-300))
    d = p.copy()
    d[teacher] -= 1.0
    if lam != 0.0 and sampled is not None:
        hi += lam * (-advantage * math.log(max(p[sampled], 1e-300)))
        d_rl = p.copy()
        d_rl[sampled] -= 1.0
        d = d + lam * advantage * d_rl
    lo, dec_grads, dh = loss_low(decoder, cache["c"], label)
    grads = scorer_backward(scorer, cache, d, dh_extra=dh)
    grads.update(dec_grads)
    return hi + lo, grads


# ---------------------------------------------------------------------------
# Rollouts


def gt_waypoints(graph: NavGraph, pose: Pose) -> list[Waypoint]:
    """Connectivity-graph candidates around the node nearest the pose."""
    idx = graph.nearest_node(pose.x, pose.y)
    targets = list(graph.neighbors(idx))
    out = []
    here = np.array([pose.x, pose.y])
    node_off = graph.nodes[idx] - here
    if float(np.hypot(*node_off)) > 0.3:
        targets = [idx] + targets
    for j in targets:
        off = graph.nodes[j] - here
        dist = float(np.hypot(*off))
        if dist < 1e-9:
            continue
        rel = (bearing_deg(off[0], off[1]) - pose.heading) % 360.0
        out.append(Waypoint.from_polar(rel, dist))
    return out


def predictor_waypoints(pred: PredictorParams, panorama: Panorama,
                        mask: np.ndarray, nms: dict | None = None) -> list[Waypoint]:
    hm = predict_heatmap(pred, features(panorama, mask))
    return nms_sample(hm, **(nms or {}))


@dataclass
class RolloutResult:
    trajectory: list[Pose]
    records: list[StepRecord]
    collisions: int = 0


def rollout_high(grid: SemanticGrid, graph: NavGraph | None, episode: Episode,
                 agent: AgentParams | None, config: TrainConfig,
                 predictor: PredictorParams | None = None,
                 policy: str = "greedy", rng: np.random.Generator | None = None,
                 decode_tokens: bool = False) -> RolloutResult:
    """High-level rollout: sense, propose waypoints, select, execute.

    policy: "greedy" uses the trained scorer; "teacher" follows the
    geodesic teacher (oracle); "random" selects uniformly.
    """
    pose = episode.start
    traj = [pose]
    records: list[StepRecord] = []
    collisions = 0
    progress = 0
    stuck = False
    state = (ScorerState.init(agent.scorer, episode.instruction)
             if agent is not None else None)
    for step in range(config.max_high_steps):
        pano = raycast_panorama(grid, pose)
        vocab = [v for v in config.open_vocab if v in pano.legend_names.values()]
        mask = obstacle_mask(pano, vocab)
        hm_argmax = None
        if config.waypoints == "predictor":
            if predictor is None:
                raise ValueError("predictor waypoints requested without a checkpoint")
            hm = predict_heatmap(predictor, features(pano, mask))
            hm_argmax = tuple(int(v) for v in divmod(int(np.argmax(hm)), hm.shape[1]))
            wps = nms_sample(hm)
        else:
            if graph is None:
                raise ValueError("gt waypoints requested without a graph")
            wps = gt_waypoints(graph, pose)
        cands = candidate_features(pano, mask, wps, pose)
        if state is not None:
            p, _ = score_candidates(agent.scorer, cands, state)
        else:
            p = np.full(cands.n, 1.0 / cands.n)
        if policy == "teacher":
            progress = advance_progress(grid, episode.gt_path, pose, progress)
            chosen = teacher_action(grid, episode.gt_path[progress:], pose,
                                    cands, config.d_th)
            if stuck and chosen != 0 and cands.waypoints:
                # The previous hop was mostly blocked; re-center on the
                # closest candidate before retrying the teacher's pick.
                chosen = 1 + int(np.argmin([w.distance for w in cands.waypoints]))
        elif policy == "random":
            chosen = int(rng.integers(cands.n)) if rng is not None else 0
        else:
            chosen = int(np.argmax(p))
        decoded = None
        if decode_tokens and agent is not None:
            decoded = decode_low(agent.decoder, state.h, beam=config.beam,
                                 max_len=config.max_decode_len)
        rec = StepRecord(step=step, probs=p, chosen=chosen, decoded=decoded,
                         poses=[pose], heatmap_argmax=hm_argmax)
        records.append(rec)
        if state is not None:
            state.push_history()
        if chosen == 0:
            break
        wp = cands.waypoints[chosen - 1]
        seq = compile_waypoint(reduce_heading(wp.heading), wp.distance)
        prev_xy = (pose.x, pose.y)
        frag, pose, nc = execute_sequence(grid, pose, seq)
        stuck = nc > 0 and math.hypot(pose.x - prev_xy[0], pose.y - prev_xy[1]) < 0.3
        collisions += nc
        rec.poses = frag
        traj.extend(frag)
    return RolloutResult(trajectory=traj, records=records, collisions=collisions)


def rollout_low(grid: SemanticGrid, episode: Episode, agent: AgentParams | None,
                config: TrainConfig, policy: str = "greedy",
                rng: np.random.Generator | None = None) -> RolloutResult:
    """Low-level rollout: no waypoint proposals; the decoder drives motion.

    The candidate pool is replaced by per-sector summaries; the episode
    ends when a decoded sequence contains STOP or the action budget runs
    out. A decode with no executable tokens counts as an implicit stop.
    """
    pose = episode.start
    traj = [pose]
    records: list[StepRecord] = []
    collisions = 0
    budget = config.max_low_actions
    state = (ScorerState.init(agent.scorer, episode.instruction)
             if agent is not None else None)
    step = 0
    while budget > 0:
        pano = raycast_panorama(grid, pose)
        vocab = [v for v in config.open_vocab if v in pano.legend_names.values()]
        mask = obstacle_mask(pano, vocab)
        cands = sector_candidates(pano, mask, pose)
        if state is not None:
            p, _ = score_candidates(agent.scorer, cands, state)
        else:
            p = np.full(cands.n, 1.0 / cands.n)
        if policy == "random":
            seq = _random_sequence(rng, config.max_decode_len)
        else:
            seq = decode_low(agent.decoder, state.h, beam=config.beam,
                             max_len=config.max_decode_len)
        body = [a for a in seq if a != Action.END][:budget]
        frag, pose, nc = execute_sequence(grid, pose, body)
        collisions += nc
        records.append(StepRecord(step=step, probs=p, chosen=-1, decoded=seq,
                                  poses=frag))
        traj.extend(frag)
        budget -= len(frag)
        if state is not None:
            state.push_history()
        step += 1
        if Action.STOP in body or not body:
            break
    return RolloutResult(trajectory=traj, records=records, collisions=collisions)


def _random_sequence(rng: np.random.Generator, max_len: int) -> list[Action]:
    seq: list[Action] = []
    for _ in range(max_len):
        t = Action(int(rng.integers(N_EMIT)))
        seq.append(t)
        if t == Action.END:
            break
    return seq


# ---------------------------------------------------------------------------
# Training


def build_instruction_vocab(grid: SemanticGrid) -> list[str]:
    names = sorted(name for name, _ in grid.legend.values())
    return ["left", "right", "forward", "stop"] + names


@dataclass
class _StepData:
    feats: np.ndarray
    waypoints: list[Waypoint]
    teacher: int
    label: list[Action]
    cand_goal_geo: np.ndarray  # index 0 = stop (stay in place)
    success_here: bool


@dataclass
class _EpisodeData:
    episode: Episode
    instr_ids: list[int]
    steps: list[_StepData]


def _precompute_episode(grid: SemanticGrid, graph: NavGraph | None,
                        episode: Episode, scorer: ScorerParams,
                        config: TrainConfig,
                        predictor: PredictorParams | None) -> _EpisodeData:
    """Teacher-forced trace of an episode: candidates, teacher indices,
    compiled labels, and per-candidate goal geodesics for rewards.

    The teacher trajectory does not depend on network parameters, so this
    runs once and every training epoch reuses it.
    """
    pose = episode.start
    goal = episode.goal
    steps: list[_StepData] = []
    progress = 0
    for _ in range(config.max_high_steps):
        pano = raycast_panorama(grid, pose)
        vocab = [v for v in config.open_vocab if v in pano.legend_names.values()]
        mask = obstacle_mask(pano, vocab)
        if config.waypoints == "predictor":
            wps = predictor_waypoints(predictor, pano, mask)
        else:
            wps = gt_waypoints(graph, pose)
        cands = candidate_features(pano, mask, wps, pose)
        progress = advance_progress(grid, episode.gt_path, pose, progress)
        teacher = teacher_action(grid, episode.gt_path[progress:], pose, cands,
                                 config.d_th)
        if teacher == 0:
            label = [Action.STOP, Action.END]
        else:
            label = label_low_sequence(pose, tuple(cands.world[teacher - 1]))
        geo_here = geodesic_distance(grid, (pose.x, pose.y), goal)
        cand_geo = [geo_here]  # stop keeps the agent in place
        for wx, wy in cands.world:
            ix, iy = grid.cell_of(wx, wy)
            cand_geo.append(geodesic_distance(grid, (wx, wy), goal)
                            if grid.in_bounds(ix, iy) else math.inf)
        steps.append(_StepData(
            feats=cands.feats, waypoints=cands.waypoints, teacher=teacher,
            label=label, cand_goal_geo=np.array(cand_geo),
            success_here=math.hypot(pose.x - goal[0], pose.y - goal[1]) <= config.d_th,
        ))
        if teacher == 0:
            break
        wp = cands.waypoints[teacher - 1]
        seq = compile_waypoint(reduce_heading(wp.heading), wp.distance)
        _, pose, _ = execute_sequence(grid, pose, seq)
    return _EpisodeData(episode=episode,
                        instr_ids=scorer.token_ids(episode.instruction),
                        steps=steps)


def _step_reward(step: _StepData, sampled: int) -> float:
    geo_here = step.cand_goal_geo[0]
    if sampled == 0:
        return 2.0 if step.success_here else -2.0
    geo_next = step.cand_goal_geo[sampled]
    if math.isinf(geo_next) or math.isinf(geo_here):
        return -2.0
    return float(geo_here - geo_next)


@dataclass
class TrainLogEntry:
    epoch: int
    high_loss: float
    low_loss: float
    teacher_acc: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "high_loss": self.high_loss,
                "low_loss": self.low_loss, "teacher_acc": self.teacher_acc}


def train_agent(grids: dict[str, SemanticGrid], graphs: dict[str, NavGraph],
                episodes: list[Episode], config: TrainConfig,
                predictor: PredictorParams | None = None
                ) -> tuple[AgentParams, list[TrainLogEntry]]:
    """Joint IL+RL training of the scorer with the low-level decoder.

    Per step: teacher-forced selection loss, an advantage-weighted term on
    an action sampled from the predicted distribution, and teacher-forced
    token cross-entropy on the compiled label of the teacher waypoint.
    Deterministic given config.seed.
    """
    if not episodes:
        raise ValueError("need at least one training episode")
    first_grid = grids[episodes[0].map_id]
    vocab = build_instruction_vocab(first_grid)
    n_feat = candidate_feature_dim(len(first_grid.legend))
    scorer = ScorerParams.init(vocab, n_feat, ctx_dim=config.ctx_dim,
                               hidden=config.hidden, seed=config.seed)
    decoder = DecoderParams.init(ctx_dim=scorer.ctx_dim,
                                 state_dim=config.dec_state, seed=config.seed)

    data = [
        _precompute_episode(grids[ep.map_id], graphs.get(ep.map_id), ep,
                            scorer, config, predictor)
        for ep in episodes
    ]

    params = scorer.params()
    params.update(decoder.params())
    opt = Adam(lr=config.lr)
    baseline = 0.0
    baseline_n = 0
    log: list[TrainLogEntry] = []
    for epoch in range(config.epochs):
        # Step decay: drop the rate late in training to settle the fit.
        if epoch >= int(0.85 * config.epochs):
            opt.lr = config.lr * 0.1
        elif epoch >= int(0.6 * config.epochs):
            opt.lr = config.lr * 0.25
        rng = substream(config.seed, f"train/epoch{epoch}")
        hi_sum = lo_sum = 0.0
        acc_n = acc_hits = 0
        for ed in data:
            state = ScorerState.init(scorer, ed.episode.instruction)
            step_caches = []
            rewards = []
            for sd in ed.steps:
                cands = CandidateSet(feats=sd.feats, waypoints=sd.waypoints,
                                     world=np.zeros((len(sd.waypoints), 2)))
                p, cache = score_candidates(scorer, cands, state)
                sampled = int(rng.choice(len(p), p=p))
                rewards.append(_step_reward(sd, sampled))
                step_caches.append((sd, p, cache, sampled, state.h))
                acc_hits += int(np.argmax(p) == sd.teacher)
                acc_n += 1
                state.push_history()
            returns = discounted_returns(rewards, config.discount)
            grads_total: dict[str, np.ndarray] = {}
            for (sd, p, cache, sampled, h), g in zip(step_caches, returns):
                adv = g - baseline
                hi = -math.log(max(p[sd.teacher], 1e-300))
                d = p.copy()
                d[sd.teacher] -= 1.0
                if config.lam != 0.0:
                    hi += config.lam * (-adv * math.log(max(p[sampled], 1e-300)))
                    d_rl = p.copy()
                    d_rl[sampled] -= 1.0
                    d = d + config.lam * adv * d_rl
                lo, dec_grads, dh = loss_low(decoder, h, sd.label)
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}, episode {ed.episode.id}")
                hi_sum += hi
                lo_sum += lo
                step_grads = scorer_backward(scorer, cache, d, dh_extra=dh)
                step_grads.update(dec_grads)
                for k, v in step_grads.items():
                    if k in grads_total:
                        grads_total[k] += v
                    else:
                        grads_total[k] = v.copy()
            if baseline_n == 0:
                baseline = float(np.mean(returns)) if returns else 0.0
                baseline_n = len(returns)
            elif returns:
                total = baseline * baseline_n + float(np.sum(returns))
                baseline_n += len(returns)
                baseline = total / baseline_n
            opt.step(params, grads_total)
        n_steps = max(1, acc_n)
        log.append(TrainLogEntry(epoch=epoch, high_loss=hi_sum / n_steps,
                                 low_loss=lo_sum / n_steps,
                                 teacher_acc=acc_hits / n_steps))
    agent = AgentParams(scorer=scorer, decoder=decoder, config=config,
                        seed=config.seed)
    return agent, log


def training_fit_metrics(agent: AgentParams, grids: dict[str, SemanticGrid],
                         graphs: dict[str, NavGraph], episodes: list[Episode],
                         predictor: PredictorParams | None = None
                         ) -> tuple[float, float]:
    """Teacher-action accuracy and exact-match rate of decoded labels on a
    teacher-forced pass (the training-fit diagnostics)."""
    cfg = agent.config
    hits = total = seq_hits = 0
    for ep in episodes:
        ed = _precompute_episode(grids[ep.map_id], graphs.get(ep.map_id), ep,
                                 agent.scorer, cfg, predictor)
        state = ScorerState.init(agent.scorer, ep.instruction)
        for sd in ed.steps:
            cands = CandidateSet(feats=sd.feats, waypoints=sd.waypoints,
                                 world=np.zeros((len(sd.waypoints), 2)))
            p, _ = score_candidates(agent.scorer, cands, state)
            hits += int(np.argmax(p) == sd.teacher)
            decoded = decode_low(agent.decoder, state.h, beam=cfg.beam,
                                 max_len=cfg.max_decode_len)
            seq_hits += int(decoded == sd.label)
            total += 1
            state.push_history()
    return hits / max(1, total), seq_hits / max(1, total)
