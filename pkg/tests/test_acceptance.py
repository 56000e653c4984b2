"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines. The heavyweight training-based criteria share module-scoped
fixtures and stay well inside their stated runtime budgets.
"""

import functools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dualnav import agent as ag
from dualnav import metrics, waypoint, world
from dualnav.actions import Action, compile_waypoint, displacement_of
from dualnav.cli import _wp_corpus, main
from dualnav.nets import grad_check, softmax_ce
from dualnav.seeds import episode_stream, substream

SEED = 20240817


def _report(num, text):
    print(f"\n[PASS] criterion {num}: {text}", flush=True)


# ---------------------------------------------------------------------------
# 1. Compiler exactness


def test_criterion_1_compiler_exactness():
    t0 = time.time()
    assert compile_waypoint(0.0, 0.33) == [Action.FORWARD]
    rng = substream(SEED, "acc/compile")
    for _ in range(10_000):
        dh = float(rng.uniform(-180.0, 180.0))
        if dh <= -180.0:
            dh = 180.0
        d = float(rng.uniform(0.0, 3.0))
        got_h, (dx, dy) = displacement_of(compile_waypoint(dh, d))
        want_h = 15.0 * math.copysign(1.0, dh) * math.floor(abs(dh) / 15.0)
        want_d = 0.25 * math.floor(d / 0.25)
        assert abs(got_h - want_h) <= 1e-9
        assert abs(math.hypot(dx, dy) - want_d) <= 1e-9
        if want_d > 0.0:
            bearing = math.degrees(math.atan2(dy, dx))
            gap = ((bearing - want_h + 180.0) % 360.0) - 180.0
            assert abs(gap) <= 1e-9
    elapsed = time.time() - t0
    assert elapsed < 5.0
    _report(1, f"10^4 compile/displacement pairs exact to 1e-9 ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 2. Metric oracles


def _oracle_dtw(a, b):
    @functools.lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0 and j == 0:
            return 0.0
        if i == 0 or j == 0:
            return math.inf
        c = math.hypot(a[i - 1][0] - b[j - 1][0], a[i - 1][1] - b[j - 1][1])
        return c + min(rec(i - 1, j), rec(i, j - 1), rec(i - 1, j - 1))

    return rec(len(a), len(b))


def test_criterion_2_metric_oracles(room_grid):
    t0 = time.time()
    rng = substream(SEED, "acc/metrics")
    for _ in range(1000):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a = rng.uniform(-5, 5, size=(n, 2))
        b = rng.uniform(-5, 5, size=(m, 2))
        d_th = float(rng.uniform(0.5, 3.0))
        expect = math.exp(-_oracle_dtw(tuple(map(tuple, a)), tuple(map(tuple, b)))
                          / (m * d_th))
        assert metrics.ndtw(a, b, d_th) == pytest.approx(expect, abs=1e-12)

    pose = world.Pose(5.5, 5.5, 0.0)
    for _ in range(1000):
        np_, nt = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        p = rng.uniform(-2, 2, size=(np_, 2))
        t = rng.uniform(-2, 2, size=(nt, 2))
        def as_wp(pts):
            return [waypoint.Waypoint(
                heading=math.degrees(math.atan2(y, x)) % 360.0,
                distance=math.hypot(x, y), dx=x, dy=y) for x, y in pts]
        rep = waypoint.eval_waypoints([as_wp(p)], [as_wp(t)], room_grid, [pose])
        d_pt = [min(math.hypot(px - tx, py - ty) for tx, ty in t) for px, py in p]
        d_tp = [min(math.hypot(px - tx, py - ty) for px, py in p) for tx, ty in t]
        assert rep.d_c == pytest.approx(
            0.5 * (sum(d_pt) / len(d_pt) + sum(d_tp) / len(d_tp)), abs=1e-12)
        assert rep.d_h == pytest.approx(max(max(d_pt), max(d_tp)), abs=1e-12)

    path = rng.uniform(-3, 3, size=(6, 2))
    assert abs(metrics.ndtw(path, path, 3.0) - 1.0) <= 1e-9
    assert metrics.spl(True, 5.0, 5.0) == 1.0
    assert metrics.spl(False, 5.0, 5.0) == 0.0
    assert metrics.spl(True, 10.0, 5.0) == 0.5
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report(2, f"nDTW/Chamfer/Hausdorff equal brute force; SPL cases exact ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 3. Gradient checks


def _check_predictor(seed):
    rng = substream(seed, "acc/grad-pred")
    params = waypoint.PredictorParams.init(n_features=4, hidden=5, window=3,
                                           seed=seed)
    x = rng.uniform(-1, 1, size=(6, 12))
    targets = rng.uniform(size=(6, 12))
    arrays = {"w1": params.w1, "b1": params.b1, "w2": params.w2, "b2": params.b2}

    def fn(_):
        return waypoint.predictor_loss_and_grads(params, x, targets)

    return grad_check(fn, arrays, eps=1e-5)


def _check_scorer(seed):
    rng = substream(seed, "acc/grad-scorer")
    scorer = ag.ScorerParams.init(["a", "b", "c"], 5, emb_dim=4, ctx_dim=6,
                                  hidden=5, seed=seed)
    feats = rng.uniform(-1, 1, size=(3, 5))
    hist = rng.normal(size=6)
    ids = [0, 2]
    teacher = int(rng.integers(4))
    low_target = int(rng.integers(4))

    def fn(_):
        cands = ag.CandidateSet(feats=feats,
                                waypoints=[waypoint.Waypoint.from_polar(0, 1)] * 3,
                                world=np.zeros((3, 2)))
        state = ag.ScorerState(instr_ids=ids,
                               instr_ctx=scorer.instr[ids].mean(axis=0),
                               hist=hist, _hist_sum=np.zeros(6))
        p, cache = ag.score_candidates(scorer, cands, state)
        loss, dlogits = softmax_ce(np.log(np.maximum(p, 1e-300)), teacher)
        # include the 4-way baseline head so its parameters get checked
        low_logits = scorer.low_w @ cache["c"] + scorer.low_b
        low_loss, dlow = softmax_ce(low_logits, low_target)
        grads = ag.scorer_backward(scorer, cache, dlogits,
                                   dh_extra=scorer.low_w.T @ dlow)
        grads["scorer/low_w"] = np.outer(dlow, cache["c"])
        grads["scorer/low_b"] = dlow
        return loss + low_loss, grads

    return grad_check(fn, scorer.params(), eps=1e-5)


def _check_decoder(seed):
    rng = substream(seed, "acc/grad-dec")
    dec = ag.DecoderParams.init(ctx_dim=5, state_dim=6, emb_dim=4, seed=seed)
    h = rng.normal(size=5)
    toks = [Action(int(v)) for v in rng.integers(0, 4, size=4)] + [Action.END]

    def fn(_):
        loss, grads, _ = ag.loss_low(dec, h, toks)
        return loss, grads

    return grad_check(fn, dec.params(), eps=1e-5)


def _check_joint(seed):
    rng = substream(seed, "acc/grad-joint")
    scorer = ag.ScorerParams.init(["a", "b"], 5, emb_dim=4, ctx_dim=6,
                                  hidden=5, seed=seed)
    dec = ag.DecoderParams.init(ctx_dim=6, state_dim=6, emb_dim=4, seed=seed + 1)
    feats = rng.uniform(-1, 1, size=(2, 5))
    hist = rng.normal(size=6)
    label = [Action.RIGHT, Action.FORWARD, Action.END]
    teacher = int(rng.integers(3))
    sampled = int(rng.integers(3))
    adv = float(rng.normal())
    params = scorer.params()
    params.update(dec.params())

    def fn(_):
        return ag.joint_step_loss(scorer, dec, [0, 1], hist, feats, teacher,
                                  sampled, adv, lam=0.75, label=label)

    return grad_check(fn, params, eps=1e-5)


def test_criterion_3_gradient_checks():
    t0 = time.time()
    worst = {"predictor": 0.0, "scorer": 0.0, "decoder": 0.0, "joint": 0.0}
    for k in range(20):
        worst["predictor"] = max(worst["predictor"], _check_predictor(100 + k))
        worst["scorer"] = max(worst["scorer"], _check_scorer(200 + k))
        worst["decoder"] = max(worst["decoder"], _check_decoder(300 + k))
        worst["joint"] = max(worst["joint"], _check_joint(400 + k))
    for name, err in worst.items():
        assert err < 1e-4, f"{name} gradient error {err}"
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _report(3, "max relative gradient errors " +
            ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) +
            f" ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 4. NMS / heatmap invariants


def test_criterion_4_nms_heatmap_invariants():
    t0 = time.time()
    rng = substream(SEED, "acc/nms")
    for _ in range(1000):
        hm = rng.uniform(size=(120, 12)) ** 2
        out = waypoint.nms_sample(hm, k=5, r_angle=30.0, r_dist=0.75, tau=0.35)
        assert len(out) <= 5
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                da = abs(out[i].heading - out[j].heading) % 360.0
                da = min(da, 360.0 - da)
                dd = abs(out[i].distance - out[j].distance)
                assert da >= 30.0 or dd >= 0.75

    # exact recovery of isolated constructed peaks
    hm = np.zeros((120, 12))
    peaks = [(5, 2, 0.9), (45, 8, 0.8), (90, 2, 0.7)]
    for a, d, v in peaks:
        hm[a, d] = v
    got = waypoint.nms_sample(hm, k=5, tau=0.5)
    assert [(w.heading, w.distance) for w in got] == \
        [waypoint.center_of(a, d) for a, d, _ in peaks]

    # gt_heatmap argmax preservation for isolated neighbors
    offs = [(2.5, 0.0), (0.0, 1.2), (-1.8, -1.8)]
    nodes = [(0.0, 0.0)] + offs
    graph = world.NavGraph(nodes=np.array(nodes),
                           edges=[(0, j + 1) for j in range(len(offs))])
    hm = waypoint.gt_heatmap(graph, (0.0, 0.0))
    for ox, oy in offs:
        a0, d0 = waypoint.bin_of(math.degrees(math.atan2(oy, ox)) % 360.0,
                                 math.hypot(ox, oy))
        assert hm[a0, d0] == 1.0
        assert hm.max() == 1.0
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _report(4, f"NMS separation on 10^3 heatmaps; exact peak recovery ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 5. Oracle navigation


@pytest.fixture(scope="module")
def oracle_corpus():
    grids, graphs, episodes = {}, {}, []
    for seed in (1, 2, 4, 5, 6):
        gid = f"m{seed}"
        grid = world.gen_world(seed)
        graph = world.build_nav_graph(grid, spacing=1.5)
        grids[gid] = grid
        graphs[gid] = graph
        episodes += world.make_episodes(grid, graph, 10, seed=3, map_id=gid,
                                        max_geodesic=10.0)
    return grids, graphs, episodes


def test_criterion_5_oracle_navigation(oracle_corpus):
    t0 = time.time()
    grids, graphs, episodes = oracle_corpus
    assert len(episodes) == 50
    cfg = ag.TrainConfig()
    oks, spls = [], []
    for ep in episodes:
        grid = grids[ep.map_id]
        rr = ag.rollout_high(grid, graphs[ep.map_id], ep, None, cfg,
                             policy="teacher")
        pts = np.array([[p.x, p.y] for p in rr.trajectory])
        final = (rr.trajectory[-1].x, rr.trajectory[-1].y)
        ok = metrics.success(final, ep.goal, cfg.d_th)
        shortest = world.geodesic_distance(grid, (ep.start.x, ep.start.y), ep.goal)
        oks.append(ok)
        spls.append(metrics.spl(ok, metrics.path_length(pts), shortest))
    sr = float(np.mean(oks))
    spl = float(np.mean(spls))
    elapsed = time.time() - t0
    assert sr == 1.0
    assert spl >= 0.85
    assert elapsed < 60.0
    _report(5, f"teacher rollouts on 50 episodes: SR {sr:.2f}, SPL {spl:.3f} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 6. Masking trend


def test_criterion_6_masking_trend():
    t0 = time.time()
    grids = {f"m{s:02d}": world.gen_world(s) for s in range(1, 21)}
    vocab = list(waypoint.DEFAULT_OPEN_VOCAB)
    reports = {}
    for masked in (True, False):
        corpus, meta = _wp_corpus(grids, 1.5, masked, vocab)
        assert len(corpus) >= 500
        params, _ = waypoint.train_predictor(
            corpus, waypoint.PredictorHyper(epochs=150, seed=SEED))
        n_open = n_pred = 0
        for (feats, _), (grid, pose, _) in zip(corpus, meta):
            hm = waypoint.predict_heatmap(params, feats)
            pred = waypoint.nms_sample(hm)
            for w in pred:
                ux = math.cos(math.radians(pose.heading + w.heading))
                uy = math.sin(math.radians(pose.heading + w.heading))
                n_open += int(grid.is_traversable(pose.x + w.distance * ux,
                                                  pose.y + w.distance * uy))
                n_pred += 1
        reports[masked] = n_open / max(1, n_pred)
    elapsed = time.time() - t0
    assert reports[True] >= reports[False] - 0.01
    assert reports[True] >= 0.80
    assert elapsed < 900.0
    _report(6, f"%Open masked {reports[True]:.3f} vs unmasked {reports[False]:.3f} "
               f"on {len(grids)} maps ({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# 7. Dual-action training


@pytest.fixture(scope="module")
def trained_agent():
    grids, graphs, episodes = {}, {}, []
    for s in range(1, 11):
        gid = f"m{s}"
        grid = world.gen_world(s)
        graph = world.build_nav_graph(grid, spacing=1.5)
        grids[gid] = grid
        graphs[gid] = graph
        episodes += world.make_episodes(grid, graph, 20, seed=3 + s,
                                        map_id=gid, max_geodesic=10.0)
    cfg = ag.TrainConfig(lam=0.75, epochs=500, seed=0, lr=1.5e-3)
    trained, log = ag.train_agent(grids, graphs, episodes, cfg)
    return grids, graphs, episodes, trained, cfg


def test_criterion_7_dual_action_training(trained_agent):
    t0 = time.time()
    grids, graphs, episodes, trained, cfg = trained_agent
    assert len(episodes) == 200
    acc, em = ag.training_fit_metrics(trained, grids, graphs, episodes)
    assert acc >= 0.90
    assert em >= 0.95

    hgrids, hgraphs, heps = {}, {}, []
    for s in (11, 12, 13):
        gid = f"h{s}"
        grid = world.gen_world(s)
        hgrids[gid] = grid
        hgraphs[gid] = world.build_nav_graph(grid, spacing=1.5)
        pool = world.make_episodes(grid, hgraphs[gid], 51, seed=9, map_id=gid,
                                   min_geodesic=4.5, max_geodesic=10.0)
        far = [e for e in pool
               if math.hypot(e.start.x - e.goal[0], e.start.y - e.goal[1]) >= 4.0]
        heps += far[:17]
    heps = heps[:50]
    assert len(heps) == 50

    sr = {}
    for mode in ("high", "low", "rand"):
        oks = []
        for ep in heps:
            grid = hgrids[ep.map_id]
            rng = episode_stream(cfg.seed, "acc-eval", ep.id)
            if mode == "high":
                rr = ag.rollout_high(grid, hgraphs[ep.map_id], ep, trained, cfg,
                                     policy="greedy")
            else:
                rr = ag.rollout_low(grid, ep, trained, cfg,
                                    policy="random" if mode == "rand" else "greedy",
                                    rng=rng)
            final = (rr.trajectory[-1].x, rr.trajectory[-1].y)
            oks.append(metrics.success(final, ep.goal, cfg.d_th))
        sr[mode] = float(np.mean(oks))
    elapsed = time.time() - t0
    assert sr["high"] >= sr["low"]
    assert sr["low"] >= sr["rand"] + 0.2
    assert elapsed < 1800.0
    _report(7, f"fit acc {acc:.3f}, exact-match {em:.3f}; held-out SR high "
               f"{sr['high']:.2f} >= low {sr['low']:.2f} >= random+0.2 "
               f"{sr['rand'] + 0.2:.2f} ({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# 8. Decoder contract


def test_criterion_8_decoder_contract():
    t0 = time.time()
    rng = substream(SEED, "acc/beam")
    for k in range(1000):
        dec = ag.DecoderParams.init(ctx_dim=5, state_dim=6, emb_dim=4,
                                    seed=50_000 + k)
        h = rng.normal(size=5)
        beam3 = ag.decode_low(dec, h, beam=3, max_len=30)
        greedy = ag.decode_low(dec, h, beam=1, max_len=30)
        assert len(beam3) <= 30
        assert all(a != Action.END for a in beam3[:-1])
        lp3 = ag.decode_logprob(dec, h, beam3)
        lp1 = ag.decode_logprob(dec, h, greedy)
        assert lp3 >= lp1 - 1e-12
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report(8, f"beam-3 >= greedy on 10^3 random decoders; outputs <= 30 "
               f"tokens, END at tail ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 9. Determinism


def test_criterion_9_cli_determinism(tmp_path):
    t0 = time.time()
    small = ["--width", "64", "--height", "64", "--rooms", "4",
             "--furniture", "4"]

    def pipeline(root: Path) -> dict[str, bytes]:
        root.mkdir(exist_ok=True)
        assert main(["gen-world", "--seed", "1", "--out", str(root / "w.json")]
                    + small) == 0
        assert main(["make-episodes", "--map", str(root / "w.json"), "--n", "5",
                     "--seed", "2", "--spacing", "1.5",
                     "--out", str(root / "eps.jsonl")]) == 0
        assert main(["train-wp", "--maps", str(root / "w.json"),
                     "--out", str(root / "wp.json"), "--seed", "3",
                     "--epochs", "25", "--spacing", "1.5"]) == 0
        assert main(["train-agent", "--maps", str(root / "w.json"),
                     "--episodes", str(root / "eps.jsonl"),
                     "--out", str(root / "agent.json"), "--seed", "4",
                     "--epochs", "6", "--spacing", "1.5"]) == 0
        assert main(["eval-agent", "--maps", str(root / "w.json"),
                     "--episodes", str(root / "eps.jsonl"),
                     "--agent", str(root / "agent.json"), "--mode", "high",
                     "--policy", "greedy", "--seed", "5", "--spacing", "1.5",
                     "--out", str(root / "results.jsonl"),
                     "--summary", str(root / "summary.json")]) == 0
        return {p.name: p.read_bytes() for p in sorted(root.iterdir())}

    a = pipeline(tmp_path / "run_a")
    b = pipeline(tmp_path / "run_b")
    assert sorted(a) == sorted(b)
    for name in a:
        assert a[name] == b[name], f"{name} differs between identically seeded runs"
    elapsed = time.time() - t0
    _report(9, f"gen-world/train-wp/train-agent/eval-agent byte-identical "
               f"across runs, figures included ({len(a)} files, {elapsed:.0f}s)")
