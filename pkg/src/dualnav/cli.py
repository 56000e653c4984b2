"""Experiment driver CLI.

Subcommands: gen-world, make-episodes, train-wp, eval-wp, train-agent,
eval-agent, trace. Every command validates its inputs before writing any
file, is deterministic under --seed, and the report paths render figures
next to the JSON/JSONL outputs (disable with --no-figures).

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import figures, metrics, waypoint, world
from .nets import DivergenceError
from .seeds import episode_stream

WORKERS_ENV = "DUALNAV_WORKERS"


class ValidationError(ValueError):
    pass


def _require_files(*paths: str) -> None:
    for p in paths:
        if p and not Path(p).is_file():
            raise ValidationError(f"input file not found: {p}")


def _load_grids(paths: list[str]) -> dict[str, world.SemanticGrid]:
    grids = {}
    for p in paths:
        grids[Path(p).stem] = world.load_map(Path(p).read_text())
    return grids


def _check_vocab(vocab: list[str], grids: dict[str, world.SemanticGrid]) -> None:
    for gid, grid in grids.items():
        names = set(grid.names.values())
        unknown = set(vocab) - names
        if unknown:
            raise ValidationError(
                f"open-vocabulary names {sorted(unknown)} missing from legend of map {gid}")


def _split_vocab(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_world(args) -> int:
    params = world.WorldGenParams(
        width=args.width, height=args.height, cell_size=args.cell_size,
        rooms=args.rooms, extra_corridors=args.extra_corridors,
        furniture=args.furniture, stairs=args.stairs)
    grid = world.gen_world(args.seed, params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(world.dump_map(grid))
    n_trav = int(grid.traversable.sum())
    print(f"wrote {args.out}: {grid.width}x{grid.height} cells, "
          f"{n_trav} traversable")
    return 0


def cmd_make_episodes(args) -> int:
    _require_files(args.map)
    grid = world.load_map(Path(args.map).read_text())
    graph = world.build_nav_graph(grid, spacing=args.spacing)
    episodes = world.make_episodes(grid, graph, args.n, args.seed,
                                   map_id=Path(args.map).stem,
                                   min_geodesic=args.min_geodesic)
    validate_episodes(grid, graph, episodes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    world.write_episodes(args.out, episodes)
    print(f"wrote {args.out}: {len(episodes)} episodes "
          f"({len(graph.nodes)} graph nodes)")
    return 0


def validate_episodes(grid: world.SemanticGrid, graph: world.NavGraph,
                      episodes: list[world.Episode]) -> None:
    """Episode invariants: path nodes are graph nodes, consecutive nodes
    share an edge, and edge lengths stay within the 3 m cap."""
    edge_set = {(i, j) for i, j in graph.edges} | {(j, i) for i, j in graph.edges}
    for ep in episodes:
        idxs = [graph.nearest_node(x, y) for x, y in ep.gt_path]
        for k, (x, y) in enumerate(ep.gt_path):
            if not np.allclose(graph.nodes[idxs[k]], (x, y), atol=1e-5):
                raise ValidationError(f"{ep.id}: path point {k} is not a graph node")
        for a, b in zip(idxs, idxs[1:]):
            if (a, b) not in edge_set:
                raise ValidationError(f"{ep.id}: consecutive path nodes not connected")
        for (x0, y0), (x1, y1) in zip(ep.gt_path, ep.gt_path[1:]):
            if math.hypot(x1 - x0, y1 - y0) > 3.0 + 1e-9:
                raise ValidationError(f"{ep.id}: edge longer than 3.0 m")


def _wp_corpus(grids: dict[str, world.SemanticGrid], spacing: float,
               masked: bool, vocab: list[str]):
    """(features, target heatmap) pairs plus eval-side bookkeeping."""
    corpus = []
    meta = []  # (grid, pose, target waypoints)
    for gid in sorted(grids):
        grid = grids[gid]
        graph = world.build_nav_graph(grid, spacing=spacing)
        for node in graph.nodes:
            pose = world.Pose(x=float(node[0]), y=float(node[1]), heading=0.0)
            pano = world.raycast_panorama(grid, pose)
            mask = (waypoint.obstacle_mask(pano, vocab) if masked
                    else np.ones_like(pano.hit, dtype=np.uint8))
            feats = waypoint.features(pano, mask)
            hm = waypoint.gt_heatmap(graph, (float(node[0]), float(node[1])))
            corpus.append((feats, hm))
            meta.append((grid, pose, waypoint.neighbor_waypoints(
                graph, (float(node[0]), float(node[1])))))
    return corpus, meta


def cmd_train_wp(args) -> int:
    _require_files(*args.maps)
    grids = _load_grids(args.maps)
    masked = args.mask == "on"
    vocab = _split_vocab(args.vocab)
    if masked:
        _check_vocab(vocab, grids)
    corpus, _ = _wp_corpus(grids, args.spacing, masked, vocab)
    hyper = waypoint.PredictorHyper(lr=args.lr, epochs=args.epochs,
                                    hidden=args.hidden, window=args.window,
                                    seed=args.seed)
    params, losses = waypoint.train_predictor(corpus, hyper)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(params.to_json())
    if not args.no_figures:
        figures.loss_curve_figure(str(Path(args.out).with_suffix(".png")),
                                  losses, f"predictor training (mask={args.mask})")
    print(f"wrote {args.out}: {len(corpus)} panoramas, "
          f"final MSE {losses[-1]:.6f}")
    return 0


def cmd_eval_wp(args) -> int:
    _require_files(args.ckpt, *args.maps)
    grids = _load_grids(args.maps)
    masked = args.mask == "on"
    vocab = _split_vocab(args.vocab)
    if masked:
        _check_vocab(vocab, grids)
    params = waypoint.PredictorParams.from_json(Path(args.ckpt).read_text())
    corpus, meta = _wp_corpus(grids, args.spacing, masked, vocab)
    pred_sets = []
    target_sets = []
    poses = []
    sample_panels = None
    for (feats, hm_gt), (grid, pose, targets) in zip(corpus, meta):
        hm = waypoint.predict_heatmap(params, feats)
        pred = waypoint.nms_sample(hm, k=args.k, r_angle=args.r_angle,
                                   r_dist=args.r_dist, tau=args.tau)
        pred_sets.append(pred)
        target_sets.append(targets)
        poses.append(pose)
        if sample_panels is None and targets:
            sample_panels = ([("predicted", hm), ("target", hm_gt)], [pred, targets])
    # The report aggregates over maps; any grid works for the openness judge
    # as long as poses came from it, so evaluate per map and average.
    report = _eval_wp_grouped(pred_sets, target_sets, poses, meta)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    if not args.no_figures and sample_panels is not None:
        figures.heatmap_figure(str(Path(args.out).with_suffix(".png")),
                               sample_panels[0], sample_panels[1])
    print(f"wrote {args.out}: {report.to_json()}")
    return 0


def _eval_wp_grouped(pred_sets, target_sets, poses, meta) -> waypoint.WaypointEvalReport:
    """eval_waypoints per grid, recombined with panorama weights."""
    by_grid: dict[int, list[int]] = {}
    grids = {}
    for i, (grid, _, _) in enumerate(meta):
        by_grid.setdefault(id(grid), []).append(i)
        grids[id(grid)] = grid
    deltas = []
    chamf = []
    haus = []
    n_open = 0
    n_pred = 0
    for gid, idxs in by_grid.items():
        rep = waypoint.eval_waypoints([pred_sets[i] for i in idxs],
                                      [target_sets[i] for i in idxs],
                                      grids[gid], [poses[i] for i in idxs])
        k = len(idxs)
        deltas.append(rep.delta * k)
        chamf.append(rep.d_c * k)
        haus.append(rep.d_h * k)
        n_here = sum(len(pred_sets[i]) for i in idxs)
        n_open += rep.pct_open * n_here
        n_pred += n_here
    total = len(pred_sets)
    return waypoint.WaypointEvalReport(
        delta=sum(deltas) / total, pct_open=(n_open / n_pred) if n_pred else 0.0,
        d_c=sum(chamf) / total, d_h=sum(haus) / total)


def _load_agent_inputs(args):
    _require_files(args.episodes, *args.maps)
    grids = _load_grids(args.maps)
    episodes = world.read_episodes(args.episodes)
    missing = {ep.map_id for ep in episodes} - set(grids)
    if missing:
        raise ValidationError(f"episodes reference maps not supplied: {sorted(missing)}")
    graphs = {gid: world.build_nav_graph(g, spacing=args.spacing)
              for gid, g in grids.items()}
    return grids, graphs, episodes


def cmd_train_agent(args) -> int:
    grids, graphs, episodes = _load_agent_inputs(args)
    predictor = None
    source = "gt"
    if args.waypoints != "gt":
        _require_files(args.waypoints)
        predictor = waypoint.PredictorParams.from_json(Path(args.waypoints).read_text())
        source = "predictor"
    config = agent_mod.TrainConfig(
        lam=getattr(args, "lambda"), epochs=args.epochs, seed=args.seed,
        d_th=args.d_th, lr=args.lr, waypoints=source,
        open_vocab=tuple(_split_vocab(args.vocab)))
    _check_vocab([v for v in config.open_vocab], grids)
    trained, log = agent_mod.train_agent(grids, graphs, episodes, config, predictor)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(trained.to_json())
    log_path = Path(args.out).with_suffix(".log.json")
    log_path.write_text(json.dumps([e.to_dict() for e in log]))
    if not args.no_figures:
        figures.training_curve_figure(str(Path(args.out).with_suffix(".png")),
                                      [e.to_dict() for e in log])
    print(f"wrote {args.out}: {len(episodes)} episodes, "
          f"final teacher acc {log[-1].teacher_acc:.3f}")
    return 0


def _eval_one(packed):
    (ep, grid, graph, trained, config, mode, policy, predictor, seed) = packed
    rng = episode_stream(seed, "eval", ep.id)
    if mode == "high":
        rr = agent_mod.rollout_high(grid, graph, ep, trained, config,
                                    predictor=predictor, policy=policy, rng=rng)
    else:
        rr = agent_mod.rollout_low(grid, ep, trained, config, policy=policy, rng=rng)
    pts = np.array([[p.x, p.y] for p in rr.trajectory])
    final = (rr.trajectory[-1].x, rr.trajectory[-1].y)
    ok = metrics.success(final, ep.goal, config.d_th)
    length = metrics.path_length(pts)
    shortest = world.geodesic_distance(grid, (ep.start.x, ep.start.y), ep.goal)
    ref = np.array(ep.gt_path)
    res = metrics.EpisodeResult(
        episode_id=ep.id, success=ok, path_length=length,
        shortest_path=shortest, ndtw=metrics.ndtw(pts, ref, config.d_th),
        spl=metrics.spl(ok, length, shortest), mode=mode)
    return res, pts, ref


def cmd_eval_agent(args) -> int:
    grids, graphs, episodes = _load_agent_inputs(args)
    if args.policy == "greedy" and not args.agent:
        raise ValidationError("--policy greedy requires --agent")
    trained = None
    if args.agent:
        _require_files(args.agent)
        trained = agent_mod.AgentParams.from_json(Path(args.agent).read_text())
    predictor = None
    source = "gt"
    if args.mode == "high" and args.waypoints != "gt":
        _require_files(args.waypoints)
        predictor = waypoint.PredictorParams.from_json(Path(args.waypoints).read_text())
        source = "predictor"
    base = trained.config if trained else agent_mod.TrainConfig()
    config = agent_mod.TrainConfig.from_dict(
        {**base.to_dict(), "d_th": args.d_th, "waypoints": source, "seed": args.seed})

    jobs = [(ep, grids[ep.map_id], graphs[ep.map_id], trained, config,
             args.mode, args.policy, predictor, args.seed) for ep in episodes]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            evaluated = list(pool.map(_eval_one, jobs))
    else:
        evaluated = [_eval_one(j) for j in jobs]
    evaluated.sort(key=lambda t: t[0].episode_id)
    results = [r for r, _, _ in evaluated]
    summary = metrics.aggregate(results)

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        for r in results:
            f.write(r.to_json() + "\n")
    Path(args.summary).write_text(json.dumps(summary))
    if not args.no_figures:
        stem = Path(args.summary)
        by_id = {ep.id: ep for ep in episodes}
        first_map_id = by_id[evaluated[0][0].episode_id].map_id
        runs = [(r.episode_id, ref, pts, by_id[r.episode_id].goal)
                for r, pts, ref in evaluated
                if by_id[r.episode_id].map_id == first_map_id][:6]
        figures.trajectory_figure(str(stem.with_suffix(".trajectories.png")),
                                  grids[first_map_id], runs, d_th=config.d_th)
        figures.summary_figure(str(stem.with_suffix(".metrics.png")), summary)
    print(metrics.format_summary(summary))
    return 0


def cmd_trace(args) -> int:
    grids, graphs, episodes = _load_agent_inputs(args)
    _require_files(args.agent)
    trained = agent_mod.AgentParams.from_json(Path(args.agent).read_text())
    by_id = {ep.id: ep for ep in episodes}
    if args.episode_id not in by_id:
        raise ValidationError(f"unknown episode id: {args.episode_id}")
    ep = by_id[args.episode_id]
    predictor = None
    source = "gt"
    if args.mode == "high" and args.waypoints != "gt":
        _require_files(args.waypoints)
        predictor = waypoint.PredictorParams.from_json(Path(args.waypoints).read_text())
        source = "predictor"
    config = agent_mod.TrainConfig.from_dict(
        {**trained.config.to_dict(), "waypoints": source, "seed": args.seed})
    rng = episode_stream(args.seed, "trace", ep.id)
    grid = grids[ep.map_id]
    if args.mode == "high":
        rr = agent_mod.rollout_high(grid, graphs[ep.map_id], ep, trained, config,
                                    predictor=predictor, rng=rng, decode_tokens=True)
    else:
        rr = agent_mod.rollout_low(grid, ep, trained, config, rng=rng)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        for rec in rr.records:
            f.write(rec.to_json() + "\n")
    if not args.no_figures:
        pts = np.array([[p.x, p.y] for p in rr.trajectory])
        figures.trajectory_figure(str(Path(args.out).with_suffix(".png")), grid,
                                  [(ep.id, np.array(ep.gt_path), pts, ep.goal)],
                                  d_th=config.d_th)
    print(f"wrote {args.out}: {len(rr.records)} steps")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file of defaults; explicit flags win")
        p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("gen-world", help="generate a procedural map")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=80)
    p.add_argument("--cell-size", type=float, default=0.25)
    p.add_argument("--rooms", type=int, default=5)
    p.add_argument("--extra-corridors", type=int, default=1)
    p.add_argument("--furniture", type=int, default=6)
    p.add_argument("--stairs", type=int, default=1)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("make-episodes", help="sample episodes on a map")
    common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--min-geodesic", type=float, default=3.0)
    p.set_defaults(func=cmd_make_episodes)

    p = sub.add_parser("train-wp", help="train the waypoint predictor")
    common(p)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", choices=("on", "off"), default="on")
    p.add_argument("--vocab", default=",".join(waypoint.DEFAULT_OPEN_VOCAB))
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--window", type=int, default=5)
    p.set_defaults(func=cmd_train_wp)

    p = sub.add_parser("eval-wp", help="evaluate a waypoint predictor")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", choices=("on", "off"), default="on")
    p.add_argument("--vocab", default=",".join(waypoint.DEFAULT_OPEN_VOCAB))
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--r-angle", type=float, default=30.0)
    p.add_argument("--r-dist", type=float, default=0.75)
    p.add_argument("--tau", type=float, default=0.35)
    p.set_defaults(func=cmd_eval_wp)

    p = sub.add_parser("train-agent", help="jointly train selection + decoder")
    common(p)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--waypoints", default="gt",
                   help='"gt" or a predictor checkpoint path')
    p.add_argument("--lambda", type=float, default=0.75)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--d-th", type=float, default=3.0)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--vocab", default=",".join(waypoint.DEFAULT_OPEN_VOCAB))
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("eval-agent", help="evaluate navigation performance")
    common(p)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--agent", default=None)
    p.add_argument("--mode", choices=("high", "low"), required=True)
    p.add_argument("--waypoints", default="gt")
    p.add_argument("--policy", choices=("greedy", "teacher", "random"),
                   default="greedy")
    p.add_argument("--d-th", type=float, default=3.0)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", required=True)
    p.set_defaults(func=cmd_eval_agent)

    p = sub.add_parser("trace", help="dump per-step records for one episode")
    common(p)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--episode-id", required=True)
    p.add_argument("--mode", choices=("high", "low"), default="high")
    p.add_argument("--waypoints", default="gt")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # Config-file defaults: load before the real parse so flags override.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            overrides = json.loads(Path(cfg_path).read_text())
        except OSError as e:
            print(f"error: cannot read config: {e}", file=sys.stderr)
            return 3
        except json.JSONDecodeError as e:
            print(f"error: bad config JSON: {e}", file=sys.stderr)
            return 2
        for sp in parser._subparsers._group_actions[0].choices.values():
            sp.set_defaults(**{k: v for k, v in overrides.items()})
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ValidationError, world.MapFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
