"""Continuous 2D environment: semantic grids, ray sensing, motion physics.

The world is a grid of semantic cells (wall, floor, door, furniture, ...)
with a continuous agent pose on top. Angles are degrees; heading 0 points
along +x and RIGHT turns add +15 degrees. Positions are meters with cell
(ix, iy) covering [ix*cell_size, (ix+1)*cell_size) x [iy*cell_size, ...).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .seeds import substream

# Sentinel hit classes for rays that never hit an obstacle / left the grid.
OPEN = -1
OUT_OF_BOUNDS = -2

N_SECTORS = 12
SECTOR_SPAN = 30.0

FORWARD_STEP = 0.25
TURN_STEP = 15.0

# Fixed legend used by the procedural generator.
GEN_LEGEND = {
    0: ("wall", False),
    1: ("floor", True),
    2: ("door", True),
    3: ("stairs", True),
    4: ("sofa", False),
    5: ("table", False),
    6: ("bed", False),
    7: ("fireplace", False),
}


class MapFormatError(ValueError):
    """Raised when a map or episode document violates its schema."""


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float  # degrees in [0, 360)

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class SemanticGrid:
    """Immutable-after-construction semantic occupancy grid."""

    width: int
    height: int
    cell_size: float
    cells: np.ndarray  # (height, width) int class ids
    legend: dict[int, tuple[str, bool]]  # id -> (name, traversable)
    _dist_fields: dict[tuple[int, int], np.ndarray] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        if self.cell_size <= 0:
            raise MapFormatError("cell_size must be positive")
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(self.height, self.width)
        unknown = set(np.unique(self.cells)) - set(self.legend)
        if unknown:
            raise MapFormatError(f"cells reference class ids missing from legend: {sorted(unknown)}")
        trav_ids = [cid for cid, (_, t) in self.legend.items() if t]
        self.traversable = np.isin(self.cells, trav_ids)
        if not self.traversable.any():
            raise MapFormatError("map has no traversable cells")

    @property
    def names(self) -> dict[int, str]:
        return {cid: name for cid, (name, _) in self.legend.items()}

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_traversable(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.in_bounds(ix, iy) and bool(self.traversable[iy, ix])

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size


@dataclass
class Panorama:
    """12-sector panoramic range/semantic scan around one pose.

    depth[s, r] is the distance to the first blocking cell boundary for
    ray r of sector s (clamped to max_range); hit[s, r] is that cell's
    class id, OPEN when clamped, OUT_OF_BOUNDS when the ray left the grid.
    """

    depth: np.ndarray  # (12, R) meters
    hit: np.ndarray  # (12, R) class ids / sentinels
    max_range: float
    rays_per_sector: int
    legend_names: dict[int, str]


@dataclass
class NavGraph:
    nodes: np.ndarray  # (N, 2) positions in meters
    edges: list[tuple[int, int]]  # undirected, i < j

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        adj: dict[int, list[int]] = {i: [] for i in range(len(self.nodes))}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        self.adjacency = adj

    def neighbors(self, i: int) -> list[int]:
        return self.adjacency[i]

    def nearest_node(self, x: float, y: float) -> int:
        d = np.hypot(self.nodes[:, 0] - x, self.nodes[:, 1] - y)
        return int(np.argmin(d))


@dataclass
class Episode:
    id: str
    map_id: str
    start: Pose
    goal: tuple[float, float]
    gt_path: list[tuple[float, float]]
    instruction: list[str]


def bearing_deg(dx: float, dy: float) -> float:
    """Bearing of an offset vector, degrees in [0, 360)."""
    return math.degrees(math.atan2(dy, dx)) % 360.0


def heading_vector(heading: float) -> tuple[float, float]:
    r = math.radians(heading)
    return math.cos(r), math.sin(r)


# ---------------------------------------------------------------------------
# Map file I/O


def load_map(document: str) -> SemanticGrid:
    """Parse a map JSON document into a SemanticGrid."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as e:
        raise MapFormatError(f"invalid JSON: {e}") from e
    try:
        legend = {
            int(entry["id"]): (str(entry["name"]), bool(entry["traversable"]))
            for entry in doc["legend"]
        }
        width = int(doc["width"])
        height = int(doc["height"])
        cells = np.array(doc["cells"], dtype=np.int64)
        cell_size = float(doc["cell_size_m"])
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError(f"malformed map document: {e}") from e
    if cells.size != width * height:
        raise MapFormatError(f"expected {width * height} cells, got {cells.size}")
    return SemanticGrid(width=width, height=height, cell_size=cell_size,
                        cells=cells, legend=legend)


def dump_map(grid: SemanticGrid) -> str:
    doc = {
        "cell_size_m": grid.cell_size,
        "width": grid.width,
        "height": grid.height,
        "legend": [
            {"id": cid, "name": name, "traversable": trav}
            for cid, (name, trav) in sorted(grid.legend.items())
        ],
        "cells": grid.cells.reshape(-1).tolist(),
    }
    return json.dumps(doc)


# ---------------------------------------------------------------------------
# Sensing


def _ray(grid: SemanticGrid, x0: float, y0: float, bearing: float,
         max_range: float) -> tuple[float, int]:
    """March one ray through the grid; distance to first blocking boundary."""
    cs = grid.cell_size
    dx, dy = heading_vector(bearing)
    ix, iy = grid.cell_of(x0, y0)

    if dx > 0:
        step_x, t_max_x, t_dx = 1, ((ix + 1) * cs - x0) / dx, cs / dx
    elif dx < 0:
        step_x, t_max_x, t_dx = -1, (ix * cs - x0) / dx, -cs / dx
    else:
        step_x, t_max_x, t_dx = 0, math.inf, math.inf
    if dy > 0:
        step_y, t_max_y, t_dy = 1, ((iy + 1) * cs - y0) / dy, cs / dy
    elif dy < 0:
        step_y, t_max_y, t_dy = -1, (iy * cs - y0) / dy, -cs / dy
    else:
        step_y, t_max_y, t_dy = 0, math.inf, math.inf

    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_dx
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_dy
        if t > max_range:
            return max_range, OPEN
        if not grid.in_bounds(ix, iy):
            return t, OUT_OF_BOUNDS
        if not grid.traversable[iy, ix]:
            return t, int(grid.cells[iy, ix])


def raycast_panorama(grid: SemanticGrid, pose: Pose, rays_per_sector: int = 7,
                     max_range: float = 3.0) -> Panorama:
    """Sense a 12-sector panorama around the pose.

    Sector i is centered at relative heading i*30; its rays are evenly
    spaced over the 30-degree span.
    """
    if not grid.is_traversable(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.3f}, {pose.y:.3f}) not on a traversable cell")
    depth = np.empty((N_SECTORS, rays_per_sector))
    hit = np.empty((N_SECTORS, rays_per_sector), dtype=np.int64)
    for s in range(N_SECTORS):
        center = s * SECTOR_SPAN
        for r in range(rays_per_sector):
            rel = center - SECTOR_SPAN / 2 + SECTOR_SPAN * (r + 0.5) / rays_per_sector
            d, h = _ray(grid, pose.x, pose.y, pose.heading + rel, max_range)
            depth[s, r] = d
            hit[s, r] = h
    return Panorama(depth=depth, hit=hit, max_range=max_range,
                    rays_per_sector=rays_per_sector, legend_names=grid.names)


# ---------------------------------------------------------------------------
# Motion


LOW_ACTIONS = ("LEFT", "RIGHT", "FORWARD", "STOP")


def _segment_clear(grid: SemanticGrid, x0: float, y0: float, x1: float, y1: float) -> bool:
    """True if the swept segment stays on traversable cells.

    Sampled at cell_size/4 intervals, endpoint included.
    """
    length = math.hypot(x1 - x0, y1 - y0)
    if length == 0:
        return grid.is_traversable(x0, y0)
    n = max(1, math.ceil(length / (grid.cell_size / 4)))
    for k in range(1, n + 1):
        f = k / n
        if not grid.is_traversable(x0 + f * (x1 - x0), y0 + f * (y1 - y0)):
            return False
    return True


def step_low(grid: SemanticGrid, pose: Pose, action: str) -> tuple[Pose, bool]:
    """Apply one low-level action; collision is a result, not an error."""
    if action == "LEFT":
        return replace(pose, heading=(pose.heading - TURN_STEP) % 360.0), False
    if action == "RIGHT":
        return replace(pose, heading=(pose.heading + TURN_STEP) % 360.0), False
    if action == "STOP":
        return pose, False
    if action == "FORWARD":
        ux, uy = heading_vector(pose.heading)
        nx, ny = pose.x + FORWARD_STEP * ux, pose.y + FORWARD_STEP * uy
        if _segment_clear(grid, pose.x, pose.y, nx, ny):
            return replace(pose, x=nx, y=ny), False
        return pose, True
    raise ValueError(f"unknown low-level action: {action!r}")


# ---------------------------------------------------------------------------
# Geodesic distances (8-connected Dijkstra over traversable cells)


def _distance_field(grid: SemanticGrid, target: tuple[int, int]) -> np.ndarray:
    """Dijkstra field of geodesic distances (meters) to the target cell."""
    if target in grid._dist_fields:
        return grid._dist_fields[target]
    h, w = grid.height, grid.width
    cs = grid.cell_size
    dist = np.full((h, w), math.inf)
    tx, ty = target
    if not grid.traversable[ty, tx]:
        grid._dist_fields[target] = dist
        return dist
    dist[ty, tx] = 0.0
    pq = [(0.0, tx, ty)]
    diag = cs * math.sqrt(2.0)
    trav = grid.traversable
    while pq:
        d, ix, iy = heapq.heappop(pq)
        if d > dist[iy, ix]:
            continue
        for ddx, ddy in ((1, 0), (-1, 0), (0, 1), (0, -1),
                         (1, 1), (1, -1), (-1, 1), (-1, -1)):
            jx, jy = ix + ddx, iy + ddy
            if 0 <= jx < w and 0 <= jy < h and trav[jy, jx]:
                nd = d + (diag if ddx and ddy else cs)
                if nd < dist[jy, jx]:
                    dist[jy, jx] = nd
                    heapq.heappush(pq, (nd, jx, jy))
    grid._dist_fields[target] = dist
    return dist


def geodesic_distance(grid: SemanticGrid, a: tuple[float, float],
                      b: tuple[float, float]) -> float:
    """Shortest 8-connected path length over traversable cell centers.

    Returns inf when disconnected or when either endpoint cell is not
    traversable; raises for positions outside the grid.
    """
    ca = grid.cell_of(*a)
    cb = grid.cell_of(*b)
    for (ix, iy), p in ((ca, a), (cb, b)):
        if not grid.in_bounds(ix, iy):
            raise ValueError(f"position {p} outside the grid")
    field_b = _distance_field(grid, cb)
    return float(field_b[ca[1], ca[0]])


# ---------------------------------------------------------------------------
# Procedural worlds


@dataclass(frozen=True)
class WorldGenParams:
    width: int = 80
    height: int = 80
    cell_size: float = 0.25
    rooms: int = 5
    extra_corridors: int = 1
    furniture: int = 6
    stairs: int = 1


def _carve_corridor(cells: np.ndarray, rings: list[tuple[int, int, int, int]],
                    a: tuple[int, int], b: tuple[int, int], half: int) -> None:
    """L-shaped corridor from a to b; cells on a room's wall ring become doors."""
    h, w = cells.shape

    def carve(ix: int, iy: int) -> None:
        for oy in range(-half, half + 1):
            for ox in range(-half, half + 1):
                jx, jy = ix + ox, iy + oy
                if 1 <= jx < w - 1 and 1 <= jy < h - 1 and cells[jy, jx] == 0:
                    on_ring = any(
                        (x0 - 1 <= jx <= x1 and y0 - 1 <= jy <= y1)
                        and (jx in (x0 - 1, x1) or jy in (y0 - 1, y1))
                        for x0, y0, x1, y1 in rings
                    )
                    cells[jy, jx] = 2 if on_ring else 1

    x, y = a
    step = 1 if b[0] >= x else -1
    while x != b[0]:
        carve(x, y)
        x += step
    step = 1 if b[1] >= y else -1
    while y != b[1]:
        carve(x, y)
        y += step
    carve(x, y)


def _connected_traversable(cells: np.ndarray, legend: dict[int, tuple[str, bool]]) -> bool:
    """All traversable cells form one 4-connected component."""
    trav_ids = [cid for cid, (_, t) in legend.items() if t]
    trav = np.isin(cells, trav_ids)
    total = int(trav.sum())
    if total == 0:
        return False
    ys, xs = np.nonzero(trav)
    stack = [(int(xs[0]), int(ys[0]))]
    seen = np.zeros_like(trav)
    seen[ys[0], xs[0]] = True
    count = 0
    h, w = cells.shape
    while stack:
        ix, iy = stack.pop()
        count += 1
        for ddx, ddy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jx, jy = ix + ddx, iy + ddy
            if 0 <= jx < w and 0 <= jy < h and trav[jy, jx] and not seen[jy, jx]:
                seen[jy, jx] = True
                stack.append((jx, jy))
    return count == total


def gen_world(seed: int, params: WorldGenParams = WorldGenParams()) -> SemanticGrid:
    """Generate a deterministic room-and-corridor world with furniture."""
    if params.rooms < 1 or params.furniture < 0 or params.width < 16 or params.height < 16:
        raise ValueError(f"infeasible generation params: {params}")
    rng = substream(seed, "world")
    w, h = params.width, params.height
    cells = np.zeros((h, w), dtype=np.int64)  # all wall

    # Rooms: non-overlapping interiors with a 2-cell gap between them.
    rooms: list[tuple[int, int, int, int]] = []  # x0, y0, x1, y1 (interior, half-open)
    attempts = 0
    while len(rooms) < params.rooms:
        attempts += 1
        if attempts > 400 * params.rooms:
            raise ValueError("could not place the requested rooms; params infeasible for grid size")
        rw = int(rng.integers(9, 17))
        rh = int(rng.integers(9, 17))
        x0 = int(rng.integers(2, max(3, w - rw - 2)))
        y0 = int(rng.integers(2, max(3, h - rh - 2)))
        rect = (x0, y0, x0 + rw, y0 + rh)
        if all(rect[2] + 2 <= ox0 or ox1 + 2 <= rect[0] or
               rect[3] + 2 <= oy0 or oy1 + 2 <= rect[1]
               for ox0, oy0, ox1, oy1 in rooms):
            rooms.append(rect)
    for x0, y0, x1, y1 in rooms:
        cells[y0:y1, x0:x1] = 1

    centers = [((x0 + x1) // 2, (y0 + y1) // 2) for x0, y0, x1, y1 in rooms]
    order = rng.permutation(len(rooms))
    for k in range(len(rooms) - 1):
        _carve_corridor(cells, rooms, centers[order[k]], centers[order[k + 1]], half=2)
    for _ in range(params.extra_corridors):
        if len(rooms) < 2:
            break
        i, j = rng.choice(len(rooms), size=2, replace=False)
        _carve_corridor(cells, rooms, centers[i], centers[j], half=2)

    # Stairs patches inside rooms (traversable, no connectivity risk).
    for _ in range(params.stairs):
        x0, y0, x1, y1 = rooms[int(rng.integers(len(rooms)))]
        sx = int(rng.integers(x0 + 1, x1 - 2))
        sy = int(rng.integers(y0 + 1, y1 - 2))
        cells[sy:sy + 2, sx:sx + 2] = 3

    # Furniture: random blocks that must not seal connectivity.
    placed = 0
    tries = 0
    while placed < params.furniture and tries < 50 * max(1, params.furniture):
        tries += 1
        cls = int(rng.integers(4, 8))
        fw = int(rng.integers(1, 3))
        fh = int(rng.integers(1, 3))
        x0, y0, x1, y1 = rooms[int(rng.integers(len(rooms)))]
        if x1 - x0 <= fw + 5 or y1 - y0 <= fh + 5:
            continue
        fx = int(rng.integers(x0 + 3, x1 - fw - 2))
        fy = int(rng.integers(y0 + 3, y1 - fh - 2))
        patch = cells[fy:fy + fh, fx:fx + fw].copy()
        if not (patch == 1).all():
            continue
        # Keep a full floor ring around furniture so no pinch narrower
        # than two cells can appear.
        near = cells[fy - 1:fy + fh + 1, fx - 1:fx + fw + 1]
        if not (near == 1).all():
            continue
        cells[fy:fy + fh, fx:fx + fw] = cls
        if _connected_traversable(cells, GEN_LEGEND):
            placed += 1
        else:
            cells[fy:fy + fh, fx:fx + fw] = patch

    grid = SemanticGrid(width=w, height=h, cell_size=params.cell_size,
                        cells=cells, legend=dict(GEN_LEGEND))
    if not _connected_traversable(cells, GEN_LEGEND):
        raise ValueError("generated world is not connected; params infeasible")
    return grid


# ---------------------------------------------------------------------------
# Navigation graph


def _segment_clear_offset(grid: SemanticGrid, p: np.ndarray, q: np.ndarray,
                          clearance: float) -> bool:
    """Sight-line check with lateral clearance (three parallel segments)."""
    d = q - p
    length = float(np.hypot(*d))
    if length == 0:
        return grid.is_traversable(*p)
    offsets = [0.0] if clearance == 0 else [0.0, clearance, -clearance]
    perp = np.array([-d[1], d[0]]) / length
    for off in offsets:
        a = p + off * perp
        b = q + off * perp
        if not grid.is_traversable(*a):
            return False
        if not _segment_clear(grid, a[0], a[1], b[0], b[1]):
            return False
    return True


def build_nav_graph(grid: SemanticGrid, spacing: float = 2.0,
                    clearance: float = 0.25) -> NavGraph:
    """Subsample traversable cell centers into a visibility graph.

    Nodes are at least `spacing` apart; edges connect mutually visible
    nodes whose straight-line distance is in [0.25, 3.0] m.
    """
    if not (0.5 <= spacing <= 3.0):
        raise ValueError(f"spacing must be in [0.5, 3.0], got {spacing}")
    # Prefer interior cells (full 3x3 traversable neighborhood) so nodes
    # keep wall clearance; fall back to all traversable cells if needed.
    t = grid.traversable
    interior = t.copy()
    interior[[0, -1], :] = False
    interior[:, [0, -1]] = False
    for ddx in (-1, 0, 1):
        for ddy in (-1, 0, 1):
            interior[1:-1, 1:-1] &= t[1 + ddy:t.shape[0] - 1 + ddy,
                                      1 + ddx:t.shape[1] - 1 + ddx]
    ys, xs = np.nonzero(interior if interior.any() else t)
    kept: list[tuple[float, float]] = []
    for iy, ix in zip(ys.tolist(), xs.tolist()):
        cx, cy = grid.cell_center(ix, iy)
        if all((cx - kx) ** 2 + (cy - ky) ** 2 >= spacing ** 2 for kx, ky in kept):
            kept.append((cx, cy))
    nodes = np.array(kept).reshape(-1, 2)
    edges = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            d = float(np.hypot(*(nodes[j] - nodes[i])))
            if 0.25 <= d <= 3.0 and _segment_clear_offset(grid, nodes[i], nodes[j], clearance):
                edges.append((i, j))
    return NavGraph(nodes=nodes, edges=edges)


def _graph_shortest_path(graph: NavGraph, src: int, dst: int) -> tuple[float, list[int]]:
    """Dijkstra over graph edges with Euclidean weights."""
    n = len(graph.nodes)
    dist = [math.inf] * n
    prev = [-1] * n
    dist[src] = 0.0
    pq = [(0.0, src)]
    while pq:
        d, i = heapq.heappop(pq)
        if d > dist[i]:
            continue
        if i == dst:
            break
        for j in graph.neighbors(i):
            nd = d + float(np.hypot(*(graph.nodes[j] - graph.nodes[i])))
            if nd < dist[j]:
                dist[j] = nd
                prev[j] = i
                heapq.heappush(pq, (nd, j))
    if math.isinf(dist[dst]):
        return math.inf, []
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return dist[dst], path[::-1]


def _dominant_class(grid: SemanticGrid, a: np.ndarray, b: np.ndarray) -> str:
    """Most common traversable class name along the segment (ties: lowest id)."""
    length = float(np.hypot(*(b - a)))
    n = max(2, int(length / grid.cell_size) + 1)
    counts: dict[int, int] = {}
    for k in range(n + 1):
        p = a + (k / n) * (b - a)
        ix, iy = grid.cell_of(*p)
        if grid.in_bounds(ix, iy) and grid.traversable[iy, ix]:
            cid = int(grid.cells[iy, ix])
            counts[cid] = counts.get(cid, 0) + 1
    if not counts:
        return "floor"
    best = max(sorted(counts), key=lambda c: counts[c])
    return grid.names[best]


def _quantize_heading(bearing: float) -> float:
    return (math.floor(bearing / TURN_STEP + 0.5) * TURN_STEP) % 360.0


def synth_instruction(grid: SemanticGrid, path: np.ndarray) -> list[str]:
    """Deterministic micro-instruction: turn words, forward markers, and the
    dominant class token of each traversed region, terminated by "stop"."""
    tokens: list[str] = []
    prev_bearing: float | None = None
    prev_class: str | None = None
    for k in range(len(path) - 1):
        seg = path[k + 1] - path[k]
        b = bearing_deg(seg[0], seg[1])
        if prev_bearing is not None:
            turn = ((b - prev_bearing + 180.0) % 360.0) - 180.0
            if turn > 30.0:
                tokens.append("right")
            elif turn < -30.0:
                tokens.append("left")
        tokens.append("forward")
        cls = _dominant_class(grid, path[k], path[k + 1])
        if cls != prev_class:
            tokens.append(cls)
            prev_class = cls
        prev_bearing = b
    tokens.append("stop")
    return tokens


def make_episodes(grid: SemanticGrid, graph: NavGraph, n: int, seed: int,
                  map_id: str = "map", min_geodesic: float = 3.0,
                  max_geodesic: float = math.inf) -> list[Episode]:
    """Sample start/goal node pairs with graph geodesic >= min_geodesic."""
    # Restrict to the largest connected component.
    comp = _largest_component(graph)
    if len(comp) < 2:
        raise ValueError("graph has no connected component with >= 2 nodes")
    rng = substream(seed, "episodes")
    episodes: list[Episode] = []
    used: set[tuple[int, int]] = set()
    attempts = 0
    while len(episodes) < n:
        attempts += 1
        if attempts > 400 * n:
            raise ValueError(f"could not sample {n} distinct episodes with geodesic >= {min_geodesic}")
        s, g = rng.choice(comp, size=2, replace=False)
        s, g = int(s), int(g)
        if (s, g) in used:
            continue
        length, path_idx = _graph_shortest_path(graph, s, g)
        if not (min_geodesic <= length <= max_geodesic):
            continue
        used.add((s, g))
        path = graph.nodes[path_idx]
        heading = _quantize_heading(bearing_deg(*(path[1] - path[0])))
        start = Pose(x=float(path[0][0]), y=float(path[0][1]), heading=heading)
        episodes.append(Episode(
            id=f"ep{len(episodes):04d}",
            map_id=map_id,
            start=start,
            goal=(float(path[-1][0]), float(path[-1][1])),
            gt_path=[(float(p[0]), float(p[1])) for p in path],
            instruction=synth_instruction(grid, path),
        ))
    return episodes


def _largest_component(graph: NavGraph) -> list[int]:
    seen: set[int] = set()
    best: list[int] = []
    for root in range(len(graph.nodes)):
        if root in seen:
            continue
        comp = [root]
        seen.add(root)
        stack = [root]
        while stack:
            i = stack.pop()
            for j in graph.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    comp.append(j)
                    stack.append(j)
        if len(comp) > len(best):
            best = comp
    return sorted(best)


# ---------------------------------------------------------------------------
# Episode file I/O (JSON Lines, positions fixed to 6 decimals)


def _f6(v: float) -> str:
    return f"{v:.6f}"


def episode_to_json(ep: Episode) -> str:
    parts = [
        f'"id": {json.dumps(ep.id)}',
        f'"map_id": {json.dumps(ep.map_id)}',
        f'"start": {{"x": {_f6(ep.start.x)}, "y": {_f6(ep.start.y)}, "heading": {_f6(ep.start.heading)}}}',
        f'"goal": [{_f6(ep.goal[0])}, {_f6(ep.goal[1])}]',
        '"gt_path": [' + ", ".join(f"[{_f6(x)}, {_f6(y)}]" for x, y in ep.gt_path) + "]",
        f'"instruction": {json.dumps(ep.instruction)}',
    ]
    return "{" + ", ".join(parts) + "}"


def episode_from_json(line: str) -> Episode:
    try:
        doc = json.loads(line)
        return Episode(
            id=str(doc["id"]),
            map_id=str(doc["map_id"]),
            start=Pose(x=float(doc["start"]["x"]), y=float(doc["start"]["y"]),
                       heading=float(doc["start"]["heading"])),
            goal=(float(doc["goal"][0]), float(doc["goal"][1])),
            gt_path=[(float(x), float(y)) for x, y in doc["gt_path"]],
            instruction=[str(t) for t in doc["instruction"]],
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
        raise MapFormatError(f"malformed episode line: {e}") from e


def write_episodes(path: str, episodes: list[Episode]) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(episode_to_json(ep) + "\n")


def read_episodes(path: str) -> list[Episode]:
    with open(path) as f:
        return [episode_from_json(line) for line in f if line.strip()]
