"""Shared fixtures: hand-built grids and small generated corpora."""

from __future__ import annotations

import numpy as np
import pytest

from dualnav import world

WALL, FLOOR = 0, 1
BASE_LEGEND = {0: ("wall", False), 1: ("floor", True)}


def make_grid(cells: np.ndarray, cell_size: float = 0.25,
              legend: dict | None = None) -> world.SemanticGrid:
    cells = np.asarray(cells, dtype=np.int64)
    return world.SemanticGrid(width=cells.shape[1], height=cells.shape[0],
                              cell_size=cell_size, cells=cells,
                              legend=dict(legend or BASE_LEGEND))


def open_room(n: int = 44, cell_size: float = 0.25) -> world.SemanticGrid:
    """Walled square room of floor, big enough to out-range the sensor."""
    cells = np.full((n, n), FLOOR)
    cells[0, :] = cells[-1, :] = WALL
    cells[:, 0] = cells[:, -1] = WALL
    return make_grid(cells, cell_size)


def corridor(length_cells: int = 40, width_cells: int = 3,
             cell_size: float = 0.25) -> world.SemanticGrid:
    cells = np.full((width_cells + 2, length_cells + 2), WALL)
    cells[1:1 + width_cells, 1:1 + length_cells] = FLOOR
    return make_grid(cells, cell_size)


@pytest.fixture(scope="session")
def room_grid():
    return open_room()


@pytest.fixture(scope="session")
def gen_grid():
    return world.gen_world(7)


@pytest.fixture(scope="session")
def gen_graph(gen_grid):
    return world.build_nav_graph(gen_grid, spacing=1.5)


@pytest.fixture(scope="session")
def fixture_corpus():
    """Three small worlds with graphs and short episodes (training-style)."""
    grids, graphs, episodes = {}, {}, []
    for seed in (1, 2, 4):
        gid = f"m{seed}"
        grid = world.gen_world(seed)
        graph = world.build_nav_graph(grid, spacing=1.5)
        grids[gid] = grid
        graphs[gid] = graph
        episodes += world.make_episodes(grid, graph, 6, seed=3 + seed,
                                        map_id=gid, max_geodesic=10.0)
    return grids, graphs, episodes
