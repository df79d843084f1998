"""Grid MAPF baselines: focal A*, grid ECBS, and statistical cost maps.

Robots travel on a 4-connected grid (step 0.1) with an extra wait action.
The data-driven variant derives directed edge costs from demonstration
trajectories: edges that demonstrations follow get cost 1 + 10/m (m = number
of trajectories that incremented the edge), other move edges out of
data-visited cells get the full 1 + 10 penalty, and edges out of cells no
trajectory visited keep the uniform cost 1. Conflicts between grid paths are
found with the same disk-overlap test used for diffusion trajectories.
"""

import hashlib
import heapq
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RobotShape, World, disks_in_collision
from .trajectory import Trajectory

GRID_STEP = 0.1
FOCAL_BOUND = 1.5
# Action order fixes tie-breaking: up, down, left, right (wait is index 4).
ACTIONS = np.array([(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)])
N_MOVES = 4


@dataclass
class GridGraph:
    """Free cells of a world discretized at `step`, plus directed move costs."""

    world: World
    step: float = GRID_STEP
    robot_radius: float = 0.05
    origin: np.ndarray = None
    nx: int = 0
    ny: int = 0
    free: np.ndarray = None

    def __post_init__(self):
        lo, hi = self.world.bounds_lo, self.world.bounds_hi
        self.origin = lo + self.step / 2.0
        self.nx = int(round((hi[0] - lo[0]) / self.step))
        self.ny = int(round((hi[1] - lo[1]) / self.step))
        xs = self.origin[0] + self.step * np.arange(self.nx)
        ys = self.origin[1] + self.step * np.arange(self.ny)
        pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        self.free = ~disks_in_collision(self.world, pts, self.robot_radius)

    def pos(self, cell) -> np.ndarray:
        return self.origin + self.step * np.asarray(cell, float)

    def cell_of(self, p) -> tuple:
        c = np.round((np.asarray(p, float) - self.origin) / self.step).astype(int)
        return (int(np.clip(c[0], 0, self.nx - 1)),
                int(np.clip(c[1], 0, self.ny - 1)))

    def nearest_free_cell(self, p) -> tuple:
        c = self.cell_of(p)
        if self.free[c]:
            return c
        best, best_d = None, np.inf
        for i in range(self.nx):
            for j in range(self.ny):
                if self.free[i, j]:
                    d = np.linalg.norm(self.pos((i, j)) - p)
                    if d < best_d:
                        best, best_d = (i, j), d
        if best is None:
            raise ValueError("no free cells")
        return best

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.nx and 0 <= cell[1] < self.ny

    def uniform_costs(self) -> np.ndarray:
        return np.ones((self.nx, self.ny, N_MOVES))


# --------------------------
# Statistical cost maps
# --------------------------
def cost_map_from_data(dataset, graph: GridGraph) -> np.ndarray:
    """Directed move-edge costs derived from demonstration occupancy."""
    states = dataset if isinstance(dataset, np.ndarray) else np.stack(
        [d.traj.states for d in dataset])
    counts = np.zeros((graph.nx, graph.ny, N_MOVES), dtype=int)
    visited_any = np.zeros((graph.nx, graph.ny), dtype=bool)
    for traj in states:
        pos = traj[:, :2]
        cells = [graph.cell_of(p) for p in pos]
        seen = set()
        edges = set()
        for t, c in enumerate(cells):
            if c in seen:
                continue
            seen.add(c)
            visited_any[c] = True
            out_idx = next((s for s in range(t + 1, len(cells))
                            if cells[s] != c), None)
            if out_idx is None:
                continue
            d = pos[out_idx] - graph.pos(c)
            dots = ACTIONS[:N_MOVES] @ d
            edges.add((c, int(np.argmax(dots))))
        for c, a in edges:
            counts[c[0], c[1], a] += 1
    costs = np.ones((graph.nx, graph.ny, N_MOVES))
    costs[visited_any] = 1.0 + 10.0
    m = counts > 0
    costs[m] = 1.0 + 10.0 / counts[m]
    return costs


def cost_map_cached(dataset_path, graph: GridGraph,
                    cache_dir=None) -> np.ndarray:
    """Cost map for a dataset file, cached on disk keyed by content hash."""
    from .worlds import load_dataset
    dataset_path = Path(dataset_path)
    digest = hashlib.sha256(dataset_path.read_bytes()).hexdigest()[:16]
    cache_dir = Path(cache_dir) if cache_dir else dataset_path.parent
    cache = cache_dir / f"{dataset_path.stem}.costmap-{digest}.npz"
    if cache.exists():
        with np.load(cache) as data:
            return data["costs"]
    states, _ = load_dataset(dataset_path)
    costs = cost_map_from_data(states, graph)
    np.savez_compressed(cache, costs=costs)
    return costs


# --------------------------
# Focal A* on the time-expanded graph
# --------------------------
@dataclass(frozen=True)
class GridPath:
    cells: tuple          # one cell per time step
    cost: float

    def __len__(self):
        return len(self.cells)


def _pad(cells, length):
    return cells + (cells[-1],) * (length - len(cells))


def _conflict_count(graph, cells, t0, other_paths, radius):
    """Disk-overlap count of one move against other agents (focal ordering)."""
    hits = 0
    a0 = graph.pos(cells[0])
    a1 = graph.pos(cells[1])
    for other in other_paths:
        oc = _pad(other, t0 + 2)
        b0 = graph.pos(oc[t0])
        b1 = graph.pos(oc[t0 + 1])
        for s in (0.0, 0.25, 0.5, 0.75, 1.0):
            pa = a0 + (a1 - a0) * s
            pb = b0 + (b1 - b0) * s
            if np.linalg.norm(pa - pb) < 2 * radius:
                hits += 1
                break
    return hits


def astar_focal(graph: GridGraph, costs: np.ndarray, start, goal,
                vertex_constraints=frozenset(), edge_constraints=frozenset(),
                w: float = FOCAL_BOUND, other_paths=(),
                radius: float = 0.05) -> GridPath | None:
    """Bounded-suboptimal time-expanded search (focal list, no re-expansion).

    OPEN is ordered by f = g + h (h = Manhattan distance scaled by the
    minimum move cost, admissible); FOCAL holds nodes with f <= w * f_min,
    ordered by accumulated conflicts against `other_paths`. Returns a path
    with cost <= w * optimal, or None within the expansion horizon.
    """
    start, goal = tuple(start), tuple(goal)
    if not (graph.free[start] and graph.free[goal]):
        return None
    min_move = float(costs.min())

    def h(cell):
        return (abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])) * min_move

    lb = abs(start[0] - goal[0]) + abs(start[1] - goal[1])
    t_cap = max(4 * lb, 16)
    goal_clear_t = max([t for (c, t) in vertex_constraints if c == goal],
                       default=-1)
    if vertex_constraints or edge_constraints:
        t_cap = max(t_cap, goal_clear_t + 2,
                    max([t for (_, _, t) in edge_constraints], default=-1) + 2)

    g_best = {(start, 0): 0.0}
    parent = {}
    open_heap = [(h(start), 0, (start, 0), 0.0, 0)]  # f, seq, state, g, d
    focal = []
    closed = set()
    focal_bound = -np.inf
    seq = itertools.count(1)

    def push_focal(entry):
        f, _, state, g, d = entry
        heapq.heappush(focal, (d, f, next(seq), state, g))

    while open_heap or focal:
        while open_heap and open_heap[0][0] <= focal_bound + 1e-12:
            push_focal(heapq.heappop(open_heap))
        if not focal:
            if not open_heap:
                break
            focal_bound = w * open_heap[0][0]
            continue
        if open_heap and w * open_heap[0][0] > focal_bound:
            focal_bound = w * open_heap[0][0]
            while open_heap and open_heap[0][0] <= focal_bound + 1e-12:
                push_focal(heapq.heappop(open_heap))
        d, f, _, (cell, t), g = heapq.heappop(focal)
        if (cell, t) in closed:
            continue
        if g > g_best.get((cell, t), np.inf) + 1e-12:
            continue
        closed.add((cell, t))
        if cell == goal and t > goal_clear_t:
            cells = [cell]
            cur = (cell, t)
            while cur in parent:
                cur = parent[cur]
                cells.append(cur[0])
            return GridPath(cells=tuple(reversed(cells)), cost=g)
        if t >= t_cap:
            continue
        for a in range(len(ACTIONS)):
            nxt = (cell[0] + ACTIONS[a][0], cell[1] + ACTIONS[a][1])
            if not graph.in_bounds(nxt) or not graph.free[nxt]:
                continue
            if (nxt, t + 1) in vertex_constraints:
                continue
            if (cell, nxt, t + 1) in edge_constraints:
                continue
            step_cost = 1.0 if a == N_MOVES else float(costs[cell[0], cell[1], a])
            ng = g + step_cost
            state = (nxt, t + 1)
            if state in closed or ng >= g_best.get(state, np.inf) - 1e-12:
                continue
            g_best[state] = ng
            parent[state] = (cell, t)
            nd = d + (_conflict_count(graph, (cell, nxt), t, other_paths,
                                      radius) if other_paths else 0)
            nf = ng + h(nxt)
            entry = (nf, next(seq), state, ng, nd)
            if nf <= focal_bound + 1e-12:
                push_focal(entry)
            else:
                heapq.heappush(open_heap, entry)
    return None


def dijkstra_cost(graph: GridGraph, costs: np.ndarray, start, goal) -> float:
    """Optimal static path cost (oracle for the suboptimality bound)."""
    start, goal = tuple(start), tuple(goal)
    dist = {start: 0.0}
    heap = [(0.0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == goal:
            return d
        if d > dist.get(cell, np.inf):
            continue
        for a in range(N_MOVES):
            nxt = (cell[0] + ACTIONS[a][0], cell[1] + ACTIONS[a][1])
            if not graph.in_bounds(nxt) or not graph.free[nxt]:
                continue
            nd = d + float(costs[cell[0], cell[1], a])
            if nd < dist.get(nxt, np.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return np.inf


# --------------------------
# Grid conflicts and ECBS
# --------------------------
def find_grid_conflicts(graph: GridGraph, paths, radius: float,
                        substeps: int = 4):
    """(i, j, t, substep) tuples where two robots' disks overlap."""
    length = max(len(p) for p in paths)
    cells = [_pad(tuple(p.cells) if isinstance(p, GridPath) else tuple(p),
                  length) for p in paths]
    pts = np.array([[graph.pos(c) for c in cs] for cs in cells])
    conflicts = []
    fr = np.arange(substeps) / substeps
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            for t in range(length - 1):
                ai = pts[i, t] + (pts[i, t + 1] - pts[i, t]) * fr[:, None]
                aj = pts[j, t] + (pts[j, t + 1] - pts[j, t]) * fr[:, None]
                d = np.linalg.norm(ai - aj, axis=1)
                hit = np.nonzero(d < 2 * radius)[0]
                if hit.size:
                    conflicts.append((i, j, t, int(hit[0])))
            if np.linalg.norm(pts[i, -1] - pts[j, -1]) < 2 * radius:
                conflicts.append((i, j, length - 1, 0))
    conflicts.sort(key=lambda c: (c[2], c[0], c[1]))
    return conflicts


@dataclass
class _GridNode:
    vcons: list
    econs: list
    paths: list
    n_conflicts: int
    seq: int


def ecbs_grid(graph: GridGraph, costs: np.ndarray, starts, goals,
              w: float = FOCAL_BOUND, radius: float = 0.05,
              time_limit: float = 60.0, max_nodes: int = 400):
    """Conflict-tree search over grid paths with focal A* low level.

    Nodes are ordered by conflict count (ties by insertion), matching the
    strategy used for the diffusion planners. Returns (paths, stats);
    paths is None on failure.
    """
    t0 = time.perf_counter()
    n = len(starts)
    starts = [tuple(s) for s in starts]
    goals = [tuple(g) for g in goals]
    paths = []
    for i in range(n):
        p = astar_focal(graph, costs, starts[i], goals[i], w=w,
                        other_paths=[q.cells for q in paths], radius=radius)
        if p is None:
            return None, {"reason": "no_root_path", "nodes_expanded": 0,
                          "wall_time": time.perf_counter() - t0}
        paths.append(p)
    root = _GridNode([set() for _ in range(n)], [set() for _ in range(n)],
                     paths, len(find_grid_conflicts(graph, paths, radius)), 0)
    open_list = [(root.n_conflicts, 0, root)]
    nodes_expanded = 0
    next_seq = 1
    while open_list:
        if time.perf_counter() - t0 > time_limit or nodes_expanded >= max_nodes:
            return None, {"reason": "limit", "nodes_expanded": nodes_expanded,
                          "wall_time": time.perf_counter() - t0}
        _, _, node = heapq.heappop(open_list)
        nodes_expanded += 1
        if node.n_conflicts == 0:
            return node.paths, {"nodes_expanded": nodes_expanded,
                                "wall_time": time.perf_counter() - t0}
        i, j, t, sub = find_grid_conflicts(graph, node.paths, radius)[0]
        for robot in (i, j):
            cells = _pad(node.paths[robot].cells, t + 2)
            vcons = [set(s) for s in node.vcons]
            econs = [set(s) for s in node.econs]
            if sub == 0:
                vcons[robot].add((cells[t], t))
            else:
                econs[robot].add((cells[t], cells[t + 1], t + 1))
            others = [node.paths[r].cells for r in range(n) if r != robot]
            p = astar_focal(graph, costs, starts[robot], goals[robot],
                            vertex_constraints=frozenset(vcons[robot]),
                            edge_constraints=frozenset(econs[robot]),
                            w=w, other_paths=others, radius=radius)
            if p is None:
                continue
            new_paths = list(node.paths)
            new_paths[robot] = p
            child = _GridNode(vcons, econs, new_paths,
                              len(find_grid_conflicts(graph, new_paths, radius)),
                              next_seq)
            heapq.heappush(open_list, (child.n_conflicts, child.seq, child))
            next_seq += 1
    return None, {"reason": "exhausted", "nodes_expanded": nodes_expanded,
                  "wall_time": time.perf_counter() - t0}


# --------------------------
# Conversion to trajectories (shared validator / adherence scoring)
# --------------------------
def grid_path_to_trajectory(graph: GridGraph, path, speed: float = 0.5,
                            length: int | None = None) -> Trajectory:
    """Constant velocity per edge; dt = step / speed."""
    cells = tuple(path.cells) if isinstance(path, GridPath) else tuple(path)
    if length is not None:
        cells = _pad(cells, length)
    dt = graph.step / speed
    pos = np.array([graph.pos(c) for c in cells])
    vel = np.diff(pos, axis=0, append=pos[-1:]) / dt
    return Trajectory(states=np.hstack([pos, vel]), dt=dt)


def grid_paths_to_trajectories(graph: GridGraph, paths, speed: float = 0.5):
    length = max(len(p) for p in paths)
    length = max(length, 2)
    return [grid_path_to_trajectory(graph, p, speed, length) for p in paths]
