"""Per-map demonstration datasets and data-adherence scoring.

Each tile kind has an associated motion pattern. Demonstrations are
procedurally generated trajectories exhibiting that pattern (collision-free,
adherence 1 by construction); the adherence functions score arbitrary
trajectories against the pattern in the tile-local frame:

  empty       fraction of states within l/10 of the line through the first
              and last configuration (l = their distance)
  highways    1 if the cumulative signed angle about the tile center is
              positive (counter-clockwise), else 0
  conveyor    1 if some contiguous section enters the top corridor from the
              right and leaves from the left, or enters the bottom corridor
              from the left and leaves from the right, else 0
  drop_region 1 if some consecutive run of >= 25% of the steps stays inside
              one of the 16 drop-off disks, else 0
"""

import heapq
import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import (CONVEYOR_WALL_X, CONVEYOR_WALL_Y_HI, ROBOT_RADIUS,
                       TileKind, World, disks_in_collision,
                       drop_region_centers, sdf, segment_clear,
                       single_tile_world)
from .trajectory import DEFAULT_DT, DEFAULT_H, Trajectory

DEMO_CLEARANCE = 0.09  # routing clearance; leaves room for spline rounding
DROP_PAUSE_FRACTION = 0.30  # > the 0.25 scoring threshold, with margin


@dataclass(frozen=True)
class Demonstration:
    traj: Trajectory
    map_kind: TileKind
    seed: int


# --------------------------
# Adherence scoring
# --------------------------
def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _empty_score(pos: np.ndarray) -> float:
    a, b = pos[0], pos[-1]
    l = np.linalg.norm(b - a)
    if l < 1e-12:
        return 1.0 if np.max(np.linalg.norm(pos - a, axis=1)) < 1e-9 else 0.0
    d = np.abs(_cross2(b - a, pos - a)) / l
    return float(np.mean(d < l / 10.0))


def _highways_score(pos: np.ndarray) -> float:
    p, q = pos[:-1], pos[1:]
    ang = np.arctan2(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0],
                     np.sum(p * q, axis=1))
    return 1.0 if float(np.sum(ang)) > 0.0 else 0.0


def _crossings(x: np.ndarray, y: np.ndarray, plane: float, leftward: bool):
    """Indices t where segment t->t+1 crosses x=plane in the given direction,
    with the y value at the crossing."""
    x0, x1 = x[:-1], x[1:]
    if leftward:
        mask = (x0 > plane) & (x1 <= plane)
    else:
        mask = (x0 < plane) & (x1 >= plane)
    idx = np.nonzero(mask)[0]
    frac = (plane - x0[idx]) / (x1[idx] - x0[idx])
    ycross = y[idx] + frac * (y[idx + 1] - y[idx])
    return idx, ycross


def _corridor_traversal(pos: np.ndarray, y_lo: float, y_hi: float,
                        enter_right: bool) -> bool:
    """Contiguous section entering at one mouth and leaving at the other,
    staying inside the corridor rectangle in between."""
    x, y = pos[:, 0], pos[:, 1]
    xm = CONVEYOR_WALL_X
    in_band = (y > y_lo) & (y < y_hi)
    ins, y_in = _crossings(x, y, xm if enter_right else -xm, leftward=enter_right)
    outs, y_out = _crossings(x, y, -xm if enter_right else xm, leftward=enter_right)
    ok_in = ins[(y_in > y_lo) & (y_in < y_hi)]
    ok_out = outs[(y_out > y_lo) & (y_out < y_hi)]
    inside = in_band & (np.abs(x) <= xm)
    for t_in in ok_in:
        later = ok_out[ok_out >= t_in]
        if later.size == 0:
            continue
        t_out = later[0]
        if np.all(inside[t_in + 1:t_out + 1]):
            return True
    return False


def _conveyor_score(pos: np.ndarray) -> float:
    top = _corridor_traversal(pos, CONVEYOR_WALL_Y_HI, 1.0, enter_right=True)
    bot = _corridor_traversal(pos, -1.0, -CONVEYOR_WALL_Y_HI, enter_right=False)
    return 1.0 if (top or bot) else 0.0


def _drop_region_score(pos: np.ndarray) -> float:
    from .geometry import DROP_REGION_RADIUS
    h = pos.shape[0]
    need = 0.25 * h
    for c in drop_region_centers():
        inside = np.linalg.norm(pos - c, axis=1) <= DROP_REGION_RADIUS
        run = best = 0
        for flag in inside:
            run = run + 1 if flag else 0
            best = max(best, run)
        if best >= need:
            return 1.0
    return 0.0


_SCORERS = {
    TileKind.EMPTY: _empty_score,
    TileKind.HIGHWAYS: _highways_score,
    TileKind.CONVEYOR: _conveyor_score,
    TileKind.DROP_REGION: _drop_region_score,
}


def adherence_positions(kind: TileKind, pos_local: np.ndarray) -> float:
    """Adherence of a position sequence given in the tile-local frame."""
    if kind not in _SCORERS:
        raise ValueError(f"unknown tile kind: {kind!r}")
    if pos_local.shape[0] < 2:
        return 1.0
    return _SCORERS[kind](np.asarray(pos_local, float))


def adherence(kind: TileKind, traj: Trajectory) -> float:
    return adherence_positions(TileKind(kind), traj.positions)


def traversed_tiles(traj: Trajectory, world: World, min_steps: int = 5) -> list:
    """Contiguous per-tile visits of a trajectory: [(ix, iy, slice), ...].

    Visits shorter than min_steps (corner clipping) are ignored.
    """
    tiles = [world.tile_of_point(q) for q in traj.positions]
    runs = []
    start = 0
    for t in range(1, len(tiles) + 1):
        if t == len(tiles) or tiles[t] != tiles[start]:
            runs.append((tiles[start][0], tiles[start][1], slice(start, t)))
            start = t
    return [r for r in runs if (r[2].stop - r[2].start) >= min_steps] or runs[:1]


def adherence_mean(trajs: list, world: World, min_steps: int = 5) -> float:
    """Mean per-tile adherence over all (robot, traversed tile) visits."""
    scores = []
    for traj in trajs:
        for ix, iy, sl in traversed_tiles(traj, world, min_steps):
            local = traj.positions[sl] - world.tile_center(ix, iy)
            scores.append(adherence_positions(world.tile_kind(ix, iy), local))
    return float(np.mean(scores)) if scores else 1.0


# --------------------------
# Polyline machinery for demonstrations
# --------------------------
def _chamfer(points: np.ndarray, cut: float = 0.08) -> np.ndarray:
    """Replace interior corners by two nearby points to tame spline ringing."""
    if len(points) <= 2:
        return points
    out = [points[0]]
    for k in range(1, len(points) - 1):
        prev, cur, nxt = out[-1], points[k], points[k + 1]
        d0 = np.linalg.norm(cur - prev)
        d1 = np.linalg.norm(nxt - cur)
        c = min(cut, d0 / 3.0, d1 / 3.0)
        if c < 1e-9:
            out.append(cur)
            continue
        out.append(cur + (prev - cur) / max(d0, 1e-12) * c)
        out.append(cur + (nxt - cur) / max(d1, 1e-12) * c)
    out.append(points[-1])
    return np.array(out)


def _densify(points: np.ndarray, spacing: float = 0.1) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        d = np.linalg.norm(b - a)
        n = max(int(np.ceil(d / spacing)), 1)
        for m in range(1, n + 1):
            out.append(a + (b - a) * (m / n))
    return np.array(out)


V_CRUISE = 0.8  # common transit speed; boundary states across seams match it


def _arc_spline(points: np.ndarray):
    pts = _densify(_chamfer(points))
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    pts = pts[keep]
    if len(pts) < 2:
        return None, 0.0
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return CubicSpline(s, pts, axis=0), float(s[-1])


def _resample_leg(points: np.ndarray, n_steps: int, rng=None,
                  edge_in: bool = False, edge_out: bool = False,
                  dt: float = DEFAULT_DT) -> np.ndarray:
    """n_steps positions along a polyline at roughly constant cruise speed.

    The time not needed at cruise becomes dwell: at both ends for interior
    endpoints (rest-to-rest queries), at the interior end when one endpoint
    is a tile edge, or at a mid-path point for edge-to-edge through-traffic,
    so edge endpoints are always crossed at cruise speed.
    """
    spline, length = _arc_spline(points)
    if spline is None:
        return np.repeat(points[:1], n_steps, axis=0)
    n_iv = n_steps - 1
    n_move = int(np.clip(np.ceil(length / (V_CRUISE * dt)), 4, n_iv))
    dwell = n_iv - n_move
    mask = np.zeros(n_iv)
    if edge_in and edge_out:
        # dwell at a random interior split so both edges are crossed moving
        lo, hi = max(n_move // 4, 2), n_move - max(n_move // 4, 2)
        a = int(rng.integers(lo, hi + 1)) if (rng is not None and hi >= lo) \
            else n_move // 2
        mask[:a] = 1.0
        mask[a + dwell:] = 1.0
    elif edge_in:
        mask[:n_move] = 1.0
    elif edge_out:
        mask[dwell:] = 1.0
    else:
        lead = dwell // 2
        mask[lead:lead + n_move] = 1.0
    kernel = np.hanning(9)
    kernel /= kernel.sum()
    padded = np.concatenate([np.full(4, mask[0]), mask, np.full(4, mask[-1])])
    v = np.convolve(padded, kernel, mode="valid")
    s = np.concatenate([[0.0], np.cumsum(v)])
    if s[-1] < 1e-12:
        return np.repeat(points[:1], n_steps, axis=0)
    return spline(s / s[-1] * length)


def _positions_to_traj(pos: np.ndarray, dt: float) -> Trajectory:
    vel = np.gradient(pos, dt, axis=0)
    return Trajectory(states=np.hstack([pos, vel]), dt=dt)


def _route(world: World, a: np.ndarray, b: np.ndarray, hubs: np.ndarray,
           clearance: float = DEMO_CLEARANCE) -> np.ndarray | None:
    """Shortest collision-free polyline from a to b through optional hubs."""
    if segment_clear(world, a, b, clearance):
        return np.array([a, b])
    nodes = [np.asarray(a, float), np.asarray(b, float)] + [h for h in hubs]
    n = len(nodes)
    dist = [np.inf] * n
    prev = [-1] * n
    dist[0] = 0.0
    heap = [(0.0, 0)]
    done = [False] * n
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == 1:
            break
        for v in range(n):
            if done[v]:
                continue
            w = np.linalg.norm(nodes[v] - nodes[u])
            if d + w >= dist[v]:
                continue
            if segment_clear(world, nodes[u], nodes[v], clearance):
                dist[v] = d + w
                prev[v] = u
                heapq.heappush(heap, (dist[v], v))
    if not np.isfinite(dist[1]):
        return None
    path = [1]
    while path[-1] != 0:
        path.append(prev[path[-1]])
    return np.array([nodes[k] for k in reversed(path)])


def _sample_free(world: World, rng: np.random.Generator,
                 clearance: float, lo=-0.9, hi=0.9, tries: int = 200) -> np.ndarray:
    for _ in range(tries):
        p = rng.uniform(lo, hi, size=2)
        if sdf(world, p) >= clearance:
            return p
    raise RuntimeError("could not sample a free point")


# --------------------------
# Per-map demonstration construction (tile-local frame)
#
# Each generator mixes interior queries with through-traffic whose endpoints
# sit on tile edges at cruise speed, so models sequenced across tiles see
# in-distribution boundary states (seam points are edge midpoints).
# --------------------------
def _edge_point(rng, spread: float = 0.85) -> np.ndarray:
    edge = rng.integers(4)
    t = rng.uniform(-spread, spread)
    return np.array([(-1.0, t), (1.0, t), (t, -1.0), (t, 1.0)][edge])


def _demo_empty(world, rng, h):
    for _ in range(100):
        a_edge = rng.random() < 0.35
        b_edge = rng.random() < 0.35
        a = _edge_point(rng) if a_edge else rng.uniform(-0.95, 0.95, size=2)
        b = _edge_point(rng) if b_edge else rng.uniform(-0.95, 0.95, size=2)
        if np.linalg.norm(b - a) >= 0.5:
            return _resample_leg(np.array([a, b]), h, rng,
                                 edge_in=a_edge, edge_out=b_edge)
    raise RuntimeError("empty demo placement failed")


def _superellipse(a: float, p: float, th: np.ndarray) -> np.ndarray:
    return np.stack([
        a * np.sign(np.cos(th)) * np.abs(np.cos(th)) ** (2.0 / p),
        a * np.sign(np.sin(th)) * np.abs(np.sin(th)) ** (2.0 / p),
    ], axis=1)


def _demo_highways(world, rng, h):
    # Counter-clockwise rounded-square loops (superellipse family) so the
    # demonstration sweep covers the whole free ring around the block,
    # including near-corner cells (high exponents hug the square boundary).
    if rng.random() < 0.5:
        a = rng.uniform(0.50, 0.93)
        p = rng.uniform(2.0, 10.0)
        th0 = rng.uniform(0.0, 2 * np.pi)
        dth = rng.uniform(0.5 * np.pi, 1.75 * np.pi)
        th = np.linspace(th0, th0 + dth, 200)
        return _resample_leg(_superellipse(a, p, th), h, rng)
    # Through-traffic: enter from a tile edge, join the ring counter-
    # clockwise, and leave through another edge at cruise speed.
    a = rng.uniform(0.55, 0.80)
    p = rng.uniform(2.0, 6.0)
    e_in = _edge_point(rng, jitter=0.08)
    e_out = _edge_point(rng, jitter=0.08)
    th_in = np.arctan2(e_in[1], e_in[0])
    th_out = np.arctan2(e_out[1], e_out[0])
    dth = (th_out - th_in) % (2 * np.pi)
    if dth < 0.5 * np.pi:
        dth += 2 * np.pi
    th = np.linspace(th_in, th_in + dth, max(int(60 * dth), 30))
    ring = _superellipse(a, p, th)
    pts = np.vstack([e_in, ring, e_out])
    return _resample_leg(pts, h, rng, edge_in=True, edge_out=True)


_CONVEYOR_Y = 0.5 * (CONVEYOR_WALL_Y_HI + 1.0)  # corridor mid-line


def _demo_conveyor(world, rng, h):
    top = rng.random() < 0.5
    y = _CONVEYOR_Y if top else -_CONVEYOR_Y
    lobby = lambda side: np.array([side * rng.uniform(0.70, 0.90),
                                   rng.uniform(-0.85, 0.85)])
    if top:  # right -> left through the top corridor
        start, goal = lobby(+1), lobby(-1)
        mid = [(0.72, y), (0.55, y), (-0.55, y), (-0.72, y)]
    else:    # left -> right through the bottom corridor
        start, goal = lobby(-1), lobby(+1)
        mid = [(-0.72, y), (-0.55, y), (0.55, y), (0.72, y)]
    return _resample_leg(np.array([start, *mid, goal]), h)


_DROP_HUBS = np.array([
    (0.0, 0.0), (0.75, 0.0), (-0.75, 0.0), (0.0, 0.75), (0.0, -0.75),
    (0.75, 0.75), (0.75, -0.75), (-0.75, 0.75), (-0.75, -0.75),
    (0.5, 0.0), (-0.5, 0.0), (0.0, 0.5), (0.0, -0.5),
])


def _demo_drop_region(world, rng, h):
    centers = drop_region_centers()
    region = centers[rng.integers(len(centers))]
    pause = int(np.ceil(DROP_PAUSE_FRACTION * h))
    for _ in range(50):
        start = _sample_free(world, rng, 0.12)
        goal = _sample_free(world, rng, 0.12)
        leg_in = _route(world, start, region, _DROP_HUBS)
        leg_out = _route(world, region, goal, _DROP_HUBS)
        if leg_in is None or leg_out is None:
            continue
        len_in = np.sum(np.linalg.norm(np.diff(leg_in, axis=0), axis=1))
        len_out = np.sum(np.linalg.norm(np.diff(leg_out, axis=0), axis=1))
        moving = h - pause
        n_in = int(np.clip(round(moving * len_in / max(len_in + len_out, 1e-9)),
                           2, moving - 2))
        n_out = moving - n_in
        pos = np.vstack([
            _resample_leg(leg_in, n_in),
            np.repeat(region[None, :], pause, axis=0),
            _resample_leg(leg_out, n_out),
        ])
        return pos
    raise RuntimeError("drop-region demo placement failed")


_BUILDERS = {
    TileKind.EMPTY: _demo_empty,
    TileKind.HIGHWAYS: _demo_highways,
    TileKind.CONVEYOR: _demo_conveyor,
    TileKind.DROP_REGION: _demo_drop_region,
}


def generate_demonstrations(kind: TileKind | str, n: int, seed: int,
                            h: int = DEFAULT_H, dt: float = DEFAULT_DT,
                            max_retries: int = 50) -> list:
    """n collision-free demonstrations of the map's motif, adherence 1 each.

    Deterministic per seed. Raises after max_retries consecutive rejections.
    """
    kind = TileKind(kind)
    if n <= 0:
        raise ValueError("n must be positive")
    world = single_tile_world(kind)
    build = _BUILDERS[kind]
    root = np.random.SeedSequence(seed)
    demos = []
    for i, ss in enumerate(root.spawn(n)):
        rng = np.random.default_rng(ss)
        for attempt in range(max_retries):
            pos = build(world, rng, h)
            if np.any(disks_in_collision(world, pos, ROBOT_RADIUS)):
                continue
            if adherence_positions(kind, pos) != 1.0:
                continue
            demos.append(Demonstration(_positions_to_traj(pos, dt), kind, i))
            break
        else:
            raise RuntimeError(f"demo {i} rejected {max_retries} times")
    return demos


# --------------------------
# Dataset files: JSON header line + raw float64 trajectory block
# --------------------------
def save_dataset(path, demos: list, seed: int):
    states = np.stack([d.traj.states for d in demos]).astype("<f8")
    header = {
        "format": "mrdiff-dataset", "version": 1,
        "kind": demos[0].map_kind.value,
        "h": int(states.shape[1]), "dt": demos[0].traj.dt,
        "count": int(states.shape[0]), "seed": int(seed),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(states.tobytes())


def load_dataset(path):
    """Returns (states (N, H, 4), header dict)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != "mrdiff-dataset":
            raise ValueError(f"{path}: not a dataset file")
        raw = f.read()
    n, h = header["count"], header["h"]
    states = np.frombuffer(raw, dtype="<f8").reshape(n, h, 4).copy()
    return states, header


def dataset_states(demos: list) -> np.ndarray:
    return np.stack([d.traj.states for d in demos])
