"""Long-horizon planning by chaining local diffusion models across tiles.

A skeleton is an ordered list of grid-adjacent tiles, one local model per
segment. Boundary states on the shared tile edges are fixed before
denoising; the L reverse processes then advance in lockstep, and after every
step each segment re-clamps its first and last states (the global start and
goal for the outer segments, the shared boundary state at every seam). The
stitched trajectory drops the duplicate state at each seam, so consecutive
segments agree bit-exactly.
"""

from dataclasses import dataclass, replace

import numpy as np

from .constraints import SphereConstraint
from .diffusion import (DenoiserModel, GuidanceSpec, Query, _GuideCtx,
                        denoise_step, forward_noise)
from .geometry import ROBOT_RADIUS, RobotShape, TileKind, World, sdf, \
    single_tile_world
from .trajectory import Trajectory


@dataclass
class Skeleton:
    tiles: list                 # ordered (ix, iy) grid indices, length L
    models: list                # one DenoiserModel per segment
    boundary_states: np.ndarray | None = None  # (L-1, 4) world frame

    def __post_init__(self):
        if len(self.tiles) != len(self.models) or not self.tiles:
            raise ValueError("need one model per tile")
        for (ax, ay), (bx, by) in zip(self.tiles[:-1], self.tiles[1:]):
            if abs(ax - bx) + abs(ay - by) != 1:
                raise ValueError(f"tiles {(ax, ay)} and {(bx, by)} not adjacent")
        hs = {m.h for m in self.models}
        ks = {m.schedule.k_max for m in self.models}
        if len(hs) != 1 or len(ks) != 1:
            raise ValueError("segment models must share horizon and schedule")

    @property
    def length(self) -> int:
        return len(self.tiles)

    @property
    def segment_h(self) -> int:
        return self.models[0].h

    @property
    def stitched_h(self) -> int:
        return self.length * (self.segment_h - 1) + 1

    @classmethod
    def for_world(cls, world: World, tiles: list, models_by_kind: dict):
        models = [models_by_kind[TileKind(world.tile_kind(ix, iy))]
                  for ix, iy in tiles]
        return cls(tiles=[tuple(t) for t in tiles], models=models)


def choose_boundary_points(skeleton: Skeleton, start, goal,
                           world: World) -> np.ndarray:
    """Boundary state per seam: midpoint of the free portion of the shared
    tile edge, crossed at the dataset's transit speed.

    The velocity direction follows the route secant (previous anchor to next
    anchor) so straight tile crossings stay straight; it falls back to the
    tile-center direction when the secant degenerates or points backward.
    """
    half = world.tile_size / 2.0
    start = np.asarray(start, float)[:2]
    goal = np.asarray(goal, float)[:2]
    n_seams = skeleton.length - 1
    points = np.zeros((n_seams, 2))
    forward = np.zeros((n_seams, 2))
    speeds = np.zeros(n_seams)
    for l, (a, b) in enumerate(zip(skeleton.tiles[:-1], skeleton.tiles[1:])):
        ca, cb = world.tile_center(*a), world.tile_center(*b)
        mid = 0.5 * (ca + cb)
        axis = 0 if a[1] == b[1] else 1          # edge runs along the other axis
        edge_axis = 1 - axis
        ts = np.linspace(-half, half, 81)
        pts = np.repeat(mid[None, :], ts.size, axis=0)
        pts[:, edge_axis] += ts
        free = sdf(world, pts) >= ROBOT_RADIUS + 0.02
        runs = _longest_run(free)
        if runs is None:
            raise ValueError(f"shared edge of tiles {a} and {b} fully blocked")
        lo, hi = runs
        points[l] = pts[(lo + hi) // 2]
        forward[l] = (cb - ca) / np.linalg.norm(cb - ca)
        # The slower dataset binds: crossing above its transit speed would be
        # out of distribution for that segment's model.
        speeds[l] = min(skeleton.models[l].mean_speed,
                        skeleton.models[l + 1].mean_speed)
    anchors = np.vstack([start[None, :], points, goal[None, :]])
    out = np.zeros((n_seams, 4))
    for l in range(n_seams):
        sec = anchors[l + 2] - anchors[l]
        norm = np.linalg.norm(sec)
        direction = forward[l]
        if norm > 1e-9 and np.dot(sec / norm, forward[l]) > 0.1:
            direction = sec / norm
        out[l] = np.r_[points[l], direction * speeds[l]]
    return out


def _longest_run(mask: np.ndarray):
    best = None
    start = None
    for i, flag in enumerate(np.r_[mask, False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if best is None or (i - start) > (best[1] - best[0]):
                best = (start, i - 1)
            start = None
    return best


# --------------------------
# Lockstep sampling of segment chains
# --------------------------
def _segment_guides(skeleton: Skeleton, world: World, guide: GuidanceSpec,
                    constraints, shape: RobotShape) -> list:
    """Per-segment guidance: tile-local obstacles, constraints shifted into
    the tile frame and clipped to the segment's global step range."""
    h = skeleton.segment_h
    guides = []
    for l, (ix, iy) in enumerate(skeleton.tiles):
        center = world.tile_center(ix, iy)
        off = l * (h - 1)
        local = []
        for c in constraints:
            lo = max(c.t_lo - off, 0)
            hi = min(c.t_hi - off, h - 1)
            if lo <= hi:
                local.append(replace(c, center=c.center - center,
                                     t_lo=lo, t_hi=hi))
        tile_world = single_tile_world(world.tile_kind(ix, iy))
        guides.append(replace(guide, world=tile_world,
                              constraints=tuple(local)))
    return guides


def _lockstep(skeleton: Skeleton, xs: list, k_from: int, clamps: list,
              guides: list, shape: RobotShape, rng) -> list:
    """Advance all segments together; clamps[l] = (rows, normalized values)."""
    ctxs = [_GuideCtx(m, g, shape) for m, g in zip(skeleton.models, guides)]
    for l, (rows, vals) in enumerate(clamps):
        xs[l][:, rows] = vals
    for k in range(k_from, 0, -1):
        for l, model in enumerate(skeleton.models):
            xs[l] = denoise_step(model, xs[l], k, ctxs[l], rng)
            rows, vals = clamps[l]
            xs[l][:, rows] = vals
    return xs


def _clamp_spec(skeleton: Skeleton, query: Query, world: World):
    """Per-segment inpainting rows/values (local frame) plus the exact
    world-frame states reasserted after de-normalization."""
    h = skeleton.segment_h
    bnd = skeleton.boundary_states
    if bnd is None:
        raise ValueError("boundary states not chosen")
    clamps_raw = []
    for l, (ix, iy) in enumerate(skeleton.tiles):
        center4 = np.r_[world.tile_center(ix, iy), 0.0, 0.0]
        first = query.start if l == 0 else bnd[l - 1]
        last = query.goal if l == skeleton.length - 1 else bnd[l]
        rows = [0, h - 1]
        vals = np.stack([first, last])
        if l == 0 and query.hold_steps > 0:
            hold = list(range(min(query.hold_steps, h - 2) + 1))
            rows = hold + [h - 1]
            vals = np.stack([query.start] * len(hold) + [last])
        clamps_raw.append((np.array(rows), vals, center4))
    return clamps_raw


def sample_skeleton(skeleton: Skeleton, query: Query, world: World,
                    guide: GuidanceSpec, batch: int = 1, seed: int = 0,
                    shape: RobotShape = RobotShape(),
                    constraints=()) -> list:
    """Batch of stitched trajectories following the skeleton."""
    if skeleton.boundary_states is None:
        skeleton.boundary_states = choose_boundary_points(
            skeleton, query.start, query.goal, world)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    h = skeleton.segment_h
    guides = _segment_guides(skeleton, world, guide, constraints, shape)
    clamps_raw = _clamp_spec(skeleton, query, world)
    clamps = []
    xs = []
    for l, model in enumerate(skeleton.models):
        rows, vals, center4 = clamps_raw[l]
        clamps.append((rows, model.normalize(vals - center4)))
        xs.append(rng.standard_normal((batch, h, 4)))
    xs = _lockstep(skeleton, xs, skeleton.models[0].schedule.k_max, clamps,
                   guides, shape, rng)
    return _stitch(skeleton, xs, clamps_raw, world)


def warm_sample_skeleton(skeleton: Skeleton, prev: Trajectory, query: Query,
                         world: World, guide: GuidanceSpec, k_noise: int,
                         batch: int = 1, seed: int = 0,
                         shape: RobotShape = RobotShape(),
                         constraints=()) -> list:
    """Renoise a stored stitched trajectory segment-wise, then denoise."""
    if prev.horizon != skeleton.stitched_h:
        raise ValueError("stored trajectory does not match the skeleton")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    h = skeleton.segment_h
    guides = _segment_guides(skeleton, world, guide, constraints, shape)
    clamps_raw = _clamp_spec(skeleton, query, world)
    clamps = []
    xs = []
    for l, model in enumerate(skeleton.models):
        rows, vals, center4 = clamps_raw[l]
        clamps.append((rows, model.normalize(vals - center4)))
        seg = prev.states[l * (h - 1):l * (h - 1) + h] - center4
        xn = model.normalize(seg)[None].repeat(batch, axis=0)
        xs.append(forward_noise(xn, k_noise, rng.standard_normal(xn.shape),
                                model.schedule))
    xs = _lockstep(skeleton, xs, k_noise, clamps, guides, shape, rng)
    return _stitch(skeleton, xs, clamps_raw, world)


def _stitch(skeleton: Skeleton, xs: list, clamps_raw, world: World) -> list:
    h = skeleton.segment_h
    batch = xs[0].shape[0]
    total = skeleton.stitched_h
    out = np.zeros((batch, total, 4))
    for l, model in enumerate(skeleton.models):
        rows, vals, center4 = clamps_raw[l]
        seg = model.denormalize(xs[l]) + center4
        seg[:, rows] = vals  # seam states bit-exact in world frame
        out[:, l * (h - 1):l * (h - 1) + h] = seg
    dt = skeleton.models[0].dt
    return [Trajectory(states=s, dt=dt) for s in out]


def plan_skeleton(skeleton: Skeleton, query: Query, world: World,
                  guide: GuidanceSpec | None = None, seed: int = 0,
                  shape: RobotShape = RobotShape()) -> Trajectory:
    """Single stitched trajectory (batch of one)."""
    guide = guide or GuidanceSpec(world=world)
    return sample_skeleton(skeleton, query, world, guide, batch=1,
                           seed=seed, shape=shape)[0]


class SkeletonPlanner:
    """Low-level planner over a tile skeleton, for the coordination layer."""

    def __init__(self, skeleton: Skeleton, query: Query, world: World,
                 guide: GuidanceSpec, batch: int, shape: RobotShape):
        if skeleton.boundary_states is None:
            skeleton.boundary_states = choose_boundary_points(
                skeleton, query.start, query.goal, world)
        self.skeleton = skeleton
        self.query = query
        self.world = world
        self.guide = guide
        self.batch = batch
        self.shape = shape

    @property
    def horizon(self) -> int:
        return self.skeleton.stitched_h

    def sample_batch(self, constraints: list, seed: int) -> list:
        return sample_skeleton(self.skeleton, self.query, self.world,
                               self.guide, batch=self.batch, seed=seed,
                               shape=self.shape, constraints=constraints)

    def warm_batch(self, prev: Trajectory, constraints: list, seed: int) -> list:
        from .diffusion import WARM_NOISE_STEPS
        return warm_sample_skeleton(self.skeleton, prev, self.query,
                                    self.world, self.guide,
                                    k_noise=WARM_NOISE_STEPS,
                                    batch=self.batch, seed=seed,
                                    shape=self.shape, constraints=constraints)
