"""Planar shapes, signed distances, and disk-robot collision predicates.

Worlds are built from square tiles (side `TILE_SIZE`), each carrying a fixed
obstacle layout keyed by its tile kind. All obstacles are axis-aligned
rectangles or circles, so signed distances are exact.

Conventions:
  - The tile at grid index (ix, iy) is centered at (2*ix, 2*iy), so a
    single-tile world spans [-1, 1] x [-1, 1].
  - Signed distance is negative inside an obstacle, positive outside all of
    them, and +inf in an empty world.
  - Collision predicates use strict inequalities: touching counts as free.
"""

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TILE_SIZE = 2.0
ROBOT_RADIUS = 0.05  # disk robot, diameter 0.1


class TileKind(str, Enum):
    EMPTY = "empty"
    HIGHWAYS = "highways"
    CONVEYOR = "conveyor"
    DROP_REGION = "drop_region"


# --------------------------
# Shapes
# --------------------------
@dataclass(frozen=True)
class Circle:
    center: np.ndarray  # (2,)
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def sdf_grad(self, p: np.ndarray) -> np.ndarray:
        d = p - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 1e-12, d / np.maximum(n, 1e-12), 0.0)


@dataclass(frozen=True)
class Rect:
    lo: np.ndarray  # (2,) lower corner
    hi: np.ndarray  # (2,) upper corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def sdf_grad(self, p: np.ndarray) -> np.ndarray:
        rel = p - self.center
        q = np.abs(rel) - self.half
        sgn = np.where(rel >= 0.0, 1.0, -1.0)
        qp = np.maximum(q, 0.0)
        n = np.linalg.norm(qp, axis=-1, keepdims=True)
        out_grad = sgn * qp / np.maximum(n, 1e-12)
        # Inside: gradient points along the axis of least penetration.
        axis = np.argmax(q, axis=-1)
        in_grad = np.zeros_like(rel)
        idx = np.arange(rel.reshape(-1, 2).shape[0])
        flat_in = in_grad.reshape(-1, 2)
        flat_sgn = sgn.reshape(-1, 2)
        flat_axis = np.asarray(axis).reshape(-1)
        flat_in[idx, flat_axis] = flat_sgn[idx, flat_axis]
        in_grad = flat_in.reshape(rel.shape)
        outside_mask = (n > 1e-12)
        return np.where(outside_mask, out_grad, in_grad)


Shape = Circle | Rect


# --------------------------
# Tile obstacle layouts (tile-local frame, tile spans [-1, 1]^2)
# --------------------------
# Highways: central square block, demonstrations loop counter-clockwise
# around it. Corridor between block and tile edge is 0.6 wide.
HIGHWAYS_BLOCK_HALF = 0.4

# Conveyor: two horizontal walls create a top and a bottom corridor against
# the tile edges (0.35 wide each, >= 3 robot diameters). The open band
# between the walls is 0.7 wide. Corridor mouths sit at x = +-0.6.
CONVEYOR_WALL_X = 0.6
CONVEYOR_WALL_Y_LO = 0.35
CONVEYOR_WALL_Y_HI = 0.65

# Drop-region: four square chutes; the 16 drop-off disks (radius 0.15) sit
# 0.15 outward of each chute edge midpoint.
CHUTE_CENTERS = [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]
CHUTE_HALF = 0.15
DROP_REGION_RADIUS = 0.15
DROP_REGION_OFFSET = 0.15


def tile_obstacles(kind: TileKind) -> list[Shape]:
    """Obstacle layout of a tile kind, in the tile-local frame."""
    if kind == TileKind.EMPTY:
        return []
    if kind == TileKind.HIGHWAYS:
        h = HIGHWAYS_BLOCK_HALF
        return [Rect(np.array([-h, -h]), np.array([h, h]))]
    if kind == TileKind.CONVEYOR:
        x, ylo, yhi = CONVEYOR_WALL_X, CONVEYOR_WALL_Y_LO, CONVEYOR_WALL_Y_HI
        return [
            Rect(np.array([-x, ylo]), np.array([x, yhi])),
            Rect(np.array([-x, -yhi]), np.array([x, -ylo])),
        ]
    if kind == TileKind.DROP_REGION:
        h = CHUTE_HALF
        return [
            Rect(np.array([cx - h, cy - h]), np.array([cx + h, cy + h]))
            for cx, cy in CHUTE_CENTERS
        ]
    raise ValueError(f"unknown tile kind: {kind!r}")


def drop_region_centers() -> np.ndarray:
    """The 16 drop-off disk centers of a drop-region tile (local frame)."""
    pts = []
    for cx, cy in CHUTE_CENTERS:
        off = CHUTE_HALF + DROP_REGION_OFFSET
        pts += [(cx + off, cy), (cx - off, cy), (cx, cy + off), (cx, cy - off)]
    return np.array(pts)


# --------------------------
# Robot shape
# --------------------------
@dataclass(frozen=True)
class RobotShape:
    """Disk robot modeled as one or more spheres (offset, radius)."""

    radius: float = ROBOT_RADIUS
    spheres: tuple = None  # tuple of (offset (2,), radius)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("robot radius must be positive")
        if self.spheres is None:
            object.__setattr__(
                self, "spheres", ((np.zeros(2), self.radius),))
        if len(self.spheres) == 0:
            raise ValueError("robot needs at least one sphere")


# --------------------------
# World
# --------------------------
@dataclass
class World:
    """Tile grid plus derived obstacle set and bounding rectangle.

    tiles[iy][ix] is the kind of the tile centered at (2*ix, 2*iy).
    Obstacles are derived deterministically from the tiles. Immutable
    after construction.
    """

    tiles: list  # list of rows of TileKind
    tile_size: float = TILE_SIZE
    obstacles: list = field(default_factory=list)
    bounds_lo: np.ndarray = None
    bounds_hi: np.ndarray = None

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        self.tiles = [[TileKind(k) for k in row] for row in self.tiles]
        ny = len(self.tiles)
        nx = len(self.tiles[0])
        if any(len(row) != nx for row in self.tiles):
            raise ValueError("ragged tile grid")
        half = self.tile_size / 2.0
        if self.bounds_lo is None:
            self.bounds_lo = np.array([-half, -half])
            self.bounds_hi = np.array([(nx - 1) * self.tile_size + half,
                                       (ny - 1) * self.tile_size + half])
        if not self.obstacles:
            obs = []
            for iy, row in enumerate(self.tiles):
                for ix, kind in enumerate(row):
                    c = self.tile_center(ix, iy)
                    for shp in tile_obstacles(kind):
                        if isinstance(shp, Circle):
                            obs.append(Circle(shp.center + c, shp.radius))
                        else:
                            obs.append(Rect(shp.lo + c, shp.hi + c))
            self.obstacles = obs
        for shp in self.obstacles:
            lo = shp.center - shp.radius if isinstance(shp, Circle) else shp.lo
            hi = shp.center + shp.radius if isinstance(shp, Circle) else shp.hi
            if np.any(lo < self.bounds_lo - 1e-9) or np.any(hi > self.bounds_hi + 1e-9):
                raise ValueError("obstacle outside world bounds")

    @property
    def n_tiles(self) -> tuple[int, int]:
        return len(self.tiles[0]), len(self.tiles)

    def tile_center(self, ix: int, iy: int) -> np.ndarray:
        return np.array([ix * self.tile_size, iy * self.tile_size])

    def tile_of_point(self, p: np.ndarray) -> tuple[int, int]:
        """Grid index of the tile containing p (edges belong to the upper tile)."""
        half = self.tile_size / 2.0
        ix = int(np.floor((p[0] + half) / self.tile_size))
        iy = int(np.floor((p[1] + half) / self.tile_size))
        nx, ny = self.n_tiles
        return min(max(ix, 0), nx - 1), min(max(iy, 0), ny - 1)

    def tile_kind(self, ix: int, iy: int) -> TileKind:
        return self.tiles[iy][ix]


def single_tile_world(kind: TileKind | str) -> World:
    return World(tiles=[[TileKind(kind)]])


def tiled_world(kinds: list) -> World:
    """World from a grid of tile kinds, kinds[iy][ix]."""
    return World(tiles=kinds)


# --------------------------
# Signed distance and collision predicates
# --------------------------
def sdf(world: World, p: np.ndarray) -> np.ndarray:
    """Signed distance from p to the nearest obstacle surface.

    Negative inside any obstacle, +inf when the world has no obstacles.
    Accepts a single point (2,) or a batch (..., 2).
    """
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    if not world.obstacles:
        return np.full(p.shape[:-1], np.inf) if p.ndim > 1 else np.inf
    vals = np.stack([shp.sdf(p) for shp in world.obstacles], axis=0)
    return np.min(vals, axis=0)


def sdf_grad(world: World, p: np.ndarray) -> np.ndarray:
    """Gradient of sdf w.r.t. p, following the nearest obstacle."""
    p = np.asarray(p, dtype=float)
    if not world.obstacles:
        return np.zeros_like(p)
    vals = np.stack([shp.sdf(p) for shp in world.obstacles], axis=0)
    grads = np.stack([shp.sdf_grad(p) for shp in world.obstacles], axis=0)
    nearest = np.argmin(vals, axis=0)
    return np.take_along_axis(
        grads, nearest[None, ..., None], axis=0)[0]


def disk_in_collision(world: World, center: np.ndarray, radius: float) -> bool:
    """True iff a disk at center intersects any obstacle (touching is free)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return bool(sdf(world, center) < radius)


def disks_in_collision(world: World, centers: np.ndarray, radius: float) -> np.ndarray:
    """Vectorized disk_in_collision over a batch of centers (..., 2)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return sdf(world, centers) < radius


def disks_overlap(c1: np.ndarray, r1: float, c2: np.ndarray, r2: float) -> bool:
    """True iff two disks overlap (strict; touching counts as free)."""
    if r1 <= 0 or r2 <= 0:
        raise ValueError("radii must be positive")
    return bool(np.linalg.norm(np.asarray(c1, float) - np.asarray(c2, float)) < r1 + r2)


def in_bounds(world: World, p: np.ndarray, margin: float = 0.0) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    ok_lo = np.all(p >= world.bounds_lo + margin, axis=-1)
    ok_hi = np.all(p <= world.bounds_hi - margin, axis=-1)
    return ok_lo & ok_hi


def segment_clear(world: World, a: np.ndarray, b: np.ndarray,
                  clearance: float, step: float = 0.02) -> bool:
    """Sampled check that the segment a->b keeps `clearance` from obstacles."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
    ts = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = a[None, :] * (1 - ts) + b[None, :] * ts
    return bool(np.all(sdf(world, pts) >= clearance))


# --------------------------
# Serialization
# --------------------------
def world_to_json(world: World) -> str:
    obs = []
    for shp in world.obstacles:
        if isinstance(shp, Circle):
            obs.append({"type": "circle", "center": shp.center.tolist(),
                        "radius": shp.radius})
        else:
            obs.append({"type": "rect", "lo": shp.lo.tolist(),
                        "hi": shp.hi.tolist()})
    doc = {
        "tiles": [[k.value for k in row] for row in world.tiles],
        "tile_size": world.tile_size,
        "obstacles": obs,
        "bounds": [world.bounds_lo.tolist(), world.bounds_hi.tolist()],
    }
    return json.dumps(doc, indent=2)


def world_from_json(text: str) -> World:
    doc = json.loads(text)
    obs = []
    for o in doc.get("obstacles", []):
        if o["type"] == "circle":
            obs.append(Circle(np.array(o["center"], float), float(o["radius"])))
        elif o["type"] == "rect":
            obs.append(Rect(np.array(o["lo"], float), np.array(o["hi"], float)))
        else:
            raise ValueError(f"unknown obstacle type {o['type']!r}")
    bounds = doc.get("bounds")
    kwargs = {}
    if bounds is not None:
        kwargs = {"bounds_lo": np.array(bounds[0], float),
                  "bounds_hi": np.array(bounds[1], float)}
    return World(tiles=doc["tiles"], tile_size=float(doc.get("tile_size", TILE_SIZE)),
                 obstacles=obs, **kwargs)
