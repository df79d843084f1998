"""Sphere spatio-temporal soft constraints.

A sphere constraint penalizes a robot for bringing its body closer than
``padding * radius`` to a point during a closed time-step interval. They are
soft by construction: satisfaction is encouraged through guidance, never
guaranteed. Strength only selects the guidance weight (strong constraints
resolve recorded conflicts; weak ones discourage collisions with peers'
current plans).
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import RobotShape
from .trajectory import Trajectory

STRONG = "strong"
WEAK = "weak"

CONSTRAINT_RADIUS = 0.12      # robot radius x margin
CONSTRAINT_HALF_STEPS = 2     # 0.08 s at dt = 0.04
DEFAULT_PADDING = 1.2


@dataclass(frozen=True)
class SphereConstraint:
    center: np.ndarray          # (2,) workspace point
    radius: float
    t_lo: int
    t_hi: int                   # closed interval of time-step indices
    strength: str = STRONG
    padding: float = DEFAULT_PADDING

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        if self.radius <= 0:
            raise ValueError("constraint radius must be positive")
        if self.t_lo < 0 or self.t_hi < self.t_lo:
            raise ValueError("bad time interval")
        if self.padding < 1.0:
            raise ValueError("padding must be >= 1")
        if self.strength not in (STRONG, WEAK):
            raise ValueError(f"unknown strength {self.strength!r}")


def _surface_distance(pos: np.ndarray, center: np.ndarray,
                      shape: RobotShape) -> np.ndarray:
    """Distance from the constraint point to the robot body, floored at 0."""
    d = np.full(pos.shape[:-1], np.inf)
    for off, r in shape.spheres:
        d = np.minimum(d, np.linalg.norm(pos + np.asarray(off) - center, axis=-1) - r)
    return np.maximum(d, 0.0)


def constraint_cost(traj: Trajectory, c: SphereConstraint,
                    shape: RobotShape) -> float:
    """Sum over the interval of max(padding*radius - d, 0), d the distance
    from the robot surface to the constraint center."""
    if c.t_hi >= traj.horizon:
        raise ValueError("constraint interval exceeds horizon")
    pos = traj.positions[c.t_lo:c.t_hi + 1]
    d = _surface_distance(pos, c.center, shape)
    return float(np.sum(np.maximum(c.padding * c.radius - d, 0.0)))


def constraints_from_trajectory(other: Trajectory, shape: RobotShape,
                                strength: str) -> list:
    """One single-step constraint per (robot sphere, time step) of `other`."""
    out = []
    for t in range(other.horizon):
        for off, r in shape.spheres:
            out.append(SphereConstraint(
                center=other.positions[t] + np.asarray(off), radius=r,
                t_lo=t, t_hi=t, strength=strength))
    return out


# --------------------------
# Packed form for vectorized guidance evaluation
# --------------------------
@dataclass(frozen=True)
class PackedConstraints:
    centers: np.ndarray   # (M, 2)
    radii: np.ndarray     # (M,)
    paddings: np.ndarray  # (M,)
    weights: np.ndarray   # (M,) guidance weight per constraint
    time_mask: np.ndarray  # (M, H) bool, True inside the interval
    robot_radius: float

    @property
    def size(self) -> int:
        return self.centers.shape[0]


def pack_constraints(constraints: list, shape: RobotShape, horizon: int,
                     weight_strong: float, weight_weak: float) -> PackedConstraints:
    m = len(constraints)
    centers = np.zeros((m, 2))
    radii = np.zeros(m)
    paddings = np.zeros(m)
    weights = np.zeros(m)
    mask = np.zeros((m, horizon), dtype=bool)
    for k, c in enumerate(constraints):
        centers[k] = c.center
        radii[k] = c.radius
        paddings[k] = c.padding
        weights[k] = weight_strong if c.strength == STRONG else weight_weak
        mask[k, max(c.t_lo, 0):min(c.t_hi, horizon - 1) + 1] = True
    return PackedConstraints(centers, radii, paddings, weights, mask,
                             shape.radius)


def packed_cost_grad(pos: np.ndarray, packed: PackedConstraints):
    """Total weighted constraint cost and its gradient for a batch.

    pos: (B, H, 2). Returns (cost (B,), grad (B, H, 2)). The distance from
    the robot surface is flat inside the body, so the gradient vanishes when
    the center distance is below the robot radius.
    """
    if packed.size == 0:
        b = pos.shape[0]
        return np.zeros(b), np.zeros_like(pos)
    diff = pos[:, :, None, :] - packed.centers[None, None, :, :]  # (B,H,M,2)
    dist = np.linalg.norm(diff, axis=-1)                          # (B,H,M)
    d = np.maximum(dist - packed.robot_radius, 0.0)
    slack = packed.paddings * packed.radii - d
    active = (slack > 0.0) & packed.time_mask.T[None, :, :]
    cost = np.einsum("bhm,m->b", np.where(active, slack, 0.0), packed.weights)
    push = active & (dist > packed.robot_radius)
    coef = np.where(push, packed.weights / np.maximum(dist, 1e-12), 0.0)
    grad = -np.einsum("bhm,bhmc->bhc", coef, diff)
    return cost, grad
