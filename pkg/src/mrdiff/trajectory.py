"""Trajectory data model, kinematic metrics, and inter-robot conflict detection.

A trajectory is a fixed-horizon sequence of (position, velocity) states
stored as an (H, 4) array with columns [x, y, vx, vy] and a fixed time step
dt. Arrays are frozen after construction; all functions here are pure.
"""

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import RobotShape

DEFAULT_DT = 0.04  # seconds per step; 2 steps span the 0.08 s constraint interval
DEFAULT_H = 64
DEFAULT_SUBSTEPS = 4  # linear interpolation substeps for conflict checks


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (H, 4): x, y, vx, vy
    dt: float = DEFAULT_DT

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 4 or states.shape[0] < 2:
            raise ValueError("states must be (H >= 2, 4)")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory states must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 2:]

    @property
    def duration(self) -> float:
        return (self.horizon - 1) * self.dt


@dataclass(frozen=True)
class Conflict:
    robot_i: int
    robot_j: int
    t_step: int
    point: np.ndarray  # (2,) collision point

    def __post_init__(self):
        if self.robot_i == self.robot_j:
            raise ValueError("conflict needs two distinct robots")


def interpolate(traj: Trajectory, t: float):
    """State at time t by linear interpolation; exact at grid times."""
    if t < -1e-12 or t > traj.duration + 1e-12:
        raise ValueError(f"t={t} outside [0, {traj.duration}]")
    u = np.clip(t / traj.dt, 0.0, traj.horizon - 1)
    k = min(int(np.floor(u)), traj.horizon - 2)
    a = u - k
    return (1 - a) * traj.states[k] + a * traj.states[k + 1]


def mean_abs_acceleration(traj: Trajectory) -> float:
    """Mean |second difference of position| / dt^2, a smoothness proxy."""
    if traj.horizon < 3:
        raise ValueError("need H >= 3 for acceleration")
    q = traj.positions
    acc = (q[2:] - 2 * q[1:-1] + q[:-2]) / traj.dt ** 2
    return float(np.mean(np.linalg.norm(acc, axis=1)))


# --------------------------
# Conflict detection
# --------------------------
def _interp_positions(q: np.ndarray, substeps: int) -> np.ndarray:
    """Positions at all sub-times: steps t=0..H-2 get `substeps` samples
    (fractions m/substeps, m=0..substeps-1), the last step only its grid time.
    Returns ((H-1)*substeps + 1, 2)."""
    H = q.shape[0]
    fr = np.arange(substeps) / substeps
    seg = q[:-1, None, :] * (1 - fr)[None, :, None] + q[1:, None, :] * fr[None, :, None]
    return np.concatenate([seg.reshape((H - 1) * substeps, 2), q[-1:]], axis=0)


def _sphere_tracks(traj: Trajectory, shape: RobotShape, substeps: int):
    """Interpolated center track per robot sphere: list of ((T,2), radius)."""
    out = []
    for off, r in shape.spheres:
        out.append((_interp_positions(traj.positions + np.asarray(off), substeps), r))
    return out


def find_conflicts(trajs: list, shape: RobotShape,
                   substeps: int = DEFAULT_SUBSTEPS) -> list:
    """All pairwise disk-overlap conflicts, one per (pair, time step).

    A step t conflicts when the robots' disks overlap at any of its
    interpolated sub-times; the conflict point is the midpoint of the two
    overlapping sphere centers at the earliest such sub-time. Sorted by
    t_step, then (i, j).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    H = trajs[0].horizon
    dt = trajs[0].dt
    for tr in trajs:
        if tr.horizon != H or tr.dt != dt:
            raise ValueError("trajectories must share horizon and dt")
    tracks = [_sphere_tracks(tr, shape, substeps) for tr in trajs]
    n = len(trajs)
    conflicts = []
    for i in range(n):
        for j in range(i + 1, n):
            hit = None  # sub-time index -> midpoint, earliest per step
            for ci, ri in tracks[i]:
                for cj, rj in tracks[j]:
                    d = np.linalg.norm(ci - cj, axis=1)
                    overlap = d < (ri + rj)
                    if not overlap.any():
                        continue
                    idx = np.nonzero(overlap)[0]
                    if hit is None:
                        hit = {}
                    for s in idx:
                        step = min(s // substeps, H - 1)
                        if step not in hit or s < hit[step][0]:
                            hit[step] = (s, 0.5 * (ci[s] + cj[s]))
            if hit:
                for step in sorted(hit):
                    conflicts.append(Conflict(i, j, int(step), hit[step][1]))
    conflicts.sort(key=lambda c: (c.t_step, c.robot_i, c.robot_j))
    return conflicts


def count_conflicts(trajs: list, shape: RobotShape,
                    substeps: int = DEFAULT_SUBSTEPS) -> int:
    return len(find_conflicts(trajs, shape, substeps))


def pairwise_conflict_counts(batch: list, others: list, shape: RobotShape,
                             substeps: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Conflict count of each batch trajectory against a set of others."""
    counts = np.zeros(len(batch), dtype=int)
    for b, tr in enumerate(batch):
        for other in others:
            counts[b] += count_conflicts([tr, other], shape, substeps)
    return counts


# --------------------------
# Serialization
# --------------------------
def trajectory_to_text(traj: Trajectory) -> str:
    """Flat numeric records: one `t x y vx vy` line per step."""
    buf = io.StringIO()
    t = np.arange(traj.horizon) * traj.dt
    np.savetxt(buf, np.column_stack([t, traj.states]),
               fmt="%.17g", header="t x y vx vy")
    return buf.getvalue()


def trajectory_from_text(text: str) -> Trajectory:
    arr = np.loadtxt(io.StringIO(text), ndmin=2)
    if arr.shape[1] != 5:
        raise ValueError("expected 5 columns: t x y vx vy")
    dt = float(arr[1, 0] - arr[0, 0]) if arr.shape[0] > 1 else DEFAULT_DT
    return Trajectory(states=arr[:, 1:], dt=dt)


def save_trajectory_batch(path, trajs: list):
    """Binary batch format for sets of same-shape trajectories."""
    states = np.stack([tr.states for tr in trajs])
    np.savez_compressed(path, states=states, dt=trajs[0].dt)


def load_trajectory_batch(path) -> list:
    with np.load(path) as data:
        dt = float(data["dt"])
        return [Trajectory(states=s, dt=dt) for s in data["states"]]
