"""Multi-robot coordination over diffusion low-level planners.

Five strategies share one machinery: prioritized planning (one sequential
pass, strong constraints from higher-priority robots) and a constraint-tree
search that splits on the earliest conflict, adding one strong sphere
constraint per child and resampling only the constrained robot. Variants:

  plan_pp                        sequential, strong constraints
  plan_cbs(weak=False, xp=False) vanilla constraint tree
  plan_cbs(weak=True,  xp=False) weak constraints from peers' current plans
  plan_cbs(weak=False, xp=True)  experience reuse (warm restarts)
  plan_cbs(weak=True,  xp=True)  both

Constraint-tree nodes are explored in ascending order of the conflict count
of their representative trajectories, ties by insertion order. Each robot
keeps a batch of sampled trajectories; the representative is the batch
element with the fewest conflicts against the other robots' representatives.
"""

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import (CONSTRAINT_HALF_STEPS, CONSTRAINT_RADIUS, STRONG,
                          WEAK, SphereConstraint, constraints_from_trajectory)
from .diffusion import (WARM_NOISE_STEPS, DenoiserModel, GuidanceSpec, Query,
                        sample, warm_sample)
from .geometry import RobotShape, World
from .trajectory import (Conflict, Trajectory, count_conflicts,
                         find_conflicts, pairwise_conflict_counts)

DEFAULT_WALL_CLOCK = 60.0   # seconds; tiled experiments relax this to 240
DEFAULT_MAX_NODES = 200
DEFAULT_BATCH = 10


@dataclass
class Limits:
    wall_clock: float = DEFAULT_WALL_CLOCK
    max_nodes: int = DEFAULT_MAX_NODES


@dataclass
class Problem:
    world: World
    queries: list                     # per-robot Query
    shape: RobotShape = field(default_factory=RobotShape)
    models: object = None             # DenoiserModel, list of them, or
                                      # {tile kind: model} with skeletons
    limits: Limits = field(default_factory=Limits)
    batch: int = DEFAULT_BATCH
    guide: GuidanceSpec | None = None
    skeletons: list | None = None     # per-robot tile index lists (optional)

    def __post_init__(self):
        if self.guide is None:
            self.guide = GuidanceSpec(world=self.world)
        hs = {q.horizon for q in self.queries}
        if len(hs) != 1:
            raise ValueError("queries must share a horizon")

    @property
    def n_robots(self) -> int:
        return len(self.queries)


@dataclass
class CTNode:
    constraints: list        # per-robot list of strong SphereConstraint
    batches: list            # per-robot list of Trajectory
    reps: list               # per-robot representative index
    n_conflicts: int
    seq: int

    def rep_trajs(self) -> list:
        return [b[r] for b, r in zip(self.batches, self.reps)]


@dataclass
class Solution:
    trajs: list | None
    success: bool
    stats: dict


class DiffusionPlanner:
    """Low-level planner for one robot backed by a single diffusion model."""

    def __init__(self, model: DenoiserModel, query: Query,
                 guide: GuidanceSpec, batch: int, shape: RobotShape):
        self.model = model
        self.query = query
        self.guide = guide
        self.batch = batch
        self.shape = shape

    @property
    def horizon(self) -> int:
        return self.model.h

    def sample_batch(self, constraints: list, seed: int) -> list:
        return sample(self.model, self.query,
                      self.guide.with_constraints(constraints),
                      batch=self.batch, seed=seed, shape=self.shape)

    def warm_batch(self, prev: Trajectory, constraints: list, seed: int) -> list:
        return warm_sample(self.model, prev,
                           self.guide.with_constraints(constraints),
                           k_noise=WARM_NOISE_STEPS, batch=self.batch,
                           seed=seed, shape=self.shape, query=self.query)


def build_planners(problem: Problem) -> list:
    """Per-robot low-level planners; skeleton problems get stitched samplers."""
    if problem.skeletons is not None:
        from .sequencing import Skeleton, SkeletonPlanner
        planners = []
        for q, tiles in zip(problem.queries, problem.skeletons):
            sk = Skeleton.for_world(problem.world, tiles, problem.models)
            planners.append(SkeletonPlanner(sk, q, problem.world,
                                            problem.guide, problem.batch,
                                            problem.shape))
        return planners
    models = problem.models
    if isinstance(models, DenoiserModel):
        models = [models] * problem.n_robots
    return [DiffusionPlanner(m, q, problem.guide, problem.batch, problem.shape)
            for m, q in zip(models, problem.queries)]


# --------------------------
# Shared pieces
# --------------------------
def select_representative(batch: list, others: list, shape: RobotShape) -> int:
    """Index of the batch element with fewest conflicts against `others`;
    ties go to the lowest index."""
    if not batch:
        raise ValueError("empty batch")
    if not others:
        return 0
    counts = pairwise_conflict_counts(batch, others, shape)
    return int(np.argmin(counts))


def get_one_conflict(reps: list, shape: RobotShape) -> Conflict:
    """Earliest conflict among the representative trajectories."""
    conflicts = find_conflicts(reps, shape)
    if not conflicts:
        raise ValueError("no conflicts in a conflict-free node")
    return conflicts[0]


def _weak_from(trajs: list, shape: RobotShape) -> list:
    out = []
    for tr in trajs:
        out += constraints_from_trajectory(tr, shape, WEAK)
    return out


def _derive_seed(seed: int, node_seq: int, robot: int) -> int:
    """Independent deterministic stream per (base seed, CT node, robot)."""
    ss = np.random.SeedSequence(entropy=[seed & 0xFFFFFFFF, node_seq, robot])
    return int(ss.generate_state(1)[0])


def _sphere_for(conflict: Conflict, horizon: int) -> SphereConstraint:
    return SphereConstraint(
        center=conflict.point, radius=CONSTRAINT_RADIUS,
        t_lo=max(conflict.t_step - CONSTRAINT_HALF_STEPS, 0),
        t_hi=min(conflict.t_step + CONSTRAINT_HALF_STEPS, horizon - 1),
        strength=STRONG)


class _Clock:
    def __init__(self, limit: float):
        self.t0 = time.perf_counter()
        self.limit = limit

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    @property
    def exceeded(self) -> bool:
        return self.elapsed > self.limit


# --------------------------
# Prioritized planning
# --------------------------
def plan_pp(problem: Problem, seed: int = 0) -> Solution:
    """One sequential pass in robot index order; robot i avoids the
    representatives of robots j < i via strong constraints. Soft constraints
    give no guarantee, so the pass can fail; the conflicting trajectories are
    still attached."""
    clock = _Clock(problem.limits.wall_clock)
    planners = build_planners(problem)
    shape = problem.shape
    reps = []
    samples_drawn = 0
    sample_time = 0.0
    for i, pl in enumerate(planners):
        if clock.exceeded:
            return Solution(None, False, {
                "reason": "wall_clock", "wall_time": clock.elapsed,
                "nodes_expanded": 0, "samples_drawn": samples_drawn,
                "conflicts": -1})
        cons = []
        for tr in reps:
            cons += constraints_from_trajectory(tr, shape, STRONG)
        t0 = time.perf_counter()
        batch = pl.sample_batch(cons, seed=_derive_seed(seed, 0, i))
        sample_time += time.perf_counter() - t0
        samples_drawn += len(batch)
        reps.append(batch[select_representative(batch, reps, shape)])
    n_conf = count_conflicts(reps, shape)
    return Solution(reps, n_conf == 0, {
        "nodes_expanded": 0, "samples_drawn": samples_drawn,
        "wall_time": clock.elapsed, "conflicts": n_conf,
        "sample_time": sample_time, "sample_calls": len(planners)})


# --------------------------
# Constraint-tree search
# --------------------------
def plan_cbs(problem: Problem, weak_constraints: bool = False,
             experience_reuse: bool = False, seed: int = 0) -> Solution:
    """Conflict-driven constraint-tree search over diffusion planners."""
    clock = _Clock(problem.limits.wall_clock)
    planners = build_planners(problem)
    shape = problem.shape
    horizon = planners[0].horizon
    n = problem.n_robots
    stats = {"nodes_expanded": 0, "samples_drawn": 0, "sample_time": 0.0,
             "sample_calls": 0, "child_sample_time": 0.0,
             "child_sample_calls": 0}

    def timed(fn, *args, child=False):
        t0 = time.perf_counter()
        batch = fn(*args)
        dt = time.perf_counter() - t0
        stats["sample_time"] += dt
        stats["sample_calls"] += 1
        stats["samples_drawn"] += len(batch)
        if child:
            stats["child_sample_time"] += dt
            stats["child_sample_calls"] += 1
        return batch

    # Root: sample robots independently; under weak constraints each robot
    # is softly informed of the representatives chosen so far.
    reps_trajs = []
    batches = []
    rep_idx = []
    for i, pl in enumerate(planners):
        cons = _weak_from(reps_trajs, shape) if weak_constraints else []
        batch = timed(pl.sample_batch, cons, _derive_seed(seed, 0, i))
        rep = select_representative(batch, reps_trajs, shape)
        batches.append(batch)
        rep_idx.append(rep)
        reps_trajs.append(batch[rep])
    root = CTNode(constraints=[[] for _ in range(n)], batches=batches,
                  reps=rep_idx,
                  n_conflicts=count_conflicts(reps_trajs, shape), seq=0)

    open_list = [(root.n_conflicts, root.seq, root)]
    best = root
    next_seq = 1

    def failure(reason):
        trajs = best.rep_trajs()
        stats.update({"wall_time": clock.elapsed, "reason": reason,
                      "conflicts": best.n_conflicts})
        return Solution(trajs, False, stats)

    while open_list:
        if clock.exceeded:
            return failure("wall_clock")
        if stats["nodes_expanded"] >= problem.limits.max_nodes:
            return failure("node_limit")
        _, _, node = heapq.heappop(open_list)
        stats["nodes_expanded"] += 1
        if node.n_conflicts < best.n_conflicts:
            best = node
        if node.n_conflicts == 0:
            stats.update({"wall_time": clock.elapsed, "conflicts": 0})
            return Solution(node.rep_trajs(), True, stats)
        conflict = get_one_conflict(node.rep_trajs(), shape)
        for robot in (conflict.robot_i, conflict.robot_j):
            child_constraints = list(node.constraints)
            child_constraints[robot] = node.constraints[robot] + [
                _sphere_for(conflict, horizon)]
            cons = list(child_constraints[robot])
            if weak_constraints:
                others = [tr for r, tr in enumerate(node.rep_trajs())
                          if r != robot]
                cons += _weak_from(others, shape)
            s = _derive_seed(seed, next_seq, robot)
            if experience_reuse:
                prev = node.batches[robot][node.reps[robot]]
                batch = timed(planners[robot].warm_batch, prev, cons, s,
                              child=True)
            else:
                batch = timed(planners[robot].sample_batch, cons, s,
                              child=True)
            others = [tr for r, tr in enumerate(node.rep_trajs()) if r != robot]
            rep = select_representative(batch, others, shape)
            child_batches = list(node.batches)
            child_batches[robot] = batch
            child_reps = list(node.reps)
            child_reps[robot] = rep
            child = CTNode(constraints=child_constraints,
                           batches=child_batches, reps=child_reps,
                           n_conflicts=count_conflicts(
                               [b[r] for b, r in zip(child_batches, child_reps)],
                               shape),
                           seq=next_seq)
            heapq.heappush(open_list, (child.n_conflicts, child.seq, child))
            if child.n_conflicts < best.n_conflicts:
                best = child
            next_seq += 1
    return failure("exhausted")


def plan(problem: Problem, algo: str, seed: int = 0) -> Solution:
    """Dispatch by strategy name: pp, cbs, ecbs, xcbs, xecbs."""
    algo = algo.lower()
    if algo == "pp":
        return plan_pp(problem, seed)
    flags = {"cbs": (False, False), "ecbs": (True, False),
             "xcbs": (False, True), "xecbs": (True, True)}
    if algo not in flags:
        raise ValueError(f"unknown strategy {algo!r}")
    weak, xp = flags[algo]
    return plan_cbs(problem, weak_constraints=weak, experience_reuse=xp,
                    seed=seed)


def validate_solution(trajs: list, queries: list, shape: RobotShape) -> dict:
    """Shared acceptance predicate: zero conflicts and exact endpoints."""
    conflicts = count_conflicts(trajs, shape)
    endpoints_ok = all(
        np.array_equal(tr.states[0], q.start) and
        np.array_equal(tr.states[-1], q.goal)
        for tr, q in zip(trajs, queries))
    return {"conflicts": conflicts, "endpoints_ok": endpoints_ok,
            "valid": conflicts == 0 and endpoints_ok}
