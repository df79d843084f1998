"""Trajectory denoising diffusion: schedule, training, guided sampling.

The model diffuses the full flattened (position, velocity) trajectory in
per-channel z-scored coordinates. Sampling follows the clean-prediction
reading of the reverse process: at each step the network predicts the clean
trajectory, a guidance term descends the weighted cost gradient scaled by
eta * beta, and noise with variance beta is re-injected (none at the final
step). Start and goal states are overwritten after every step (inpainting)
and the returned trajectories carry them bit-exactly.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .constraints import PackedConstraints, pack_constraints, packed_cost_grad
from .geometry import ROBOT_RADIUS, RobotShape, World
from .nnet import Adam, DenoiserNet, time_features
from .trajectory import DEFAULT_DT, DEFAULT_H, Trajectory

DEFAULT_K = 25
WARM_NOISE_STEPS = 3  # renoising depth for experience reuse

# Guidance weights (strong/weak constraint, obstacle, smoothness).
LAMBDA_SMOOTH = 8e-2
LAMBDA_OBJ = 2e-2
LAMBDA_STRONG = 2e-1
LAMBDA_WEAK = 2e-2

STD_FLOOR = 1e-3  # degenerate datasets have zero-variance channels


# --------------------------
# Variance schedule
# --------------------------
@dataclass(frozen=True)
class VarianceSchedule:
    """betas[k-1] is the variance of denoising step k; increasing in k so the
    last stochastic step injects the least noise."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least two betas")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def k_max(self) -> int:
        return self.betas.size

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, k) -> np.ndarray:
        return self.alpha_bars[np.asarray(k) - 1]

    def posterior_coeffs(self, k: int):
        """Coefficients (on x0 and x_k) and variance of q(x_{k-1} | x_k, x0)."""
        beta = self.betas[k - 1]
        ab_k = self.alpha_bars[k - 1]
        ab_prev = self.alpha_bars[k - 2] if k >= 2 else 1.0
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_k)
        ck = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_k)
        var = (1.0 - ab_prev) / (1.0 - ab_k) * beta
        return c0, ck, var


def exponential_schedule(k_max: int = DEFAULT_K, beta_lo: float = 1e-4,
                         beta_hi: float = 0.2) -> VarianceSchedule:
    betas = np.exp(np.linspace(np.log(beta_lo), np.log(beta_hi), k_max))
    return VarianceSchedule(betas=betas)


def forward_noise(x0: np.ndarray, k: int, noise: np.ndarray,
                  sched: VarianceSchedule) -> np.ndarray:
    """sqrt(abar_k) x0 + sqrt(1 - abar_k) noise, in normalized coordinates."""
    if not 1 <= k <= sched.k_max:
        raise ValueError(f"k={k} outside [1, {sched.k_max}]")
    ab = sched.alpha_bar(k)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# --------------------------
# Queries and guidance
# --------------------------
@dataclass(frozen=True)
class Query:
    start: np.ndarray   # (4,) state
    goal: np.ndarray    # (4,) state
    horizon: int = DEFAULT_H
    hold_steps: int = 0  # staggered starts clamp the start state this long

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, float))
        object.__setattr__(self, "goal", np.asarray(self.goal, float))


@dataclass(frozen=True)
class GuidanceSpec:
    lambda_smooth: float = LAMBDA_SMOOTH
    lambda_obj: float = LAMBDA_OBJ
    lambda_strong: float = LAMBDA_STRONG
    lambda_weak: float = LAMBDA_WEAK
    eta: float = 1.0            # overall guidance scale, constant across k
    n_guide_steps: int = 2      # gradient iterations per denoising step
    constraints: tuple = ()
    world: World | None = None
    obstacle_margin: float = ROBOT_RADIUS + 0.02
    grad_clip: float = 5.0  # sampler-side per-state cap, cost/grad stay exact

    def with_constraints(self, constraints) -> "GuidanceSpec":
        return replace(self, constraints=tuple(constraints))


# --------------------------
# Denoiser model
# --------------------------
@dataclass
class DenoiserModel:
    net: DenoiserNet
    schedule: VarianceSchedule
    mean: np.ndarray            # (4,) per-channel normalization
    std: np.ndarray             # (4,)
    h: int
    dt: float
    kind: str | None = None
    mean_speed: float = 0.0     # dataset mean |velocity|, for boundary states
    loss_curve: list = field(default_factory=list)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def predict_clean(self, x: np.ndarray, k: int) -> np.ndarray:
        """Clean-trajectory prediction for a normalized batch (B, H, 4)."""
        b = x.shape[0]
        tf = time_features(np.full(b, k), self.schedule.k_max, self.net.emb)
        out, _ = self.net.forward(x.reshape(b, -1), tf)
        return out.reshape(x.shape)


def train(dataset, sched: VarianceSchedule | None = None, *,
          epochs: int = 100, batch: int = 128, lr: float = 2e-3,
          seed: int = 0, width: int = 256, kind: str | None = None,
          dt: float = DEFAULT_DT, endpoint_cond_prob: float = 1.0) -> DenoiserModel:
    """Denoising score-matching training with clean-trajectory targets.

    dataset: (N, H, 4) array, or a list of Trajectory / Demonstration.
    Deterministic per seed; the per-epoch loss curve is stored on the model.
    """
    states = _as_states(dataset)
    if states.size == 0:
        raise ValueError("empty dataset")
    n, h, c = states.shape
    sched = sched or exponential_schedule()
    mean = states.reshape(-1, c).mean(axis=0)
    std = np.maximum(states.reshape(-1, c).std(axis=0), STD_FLOOR)
    x0_all = ((states - mean) / std).reshape(n, -1)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    net = DenoiserNet(dim=h * c, width=width, rng=rng)
    opt = Adam(net.params, lr=lr)
    ab = sched.alpha_bars
    end_cols = np.r_[0:c, (h - 1) * c:h * c]

    losses = []
    for epoch in range(epochs):
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs)))
        perm = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            x0 = x0_all[idx]
            b = x0.shape[0]
            k = rng.integers(1, sched.k_max + 1, size=b)
            eps = rng.standard_normal(x0.shape)
            xk = np.sqrt(ab[k - 1])[:, None] * x0 + np.sqrt(1 - ab[k - 1])[:, None] * eps
            cond = rng.random(b) < endpoint_cond_prob
            xk[np.ix_(cond, end_cols)] = x0[np.ix_(cond, end_cols)]
            tf = time_features(k, sched.k_max, net.emb)
            out, cache = net.forward(xk, tf)
            diff = out - x0
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise RuntimeError("training diverged (non-finite loss)")
            grads = net.backward(cache, 2.0 * diff / diff.size)
            opt.step(net.params, grads)
            epoch_loss += loss * b
            seen += b
        losses.append(epoch_loss / seen)

    speeds = np.linalg.norm(states[:, :, 2:], axis=2)
    endpoint = np.concatenate([speeds[:, 0], speeds[:, -1]])
    moving = endpoint[endpoint > 0.3]
    mean_speed = float(np.median(moving)) if moving.size else float(speeds.mean())
    return DenoiserModel(net=net, schedule=sched, mean=mean, std=std, h=h,
                         dt=dt, kind=kind, mean_speed=mean_speed,
                         loss_curve=losses)


def _as_states(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset
    rows = []
    for d in dataset:
        traj = d.traj if hasattr(d, "traj") else d
        rows.append(traj.states)
    return np.stack(rows) if rows else np.empty((0, 0, 0))


# --------------------------
# Guidance cost and gradient (exact; shared by sampler and tests)
# --------------------------
def _smooth_cost_grad(pos: np.ndarray):
    """Squared per-step second differences of position and gradient."""
    d2 = pos[:, 2:] - 2.0 * pos[:, 1:-1] + pos[:, :-2]
    cost = np.sum(d2 ** 2, axis=(1, 2))
    grad = np.zeros_like(pos)
    grad[:, :-2] += d2
    grad[:, 1:-1] -= 2.0 * d2
    grad[:, 2:] += d2
    return cost, 2.0 * grad


def _obstacle_cost_grad(pos: np.ndarray, world: World, margin: float):
    if world is None or not world.obstacles:
        return np.zeros(pos.shape[0]), np.zeros_like(pos)
    flat = pos.reshape(-1, 2)
    dist = geometry.sdf(world, flat)
    hinge = np.maximum(margin - dist, 0.0)
    cost = np.sum(hinge.reshape(pos.shape[:2]) ** 2, axis=1)
    grad = np.zeros_like(flat)
    act = hinge > 0
    if act.any():
        grad[act] = -2.0 * hinge[act, None] * geometry.sdf_grad(world, flat[act])
    return cost, grad.reshape(pos.shape)


def _pack_guide(guide: GuidanceSpec, shape: RobotShape, horizon: int) -> PackedConstraints:
    return pack_constraints(list(guide.constraints), shape, horizon,
                            guide.lambda_strong, guide.lambda_weak)


def guidance_cost_grad_batch(states: np.ndarray, guide: GuidanceSpec,
                             shape: RobotShape,
                             packed: PackedConstraints | None = None):
    """Total guidance cost and gradient for a raw-coordinate batch (B, H, 4).

    Only position channels receive gradient; velocity columns are zero.
    """
    pos = states[:, :, :2]
    if packed is None:
        packed = _pack_guide(guide, shape, states.shape[1])
    c_s, g_s = _smooth_cost_grad(pos)
    c_o, g_o = _obstacle_cost_grad(pos, guide.world, guide.obstacle_margin)
    c_c, g_c = packed_cost_grad(pos, packed)
    cost = guide.lambda_smooth * c_s + guide.lambda_obj * c_o + c_c
    grad = np.zeros_like(states)
    grad[:, :, :2] = guide.lambda_smooth * g_s + guide.lambda_obj * g_o + g_c
    return cost, grad


def guidance_cost(traj: Trajectory, guide: GuidanceSpec,
                  shape: RobotShape = RobotShape()) -> float:
    cost, _ = guidance_cost_grad_batch(traj.states[None], guide, shape)
    return float(cost[0])


def guidance_grad(traj: Trajectory, guide: GuidanceSpec,
                  shape: RobotShape = RobotShape()) -> np.ndarray:
    _, grad = guidance_cost_grad_batch(traj.states[None], guide, shape)
    return grad[0]


# --------------------------
# Guided ancestral sampling with inpainting
# --------------------------
class _GuideCtx:
    """Precomputed guidance state for one sampling run."""

    def __init__(self, model: DenoiserModel, guide: GuidanceSpec,
                 shape: RobotShape):
        self.model = model
        self.guide = guide
        self.shape = shape
        self.packed = _pack_guide(guide, shape, model.h)
        self.active = (guide.lambda_smooth > 0 or guide.lambda_obj > 0
                       or self.packed.size > 0)

    def normalized_grad(self, x0: np.ndarray) -> np.ndarray:
        raw = self.model.denormalize(x0)
        _, grad = guidance_cost_grad_batch(raw, self.guide, self.shape,
                                           self.packed)
        g = grad * self.model.std  # chain rule into normalized coordinates
        norms = np.linalg.norm(g, axis=2, keepdims=True)
        cap = self.guide.grad_clip
        return g * np.minimum(1.0, cap / np.maximum(norms, 1e-12))


X0_CLIP = 4.0          # predicted clean values are clipped to this many sigmas
GUIDE_GAIN = 30.0      # step size gain so strong constraints win the
GUIDE_VAR_FLOOR = 0.05  # tug-of-war against the denoiser's data projection


def denoise_step(model: DenoiserModel, x: np.ndarray, k: int,
                 ctx: _GuideCtx | None, rng: np.random.Generator) -> np.ndarray:
    """One reverse step at index k on a normalized batch (B, H, 4).

    The next mean is the forward-process posterior evaluated at the
    predicted clean trajectory; guidance then descends the cost gradient
    for a few fixed-size iterations. The injected noise variance is the
    posterior variance, zero at k = 1.
    """
    x0 = np.clip(model.predict_clean(x, k), -X0_CLIP, X0_CLIP)
    c0, ck, var = model.schedule.posterior_coeffs(k)
    mean = c0 * x0 + ck * x
    if ctx is not None and ctx.active:
        step = ctx.guide.eta * GUIDE_GAIN * max(var, GUIDE_VAR_FLOOR)
        for _ in range(ctx.guide.n_guide_steps):
            mean = mean - step * ctx.normalized_grad(mean)
    if k > 1:
        mean = mean + np.sqrt(var) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(mean)):
        raise FloatingPointError("non-finite values during denoising")
    return mean


def _inpaint_rows(query: Query, model: DenoiserModel):
    idx = list(range(min(query.hold_steps, model.h - 2) + 1)) + [model.h - 1]
    raw = np.array([query.start] * (len(idx) - 1) + [query.goal])
    return np.array(idx), raw


def _run_reverse(model, x, k_from, idx, vals_norm, guide, shape, rng):
    ctx = _GuideCtx(model, guide, shape) if guide is not None else None
    x[:, idx] = vals_norm
    for k in range(k_from, 0, -1):
        x = denoise_step(model, x, k, ctx, rng)
        x[:, idx] = vals_norm
    return x


def sample(model: DenoiserModel, query: Query, guide: GuidanceSpec | None = None,
           batch: int = 10, seed: int = 0,
           shape: RobotShape = RobotShape()) -> list:
    """Guided batch of trajectories conditioned on the query endpoints."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx, raw = _inpaint_rows(query, model)
    x = rng.standard_normal((batch, model.h, 4))
    x = _run_reverse(model, x, model.schedule.k_max, idx,
                     model.normalize(raw), guide, shape, rng)
    out = model.denormalize(x)
    out[:, idx] = raw  # endpoints bit-exact in raw coordinates
    return [Trajectory(states=s, dt=model.dt) for s in out]


def warm_sample(model: DenoiserModel, prev: Trajectory,
                guide: GuidanceSpec | None = None,
                k_noise: int = WARM_NOISE_STEPS, batch: int = 10,
                seed: int = 0, shape: RobotShape = RobotShape(),
                query: Query | None = None) -> list:
    """Resample by renoising a stored trajectory k_noise steps, then denoising.

    With k_noise = K this is distributionally a fresh sample. Endpoints are
    inpainted from `query` when given, else from the stored trajectory.
    """
    if not 1 <= k_noise <= model.schedule.k_max:
        raise ValueError("k_noise outside schedule")
    if prev.horizon != model.h or prev.dt != model.dt:
        raise ValueError("trajectory does not match the model horizon")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if query is None:
        query = Query(start=prev.states[0], goal=prev.states[-1],
                      horizon=prev.horizon)
    idx, raw = _inpaint_rows(query, model)
    xn = model.normalize(prev.states)[None].repeat(batch, axis=0)
    x = forward_noise(xn, k_noise, rng.standard_normal(xn.shape), model.schedule)
    x = _run_reverse(model, x, k_noise, idx, model.normalize(raw), guide,
                     shape, rng)
    out = model.denormalize(x)
    out[:, idx] = raw
    return [Trajectory(states=s, dt=model.dt) for s in out]


# --------------------------
# Checkpoint files
# --------------------------
def save_model(path, model: DenoiserModel):
    params = {f"param_{k}": v for k, v in model.net.params.items()}
    digest = hashlib.sha256(
        b"".join(v.tobytes() for _, v in sorted(params.items()))).hexdigest()
    header = json.dumps({
        "format": "mrdiff-model", "version": 1, "h": model.h, "dt": model.dt,
        "kind": model.kind, "mean_speed": model.mean_speed,
        "width": model.net.width, "emb": model.net.emb, "sha256": digest,
    })
    np.savez_compressed(path, header=header, betas=model.schedule.betas,
                        mean=model.mean, std=model.std,
                        loss_curve=np.array(model.loss_curve), **params)


def load_model(path) -> DenoiserModel:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "mrdiff-model":
            raise ValueError(f"{path}: not a model checkpoint")
        params = {k[len("param_"):]: data[k] for k in data.files
                  if k.startswith("param_")}
        digest = hashlib.sha256(
            b"".join(v.tobytes() for _, v in
                     sorted((f"param_{k}", v) for k, v in params.items()))
        ).hexdigest()
        if digest != header["sha256"]:
            raise ValueError(f"{path}: parameter hash mismatch")
        sched = VarianceSchedule(betas=data["betas"])
        net = DenoiserNet(dim=int(header["h"]) * 4, width=int(header["width"]),
                          emb=int(header["emb"]))
        net.params = {k: np.ascontiguousarray(v) for k, v in params.items()}
        return DenoiserModel(
            net=net, schedule=sched, mean=data["mean"], std=data["std"],
            h=int(header["h"]), dt=float(header["dt"]), kind=header["kind"],
            mean_speed=float(header["mean_speed"]),
            loss_curve=list(data["loss_curve"]))
