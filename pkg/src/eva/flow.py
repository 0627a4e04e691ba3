"""Flow-matching generator over arm rollouts, with ODE and marginal-preserving SDE samplers.

A rollout latent is a (T, d + 2) array: per step the joint displacement from
the current pose followed by a deformation channel and a jitter channel. Noise
is at t = 0 and data at t = 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import ArmConfig, ArtifactKind, ArtifactSpec, Episode, NO_ARTIFACT, TaskSpec, rasterize_pose, forward_kinematics, _jitter_joints
from .numeric import OptimizerState, adamw_step, clip_grad_norm, decode_json, encode_json, make_rng

log = logging.getLogger(__name__)

HISTORY = 4
ARTIFACT_THRESHOLD = 0.05


@dataclass
class GenConfig:
    T: int = 16
    d: int = 3
    n_tasks: int = 20
    hidden: int = 256
    t_embed: int = 8
    u_scale: float = 0.5  # jitter std (length units) per unit of jitter channel

    @property
    def latent_dim(self) -> int:
        return self.d + 2

    @property
    def cond_dim(self) -> int:
        return self.n_tasks + self.d + HISTORY * self.d


@dataclass
class SamplerConfig:
    n_steps: int = 32
    g: float = 0.25
    schedule: str = "constant"  # or "sqrt": g * sqrt(t / (1 - t))
    eps_t: float = 1e-3

    def g_at(self, t):
        if self.schedule == "constant":
            return self.g * (torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0)
        if self.schedule == "sqrt":
            return self.g * (torch.sqrt(t / (1 - t)) if isinstance(t, torch.Tensor) else math.sqrt(t / (1 - t)))
        raise ValueError(f"unknown g schedule {self.schedule!r}")


def time_grid(n_steps: int, eps_t: float = 1e-3) -> torch.Tensor:
    """[0, 1/N, ..., (N-1)/N, 1 - eps_t, 1]: N stochastic steps then one closing step."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    t = torch.arange(n_steps + 2, dtype=torch.float64) / n_steps
    t[n_steps] = 1.0 - eps_t
    t[n_steps + 1] = 1.0
    if n_steps > 1 and t[n_steps - 1] >= t[n_steps]:
        raise ValueError("eps_t too large for this many steps")
    return t


# --------------------------------------------------------------------- network


def time_embedding(t: torch.Tensor, dim: int = 8) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float64) * (math.log(100.0) / max(half - 1, 1)))
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class VelocityField(nn.Module):
    """MLP v(x_t, t, c) on flattened latents."""

    def __init__(self, cfg: GenConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        n = cfg.T * cfg.latent_dim
        self.fc1 = nn.Linear(n + cfg.t_embed + cfg.cond_dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden)
        self.out = nn.Linear(cfg.hidden, n)
        rng = make_rng(seed, "gen-init")
        for layer in (self.fc1, self.fc2, self.out):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
                layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))

    def forward(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.float64).expand(B) if torch.as_tensor(t).ndim == 0 else t
        h = torch.cat([x.reshape(B, -1), time_embedding(t, self.cfg.t_embed), c], dim=-1)
        h = F.silu(self.fc1(h))
        h = F.silu(self.fc2(h))
        return self.out(h).reshape(x.shape)

    def records(self, prefix: str = "gen") -> dict:
        rec = {f"{prefix}/{k}": v for k, v in self.state_dict().items()}
        rec[f"{prefix}/config"] = encode_json(asdict(self.cfg))
        return rec

    @classmethod
    def from_records(cls, rec: dict, prefix: str = "gen") -> "VelocityField":
        if f"{prefix}/config" not in rec:
            raise KeyError(f"no {prefix!r} model in checkpoint")
        model = cls(GenConfig(**decode_json(rec[f"{prefix}/config"])))
        sd = {k[len(prefix) + 1 :]: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in rec.items() if k.startswith(prefix + "/") and k != f"{prefix}/config"}
        model.load_state_dict(sd)
        return model

    def clone(self) -> "VelocityField":
        other = VelocityField(self.cfg)
        other.load_state_dict({k: v.clone() for k, v in self.state_dict().items()})
        return other


# ------------------------------------------------------------------- conditions


def condition_for(task: TaskSpec, q_current, cfg: GenConfig, history=None) -> np.ndarray:
    """Task one-hot, current pose, and up to four previous poses relative to it
    (missing history means the arm was at rest: zero rows)."""
    if not 0 <= task.task_id < cfg.n_tasks:
        raise ValueError(f"task id {task.task_id} outside 0..{cfg.n_tasks - 1}")
    onehot = np.zeros(cfg.n_tasks)
    onehot[task.task_id] = 1.0
    q_current = np.asarray(q_current, dtype=np.float64)
    hist = np.zeros((HISTORY, cfg.d))
    if history is not None and len(history):
        h = np.asarray(history, dtype=np.float64)[-HISTORY:] - q_current
        hist[HISTORY - len(h) :] = h
    return np.concatenate([onehot, q_current, hist.reshape(-1)])


def encode_episode(episode: Episode, cfg: GenConfig, offsets: Sequence[int] = (0,)) -> list[tuple[np.ndarray, np.ndarray]]:
    """(latent, condition) training pairs from an expert episode.

    Offset ``c`` starts the rollout at pose ``c`` (the current pose), with the
    four preceding poses as history and the tail padded by holding the goal.
    """
    acts = episode.actions
    pairs = []
    for c in offsets:
        if c >= len(acts):
            continue
        seg = acts[c : c + cfg.T]
        if len(seg) < cfg.T:
            seg = np.vstack([seg, np.repeat(seg[-1:], cfg.T - len(seg), axis=0)])
        current = acts[c]
        prev = [acts[max(i, 0)] for i in range(c - HISTORY, c)] if c > 0 else None
        x1 = np.zeros((cfg.T, cfg.latent_dim))
        x1[:, : cfg.d] = seg - current
        pairs.append((x1, condition_for(episode.task, current, cfg, prev)))
    return pairs


# ---------------------------------------------------------------- flow matching


def interpolate(x0, x1, t):
    t = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 shapes differ")
    while t.ndim < x0.ndim:
        t = t[..., None]
    return (1 - t) * x0 + t * x1


def fm_loss(x1: torch.Tensor, cond: torch.Tensor, model, rng: np.random.Generator) -> torch.Tensor:
    """Mean over the batch of ||(x1 - x0) - v(x_t, t, c)||^2 with fresh x0, t."""
    if x1.shape[0] == 0:
        raise ValueError("empty batch")
    x0 = torch.from_numpy(rng.standard_normal(tuple(x1.shape)))
    t = torch.from_numpy(rng.uniform(0.0, 1.0, size=x1.shape[0]))
    xt = interpolate(x0, x1, t)
    target = x1 - x0
    return ((target - model(xt, t, cond)) ** 2).flatten(1).sum(-1).mean()


def _as_cond(conds) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(conds, dtype=np.float64))
    return c[None] if c.ndim == 1 else c


def _flat(stream) -> tuple:
    if isinstance(stream, (tuple, list)):
        return tuple(p for part in stream for p in _flat(part))
    return (stream,)


def _noise(seed: int, stream, B: int, shape) -> torch.Tensor:
    """Per-member noise so each rollout is reproducible on its own."""
    key = _flat(stream)
    return torch.from_numpy(np.stack([make_rng(seed, *key, b).standard_normal(shape) for b in range(B)]))


def sample_ode(conds, model, n_steps: int = 32, seed: int = 0, stream="ode", eps_t: float = 1e-3, x0=None) -> torch.Tensor:
    """Euler integration of dx/dt = v(x, t, c) from noise at t=0 to t=1."""
    c = _as_cond(conds)
    B = c.shape[0]
    shape = (model.cfg.T, model.cfg.latent_dim)
    x = _noise(seed, (stream, "x0"), B, shape) if x0 is None else torch.as_tensor(x0).clone()
    grid = time_grid(n_steps, eps_t)
    with torch.no_grad():
        for i in range(len(grid) - 1):
            x = x + model(x, grid[i].expand(B), c) * (grid[i + 1] - grid[i])
    return x


def score_from_velocity(x, t, v, eps_t: float = 1e-3):
    """Score of the linear Gaussian path, (t v - x) / (1 - t)."""
    if float(torch.as_tensor(t).max()) > 1 - eps_t + 1e-12:
        raise ValueError("t too close to 1: score is singular there")
    t = torch.as_tensor(t, dtype=torch.float64)
    while t.ndim < torch.as_tensor(x).ndim:
        t = t[..., None]
    return (t * v - x) / (1 - t)


def drift_from_velocity(x, t, v, g, eps_t: float = 1e-3):
    g = torch.as_tensor(g, dtype=torch.float64)
    while g.ndim < x.ndim:
        g = g[..., None]
    return v + 0.5 * g**2 * score_from_velocity(x, t, v, eps_t)


def drift(x, t, cond, model, sampler: SamplerConfig):
    B = x.shape[0]
    t = torch.as_tensor(t, dtype=torch.float64)
    t = t.expand(B) if t.ndim == 0 else t
    v = model(x, t, _as_cond(cond).expand(B, -1) if _as_cond(cond).shape[0] == 1 else _as_cond(cond))
    return drift_from_velocity(x, t, v, sampler.g_at(t), sampler.eps_t)


@dataclass
class SdeTrajectory:
    """A batch of recorded stochastic rollouts sharing one time grid.

    ``states[:, i]`` is the state at ``timesteps[i]`` (i = 0..N, the last at
    1 - eps_t); ``x1`` is the result of the closing deterministic step.
    """

    timesteps: torch.Tensor  # (N + 2,) full grid incl. t = 1
    states: torch.Tensor  # (B, N + 1, T, D)
    noises: torch.Tensor  # (B, N, T, D)
    conds: torch.Tensor  # (B, cond_dim)
    x1: torch.Tensor  # (B, T, D)
    sampler: SamplerConfig

    @property
    def n_steps(self) -> int:
        return self.noises.shape[1]

    def final(self, i: int) -> np.ndarray:
        return self.x1[i].numpy()

    def subset(self, idx) -> "SdeTrajectory":
        idx = torch.as_tensor(idx)
        return SdeTrajectory(self.timesteps, self.states[idx], self.noises[idx], self.conds[idx], self.x1[idx], self.sampler)


def _closing_step(x, grid, model, c):
    B = x.shape[0]
    return x + model(x, grid[-2].expand(B), c) * (grid[-1] - grid[-2])


def sample_sde(conds, model, sampler: SamplerConfig | None = None, seed: int = 0, stream="sde", noises=None, x0=None) -> SdeTrajectory:
    """Euler-Maruyama rollouts x_{i+1} = x_i + f dt + g sqrt(dt) z.

    Pass recorded ``noises`` (and ``x0``) to replay a trajectory exactly.
    """
    sampler = sampler or SamplerConfig()
    c = _as_cond(conds)
    B = c.shape[0]
    shape = (model.cfg.T, model.cfg.latent_dim)
    grid = time_grid(sampler.n_steps, sampler.eps_t)
    N = sampler.n_steps
    if noises is None:
        noises = _noise(seed, (stream, "z"), B, (N,) + shape)
    x = _noise(seed, (stream, "x0"), B, shape) if x0 is None else torch.as_tensor(x0).clone()
    states = [x]
    with torch.no_grad():
        for i in range(N):
            t, dt = grid[i], grid[i + 1] - grid[i]
            f = drift(x, t, c, model, sampler)
            g = sampler.g_at(t)
            x = x + f * dt + g * torch.sqrt(dt) * noises[:, i]
            states.append(x)
        x1 = _closing_step(x, grid, model, c)
    return SdeTrajectory(grid, torch.stack(states, 1), noises, c, x1, sampler)


def gaussian_log_prob(x, mean, std) -> torch.Tensor:
    """Isotropic normal log-density.

    ``std`` has the leading shape of the result (a scalar gives a scalar); all
    remaining trailing dims of ``x`` are summed over.
    """
    std = torch.as_tensor(std, dtype=torch.float64)
    lead = tuple(x.shape[: std.ndim])
    if tuple(std.shape) != lead:
        raise ValueError(f"std shape {tuple(std.shape)} does not lead x shape {tuple(x.shape)}")
    z = (x - mean) / std.reshape(lead + (1,) * (x.ndim - std.ndim))
    sq = (z**2).reshape(lead + (-1,)).sum(-1)
    D = int(np.prod(x.shape[std.ndim :]))
    return -0.5 * sq - D * torch.log(std) - 0.5 * D * math.log(2 * math.pi)


def step_means(traj: SdeTrajectory, model) -> torch.Tensor:
    """Transition means x_i + f(x_i, t_i) dt for every recorded step (B, N, T, D)."""
    B, N = traj.noises.shape[:2]
    grid = traj.timesteps
    x = traj.states[:, :N].reshape(B * N, *traj.states.shape[2:])
    t = grid[:N].repeat(B)
    dt = (grid[1 : N + 1] - grid[:N]).repeat(B)
    c = traj.conds.repeat_interleave(N, 0)
    v = model(x, t, c)
    f = drift_from_velocity(x, t, v, traj.sampler.g_at(t), traj.sampler.eps_t)
    return (x + f * dt[:, None, None]).reshape(B, N, *x.shape[1:])


def step_stds(traj: SdeTrajectory) -> torch.Tensor:
    grid = traj.timesteps
    N = traj.n_steps
    dt = grid[1 : N + 1] - grid[:N]
    return traj.sampler.g_at(grid[:N]) * torch.sqrt(dt)


def trajectory_log_probs(traj: SdeTrajectory, model) -> torch.Tensor:
    """Per-step transition log-densities (B, N) of the recorded states."""
    std = step_stds(traj)
    if torch.any(std <= 0):
        raise ValueError("a deterministic step (g = 0) has no density")
    mean = step_means(traj, model)
    return gaussian_log_prob(traj.states[:, 1:], mean, std.expand(mean.shape[:2]))


def step_log_prob(x_i, x_next, t_i, dt, cond, model, sampler: SamplerConfig) -> torch.Tensor:
    """log N(x_next; x_i + f dt, g(t_i)^2 dt I), summed over coordinates."""
    g = float(sampler.g_at(float(t_i)))
    if g <= 0:
        raise ValueError("a deterministic step (g = 0) has no density")
    x_i = torch.as_tensor(x_i)[None] if torch.as_tensor(x_i).ndim == 2 else torch.as_tensor(x_i)
    x_next = torch.as_tensor(x_next).reshape(x_i.shape)
    mean = x_i + drift(x_i, t_i, cond, model, sampler) * dt
    return gaussian_log_prob(x_next, mean, torch.full((x_i.shape[0],), g * math.sqrt(dt)))


# ----------------------------------------------------------------------- decode


def deformation_scale(channel):
    """Softplus map normalised so a zero channel keeps links at unit length."""
    return np.logaddexp(0.0, np.asarray(channel, dtype=np.float64)) / math.log(2.0)


def latent_artifact(x1: np.ndarray, cfg: GenConfig) -> ArtifactSpec:
    d = cfg.d
    s_ch, u_ch = np.abs(x1[:, d]), np.abs(x1[:, d + 1])
    if max(s_ch.max(), u_ch.max()) < ARTIFACT_THRESHOLD:
        return NO_ARTIFACT
    if s_ch.max() >= u_ch.max():
        steps = np.nonzero(s_ch >= ARTIFACT_THRESHOLD)[0]
        mag = float(np.max(np.abs(deformation_scale(x1[steps, d]) - 1.0)))
        return ArtifactSpec(ArtifactKind.DEFORMATION, max(mag, 1e-12), frozenset(steps.tolist()))
    steps = np.nonzero(u_ch >= ARTIFACT_THRESHOLD)[0]
    return ArtifactSpec(ArtifactKind.JOINT_JITTER, float(u_ch.max() * cfg.u_scale), frozenset(steps.tolist()))


def decode_latent(x1, task: TaskSpec, q_current, arm: ArmConfig, cfg: GenConfig, seed: int = 0) -> Episode:
    """Render a generated latent into an Episode.

    Joint channels are offsets from ``q_current``, clamped to the joint bounds;
    the artifact kind is whichever channel dominates (none below threshold),
    and only that kind is rendered, on the steps where it exceeds threshold.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if x1.shape != (cfg.T, cfg.latent_dim):
        raise ValueError(f"latent must have shape {(cfg.T, cfg.latent_dim)}, got {x1.shape}")
    q_current = np.asarray(q_current, dtype=np.float64)
    q = np.clip(q_current + x1[:, : cfg.d], arm.lo, arm.hi)
    spec = latent_artifact(x1, cfg)
    frames = []
    for t in range(cfg.T):
        scale, jitter = 1.0, 0.0
        if spec.affects(t):
            if spec.kind == ArtifactKind.DEFORMATION:
                scale = float(deformation_scale(x1[t, cfg.d]))
            else:
                jitter = abs(float(x1[t, cfg.d + 1])) * cfg.u_scale
        joints = forward_kinematics(q[t], arm, link_scale=scale)
        if jitter > 0:
            joints = _jitter_joints(joints, jitter, seed, t)
        frames.append(rasterize_pose(joints, arm, task.target))
    return Episode(np.stack(frames), q, task, spec, q_current)


# ----------------------------------------------------------------------- train


@dataclass
class GenTrainConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    max_grad_norm: float = 1.0
    offsets: tuple = (0, 4, 8)


def encode_dataset(episodes: Sequence[Episode], cfg: GenConfig, offsets=(0, 4, 8)) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [p for ep in episodes for p in encode_episode(ep, cfg, offsets)]
    if not pairs:
        raise ValueError("no training pairs")
    x1 = torch.from_numpy(np.stack([p[0] for p in pairs]))
    c = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return x1, c


def train_gen(episodes: Sequence[Episode], model: VelocityField, cfg: GenTrainConfig) -> tuple[VelocityField, list[float]]:
    """Flow-matching regression with AdamW; returns the model and per-step losses."""
    if not episodes:
        raise ValueError("cannot train the generator on an empty dataset")
    x1, c = encode_dataset(episodes, model.cfg, cfg.offsets)
    params = list(model.parameters())
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    batch_rng = make_rng(cfg.seed, "gen-batches")
    noise_rng = make_rng(cfg.seed, "gen-noise")
    losses = []
    for step in range(cfg.steps):
        idx = torch.from_numpy(batch_rng.integers(0, len(x1), size=cfg.batch_size))
        loss = fm_loss(x1[idx], c[idx], model, noise_rng)
        grads = clip_grad_norm(torch.autograd.grad(loss, params), cfg.max_grad_norm)
        opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        adamw_step(params, grads, opt)
        losses.append(float(loss.detach()))
        if step % 500 == 0:
            log.info("gen step %d loss %.4f", step, losses[-1])
    return model, losses
