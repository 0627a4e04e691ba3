"""GRPO post-training of the flow generator against the executability reward."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .env import ArmConfig, Episode, TaskSpec, execute_actions, sample_start_for_task
from .flow import (
    SamplerConfig,
    SdeTrajectory,
    VelocityField,
    condition_for,
    decode_latent,
    sample_ode,
    sample_sde,
    step_means,
    step_stds,
    trajectory_log_probs,
)
from .idm import InverseDynamicsModel
from .numeric import OptimizerState, adamw_step, clip_grad_norm, global_norm, make_rng
from .reward import PenaltyWeights, RewardConfig, VideoScore, score_many

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 20.0


@dataclass
class GrpoConfig:
    G: int = 8
    eps_clip: float = 0.001
    adv_clip: float = 5.0
    beta_kl: float = 0.004
    inner_epochs: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    max_grad_norm: float = 1.0
    eps_std: float = 1e-8
    prompts_per_iter: int = 8
    groups_per_minibatch: int = 2
    total_iters: int = 30
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size must be at least 2")
        for name in ("eps_clip", "adv_clip", "inner_epochs", "lr", "max_grad_norm", "eps_std", "prompts_per_iter", "groups_per_minibatch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")


def compute_advantages(rewards, eps_std: float = 1e-8, adv_clip: float = 5.0) -> np.ndarray:
    """(R - mean) / (std + eps) with the population std, clipped to ±adv_clip."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least two rewards")
    adv = (r - r.mean()) / (r.std() + eps_std)
    return np.clip(adv, -adv_clip, adv_clip)


@dataclass
class RolloutGroup:
    """G sibling rollouts of one prompt, stored as a slice of a batched trajectory."""

    task: TaskSpec
    q_start: np.ndarray
    traj: SdeTrajectory
    rewards: np.ndarray
    advantages: np.ndarray
    old_log_probs: torch.Tensor | None  # (G, N)
    scores: list = field(default_factory=list, repr=False)
    episodes: list = field(default_factory=list, repr=False)


def step_ratio(traj: SdeTrajectory, model, old_log_probs: torch.Tensor | None) -> torch.Tensor:
    """Per-step density ratios pi_theta / pi_old (G, N); differentiable in ``model``."""
    if old_log_probs is None:
        raise ValueError("rollouts carry no stored old log-probabilities")
    logp = trajectory_log_probs(traj, model)
    diff = torch.clamp(logp - old_log_probs, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    return torch.exp(diff)


def kl_reference(traj: SdeTrajectory, model, ref_model) -> torch.Tensor:
    """Sum over steps of ||mu_theta - mu_ref||^2 / (2 sigma^2), averaged over rollouts."""
    mu = step_means(traj, model)
    with torch.no_grad():
        mu_ref = step_means(traj, ref_model)
    var = step_stds(traj) ** 2
    per_step = ((mu - mu_ref) ** 2).flatten(2).sum(-1) / (2 * var)
    return per_step.sum(-1).mean()


def clipped_objective(ratio: torch.Tensor, adv: torch.Tensor, eps_clip: float) -> torch.Tensor:
    adv = adv.reshape(-1, *([1] * (ratio.ndim - 1)))
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps_clip, 1 + eps_clip) * adv)


def grpo_surrogate(groups: Sequence[RolloutGroup], model, ref_model, cfg: GrpoConfig) -> tuple[torch.Tensor, dict]:
    """Loss to minimise: minus the clipped per-step objective (mean over rollouts
    and steps, averaged over groups) plus beta times the reference KL."""
    objs, kls = [], []
    for g in groups:
        ratio = step_ratio(g.traj, model, g.old_log_probs)
        adv = torch.as_tensor(g.advantages, dtype=torch.float64)
        objs.append(clipped_objective(ratio, adv, cfg.eps_clip).mean())
        kls.append(kl_reference(g.traj, model, ref_model) if cfg.beta_kl > 0 else torch.zeros(()))
    obj = torch.stack(objs).mean()
    kl = torch.stack(kls).mean()
    loss = -obj + cfg.beta_kl * kl
    return loss, {"objective": float(obj.detach()), "kl": float(kl.detach())}


# ------------------------------------------------------------------ iteration


def param_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


@dataclass
class AlignState:
    model: VelocityField
    ref_model: VelocityField
    opt: OptimizerState
    iteration: int = 0
    reward_ema: float | None = None
    ref_digest: str = ""

    @classmethod
    def start(cls, model: VelocityField, cfg: GrpoConfig) -> "AlignState":
        ref = model.clone()
        for p in ref.parameters():
            p.requires_grad_(False)
        opt = OptimizerState.for_params(list(model.parameters()), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
        return cls(model, ref, opt, ref_digest=param_digest(ref))


@dataclass
class RewardContext:
    idm: InverseDynamicsModel
    weights: PenaltyWeights
    rcfg: RewardConfig
    arm: ArmConfig


def sample_prompts(tasks: Sequence[TaskSpec], n: int, arm: ArmConfig, seed: int, stream) -> list[tuple[TaskSpec, np.ndarray]]:
    rng = make_rng(seed, "prompts", stream)
    picks = rng.choice(len(tasks), size=n, replace=n > len(tasks))
    return [(tasks[int(i)], sample_start_for_task(tasks[int(i)], arm, make_rng(seed, "prompt-start", stream, j))) for j, i in enumerate(picks)]


def collect_groups(state: AlignState, prompts, ctx: RewardContext, cfg: GrpoConfig, sampler: SamplerConfig, seed: int, stream) -> list[RolloutGroup]:
    """Sample G SDE rollouts per prompt under the current policy and score them."""
    model = state.model
    conds = [condition_for(task, q0, model.cfg) for task, q0 in prompts for _ in range(cfg.G)]
    traj = sample_sde(conds, model, sampler, seed=seed, stream=("align", stream))
    with torch.no_grad():
        old = trajectory_log_probs(traj, model)
    episodes = []
    for b in range(len(conds)):
        task, q0 = prompts[b // cfg.G]
        episodes.append(decode_latent(traj.final(b), task, q0, ctx.arm, model.cfg, seed=seed))
    scores = score_many(episodes, ctx.idm, ctx.weights, ctx.rcfg, ctx.arm)
    groups = []
    for p, (task, q0) in enumerate(prompts):
        sl = slice(p * cfg.G, (p + 1) * cfg.G)
        rewards = np.array([s.R for s in scores[sl]])
        groups.append(
            RolloutGroup(
                task, q0, traj.subset(range(sl.start, sl.stop)), rewards,
                compute_advantages(rewards, cfg.eps_std, cfg.adv_clip), old[sl], scores[sl], episodes[sl],
            )
        )
    return groups


def align_iteration(state: AlignState, tasks, ctx: RewardContext, cfg: GrpoConfig, sampler: SamplerConfig, seed: int, monitor=None) -> dict:
    """One on-policy GRPO iteration: sample and score groups, then ``inner_epochs``
    passes of clipped-surrogate minimisation over minibatches of groups."""
    it = state.iteration
    prompts = sample_prompts(tasks, cfg.prompts_per_iter, ctx.arm, seed, it)
    groups = collect_groups(state, prompts, ctx, cfg, sampler, seed, it)
    params = list(state.model.parameters())
    order_rng = make_rng(seed, "minibatch", it)
    stats = []
    for _ in range(cfg.inner_epochs):
        order = order_rng.permutation(len(groups))
        for s in range(0, len(groups), cfg.groups_per_minibatch):
            mb = [groups[i] for i in order[s : s + cfg.groups_per_minibatch]]
            loss, info = grpo_surrogate(mb, state.model, state.ref_model, cfg)
            grads = torch.autograd.grad(loss, params)
            info["grad_norm"] = global_norm(grads)
            adamw_step(params, clip_grad_norm(grads, cfg.max_grad_norm), state.opt)
            stats.append(info)
    all_scores = [s for g in groups for s in g.scores]
    rewards = np.array([s.R for s in all_scores])
    mean_r = float(rewards.mean())
    state.reward_ema = mean_r if state.reward_ema is None else cfg.ema_decay * state.reward_ema + (1 - cfg.ema_decay) * mean_r
    metrics = {
        "iter": it,
        "reward_mean": mean_r,
        "reward_ema": float(state.reward_ema),
        "kl": float(np.mean([s["kl"] for s in stats])),
        "violation_rate": float(np.mean([s.halted_would_be for s in all_scores])),
        "artifact_rate": float(np.mean([ep.artifact.kind != 0 for g in groups for ep in g.episodes])),
        "grad_norm": float(np.mean([s["grad_norm"] for s in stats])),
    }
    if monitor is not None:
        samples = [(ep, s.R, s.actions) for g in groups for ep, s in zip(g.episodes, g.scores)]
        metrics["flags"] = monitor.update(samples, ctx.arm)
    state.iteration += 1
    if param_digest(state.ref_model) != state.ref_digest:
        raise RuntimeError("reference policy was modified during alignment")
    return metrics


# ------------------------------------------------------------------- monitor


@dataclass
class MonitorThresholds:
    static_disp: float = 0.01  # rad per step
    high_reward: float = 0.9
    regression: float = 0.2
    patience: int = 5


class HackingMonitor:
    """Flags static high-reward rollouts and drops in execution success.

    ``halt`` becomes true once some flag has been raised in ``patience``
    consecutive iterations.
    """

    def __init__(self, thresholds: MonitorThresholds | None = None):
        self.th = thresholds or MonitorThresholds()
        self.best_success = None
        self.streak = 0
        self.halt = False

    def sample_flags(self, episode: Episode, R: float, actions=None) -> list[str]:
        acts = episode.actions if actions is None else np.asarray(actions)
        disp = float(np.mean(np.linalg.norm(np.diff(acts, axis=0), axis=-1))) if len(acts) > 1 else 0.0
        return ["static"] if disp < self.th.static_disp and R > self.th.high_reward else []

    def update(self, samples, arm: ArmConfig) -> str:
        if not samples:
            raise ValueError("monitor needs at least one sample")
        flags = set()
        successes = []
        for sample in samples:
            ep, R = sample[0], sample[1]
            acts = sample[2] if len(sample) > 2 else None
            flags.update(self.sample_flags(ep, R, acts))
            a = ep.actions if acts is None else acts
            successes.append(execute_actions(a, ep.task, arm, ep.q_start).success)
        rate = float(np.mean(successes))
        if self.best_success is not None and rate < self.best_success * (1 - self.th.regression):
            flags.add("goal_regression")
        self.best_success = rate if self.best_success is None else max(self.best_success, rate)
        return self.record(sorted(flags))

    def record(self, flags: Sequence[str]) -> str:
        self.streak = self.streak + 1 if flags else 0
        if self.streak >= self.th.patience:
            self.halt = True
        return "|".join(flags)


# ---------------------------------------------------------- rejection sampling


def rejection_sampling_baseline(task: TaskSpec, q_start, model: VelocityField, K: int, ctx: RewardContext, seed: int, n_steps: int = 32, stream="reject", history=None):
    """Draw K ODE rollouts, score all, return the best-scoring episode and stats."""
    if K < 1:
        raise ValueError("K must be at least 1")
    t0 = time.perf_counter()
    conds = [condition_for(task, q_start, model.cfg, history)] * K
    x1 = sample_ode(conds, model, n_steps, seed=seed, stream=stream)
    episodes = [decode_latent(x1[i].numpy(), task, q_start, ctx.arm, model.cfg, seed=seed) for i in range(K)]
    scores = score_many(episodes, ctx.idm, ctx.weights, ctx.rcfg, ctx.arm)
    Rs = np.array([s.R for s in scores])
    best = int(np.argmax(Rs))
    stats = {"K": K, "mean_R": float(Rs.mean()), "max_R": float(Rs.max()), "wall_clock": time.perf_counter() - t0}
    return episodes[best], scores[best], stats
