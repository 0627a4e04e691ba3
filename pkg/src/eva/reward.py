"""Executability reward: decoded joint commands -> kinematic penalties -> bounded score."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .env import ArmConfig, Episode, limit_violation
from .idm import InverseDynamicsModel, decode_actions, decode_many

log = logging.getLogger(__name__)

P0_FLOOR = 1e-6


@dataclass
class ActionSequence:
    a: np.ndarray  # (T, d) rad
    dt: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim == 1:
            self.a = self.a[:, None]
        if len(self.a) < 1:
            raise ValueError("an action sequence needs at least one step")
        if not np.all(np.isfinite(self.a)):
            raise ValueError("action sequence has non-finite entries")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class KinematicProfile:
    v: np.ndarray  # (T-1, d)
    alpha: np.ndarray  # (T-2, d)
    jerk: np.ndarray  # (T-3, d)


@dataclass
class PenaltyWeights:
    lambda_j: float = 0.1
    lambda_alpha: float = 0.1
    lambda_vlim: float = 1.0
    lambda_alim: float = 1.0
    delta_alpha: float = 4.0  # mean(a_max) / 2 for the default arm
    delta_j: float = 50.0

    def __post_init__(self):
        lams = (self.lambda_j, self.lambda_alpha, self.lambda_vlim, self.lambda_alim)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError("penalty weights must be non-negative with at least one positive")
        if self.delta_alpha <= 0 or self.delta_j <= 0:
            raise ValueError("Huber thresholds must be positive")

    @classmethod
    def for_arm(cls, config: ArmConfig, **kw) -> "PenaltyWeights":
        kw.setdefault("delta_alpha", float(np.mean(config.a_max)) / 2)
        return cls(**kw)


@dataclass
class RewardConfig:
    P0: float = 1.0
    gamma: float = 1.0
    v_max: tuple = (1.5, 1.5, 1.5)
    a_max: tuple = (8.0, 8.0, 8.0)

    def __post_init__(self):
        if not self.P0 >= P0_FLOOR:
            raise ValueError(f"P0 must be at least {P0_FLOOR}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def for_arm(cls, config: ArmConfig, **kw) -> "RewardConfig":
        return cls(v_max=config.v_max, a_max=config.a_max, **kw)


def finite_differences(seq: ActionSequence) -> KinematicProfile:
    v = np.diff(seq.a, axis=0) / seq.dt
    alpha = np.diff(v, axis=0) / seq.dt
    jerk = np.diff(alpha, axis=0) / seq.dt
    return KinematicProfile(v, alpha, jerk)


def huber(x, delta: float):
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _mean_or_zero(x: np.ndarray) -> float:
    return float(np.mean(x)) if x.size else 0.0


def smoothness_penalties(profile: KinematicProfile, weights: PenaltyWeights) -> tuple[float, float]:
    """(P_alpha, P_j): Huber penalties averaged over timesteps and joints."""
    p_alpha = _mean_or_zero(huber(profile.alpha, weights.delta_alpha)) if profile.alpha.size else 0.0
    p_j = _mean_or_zero(huber(profile.jerk, weights.delta_j)) if profile.jerk.size else 0.0
    return p_alpha, p_j


def _exceedance(x: np.ndarray, limit) -> float:
    if x.size == 0:
        return 0.0
    over = np.maximum(np.abs(x) - np.asarray(limit, dtype=np.float64), 0.0)
    return float(np.mean((over**2).sum(-1)))


def limit_penalties(profile: KinematicProfile, v_max, a_max) -> tuple[float, float]:
    """(P_vel, P_acc): squared L2 norm of per-step limit exceedance, averaged over time."""
    if np.any(np.asarray(v_max) <= 0) or np.any(np.asarray(a_max) <= 0):
        raise ValueError("limits must be positive")
    return _exceedance(profile.v, v_max), _exceedance(profile.alpha, a_max)


@dataclass
class PenaltyBreakdown:
    P: float
    P_j: float
    P_alpha: float
    P_vel: float
    P_acc: float


def combine_penalties(p_j, p_alpha, p_vel, p_acc, weights: PenaltyWeights) -> float:
    return weights.lambda_j * p_j + weights.lambda_alpha * p_alpha + weights.lambda_vlim * p_vel + weights.lambda_alim * p_acc


def penalty_breakdown(seq: ActionSequence, weights: PenaltyWeights, v_max, a_max) -> PenaltyBreakdown:
    prof = finite_differences(seq)
    p_alpha, p_j = smoothness_penalties(prof, weights)
    p_vel, p_acc = limit_penalties(prof, v_max, a_max)
    return PenaltyBreakdown(combine_penalties(p_j, p_alpha, p_vel, p_acc, weights), p_j, p_alpha, p_vel, p_acc)


def total_penalty(seq: ActionSequence, weights: PenaltyWeights, v_max, a_max) -> float:
    return penalty_breakdown(seq, weights, v_max, a_max).P


def reward_map(P: float, config: RewardConfig) -> float:
    """Bounded reward (1 + P/P0)^-gamma in (0, 1]."""
    if P < 0:
        raise ValueError("penalty must be non-negative")
    return float((1.0 + P / config.P0) ** (-config.gamma))


def p0_from_penalties(penalties: Sequence[float]) -> float:
    """Median penalty, floored; all-zero penalties warn and return the floor."""
    penalties = np.asarray(penalties, dtype=np.float64)
    if penalties.size == 0:
        raise ValueError("no penalties to calibrate from")
    if np.all(penalties == 0):
        warnings.warn("all calibration penalties are zero; using the P0 floor", RuntimeWarning, stacklevel=2)
        return P0_FLOOR
    return max(float(np.median(penalties)), P0_FLOOR)


@dataclass
class VideoScore:
    R: float
    P: float
    P_j: float
    P_alpha: float
    P_vel: float
    P_acc: float
    halted_would_be: bool
    actions: np.ndarray

    def record(self) -> dict:
        d = asdict(self)
        d.pop("actions")
        return d


def _score_actions(actions, q_start, weights, rcfg: RewardConfig, arm: ArmConfig) -> VideoScore:
    b = penalty_breakdown(ActionSequence(actions, arm.dt), weights, rcfg.v_max, rcfg.a_max)
    halted = limit_violation(actions, arm, q_start) is not None
    return VideoScore(reward_map(b.P, rcfg), b.P, b.P_j, b.P_alpha, b.P_vel, b.P_acc, halted, np.asarray(actions))


def score_video(episode: Episode, idm: InverseDynamicsModel, weights: PenaltyWeights, rcfg: RewardConfig, arm: ArmConfig) -> VideoScore:
    """Decode the episode's frames with the frozen IDM and score the implied motion."""
    if len(episode.frames) == 0:
        raise ValueError("episode has no frames")
    actions = decode_actions(episode.frames, idm)
    return _score_actions(actions, episode.q_start, weights, rcfg, arm)


def score_many(episodes: Sequence[Episode], idm, weights, rcfg, arm) -> list[VideoScore]:
    """Batched :func:`score_video` for equal-length episodes."""
    if not episodes:
        return []
    if len({ep.T for ep in episodes}) > 1:
        return [score_video(ep, idm, weights, rcfg, arm) for ep in episodes]
    decoded = decode_many(np.stack([ep.frames for ep in episodes]), idm)
    return [_score_actions(a, ep.q_start, weights, rcfg, arm) for a, ep in zip(decoded, episodes)]


def calibrate_P0(
    gen,
    idm: InverseDynamicsModel,
    weights: PenaltyWeights,
    arm: ArmConfig,
    tasks,
    n_rollouts: int,
    seed: int,
    sampler=None,
) -> tuple[float, np.ndarray]:
    """Median total penalty of SDE rollouts from the pre-alignment generator.

    Returns ``(P0, penalties)``. Rollout ``i`` uses task ``tasks[i % len(tasks)]``.
    """
    from .flow import SamplerConfig, decode_latent, sample_sde, condition_for

    if n_rollouts < 8:
        raise ValueError("P0 calibration needs at least 8 rollouts")
    sampler = sampler or SamplerConfig()
    rcfg = RewardConfig.for_arm(arm)
    conds, starts = [], []
    from .numeric import make_rng
    from .env import sample_start_for_task

    for i in range(n_rollouts):
        task = tasks[i % len(tasks)]
        q0 = sample_start_for_task(task, arm, make_rng(seed, "calib-start", i))
        conds.append(condition_for(task, q0, gen.cfg))
        starts.append((task, q0))
    trajs = sample_sde(conds, gen, sampler, seed=seed, stream="calibrate")
    episodes = [decode_latent(trajs.final(i), task, q0, arm, gen.cfg, seed=seed) for i, (task, q0) in enumerate(starts)]
    scores = score_many(episodes, idm, weights, rcfg, arm)
    penalties = np.array([s.P for s in scores])
    return p0_from_penalties(penalties), penalties
