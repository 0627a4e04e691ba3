"""Planar arm embodiment: kinematics, rendering, demonstrations and execution."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import make_rng, save_checkpoint, load_checkpoint


class ArtifactKind(enum.IntEnum):
    NONE = 0
    DEFORMATION = 1
    JOINT_JITTER = 2
    DISCONTINUITY = 3

    @classmethod
    def parse(cls, name) -> "ArtifactKind":
        if isinstance(name, cls):
            return name
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        return cls[str(name).strip().upper().replace("-", "_")]


ARTIFACT_KINDS = (ArtifactKind.DEFORMATION, ArtifactKind.JOINT_JITTER, ArtifactKind.DISCONTINUITY)


@dataclass(frozen=True)
class ArmConfig:
    d: int = 3
    link_lengths: tuple = (1.0, 0.8, 0.6)
    q_min: tuple = (-0.3, -2.6, -2.6)
    q_max: tuple = (math.pi + 0.3, 2.6, 2.6)
    v_max: tuple = (1.5, 1.5, 1.5)
    a_max: tuple = (8.0, 8.0, 8.0)
    dt: float = 0.1
    frame_size: tuple = (48, 48)
    episode_len: int = 16
    success_radius: float = 0.15
    # rendering
    base_px: tuple = (23.5, 33.0)  # (col, row) of the base joint
    reach_px: float = 21.5
    line_width: float = 2.0
    link_intensity: tuple = (0.35, 0.35, 0.35)
    ee_radius: float = 1.6
    joint_radius: float = 1.6
    joint_intensity: tuple = (0.6, 0.8)  # elbow, wrist; the end-effector disc is 1.0
    target_intensity: float = 0.35

    def __post_init__(self):
        for name in ("link_lengths", "q_min", "q_max", "v_max", "a_max", "link_intensity", "joint_intensity"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        object.__setattr__(self, "frame_size", tuple(int(x) for x in self.frame_size))
        self.validate()

    def validate(self) -> None:
        d = self.d
        if d < 1:
            raise ValueError("d must be positive")
        for name in ("link_lengths", "q_min", "q_max", "v_max", "a_max", "link_intensity"):
            if len(getattr(self, name)) != d:
                raise ValueError(f"{name} must have {d} entries")
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if any(lo >= hi for lo, hi in zip(self.q_min, self.q_max)):
            raise ValueError("q_min must be below q_max for every joint")
        if any(v <= 0 for v in self.v_max) or any(a <= 0 for a in self.a_max):
            raise ValueError("velocity and acceleration limits must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.joint_intensity and len(self.joint_intensity) < d - 1:
            raise ValueError(f"joint_intensity needs {d - 1} entries")
        if min(self.frame_size) < 1:
            raise ValueError("frame_size must be at least 1x1")
        if self.episode_len < 1:
            raise ValueError("episode_len must be positive")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def px_per_unit(self) -> float:
        return self.reach_px / self.reach

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.q_min)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.q_max)


@dataclass(frozen=True)
class ArtifactSpec:
    kind: ArtifactKind = ArtifactKind.NONE
    magnitude: float = 0.0
    affected_steps: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "kind", ArtifactKind.parse(self.kind))
        object.__setattr__(self, "affected_steps", frozenset(int(s) for s in self.affected_steps))
        if self.magnitude < 0 or not math.isfinite(self.magnitude):
            raise ValueError("artifact magnitude must be finite and non-negative")
        if (self.magnitude == 0) != (self.kind == ArtifactKind.NONE):
            raise ValueError("magnitude must be zero exactly when kind is none")

    def affects(self, step: int) -> bool:
        return self.kind != ArtifactKind.NONE and step in self.affected_steps


NO_ARTIFACT = ArtifactSpec()


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    target: tuple
    success_radius: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "target", (float(self.target[0]), float(self.target[1])))
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")

    def check_reachable(self, config: ArmConfig) -> None:
        if math.hypot(*self.target) > config.reach + 1e-12:
            raise ValueError(f"target {self.target} is outside the arm's reach {config.reach}")


@dataclass
class Episode:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    actions: np.ndarray  # (T, d)
    task: TaskSpec
    artifact: ArtifactSpec = NO_ARTIFACT
    q_start: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.q_start is None:
            self.q_start = self.actions[0].copy()
        if self.frames.ndim != 3 or self.actions.ndim != 2:
            raise ValueError("frames must be (T,H,W) and actions (T,d)")
        if len(self.frames) != len(self.actions):
            raise ValueError("frame count must equal action count")

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass
class ExecutionReport:
    executed_steps: int
    halted: bool
    halt_reason: str | None
    success: bool
    final_state: np.ndarray
    halt_step: int | None = None
    trajectory: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "executed_steps": self.executed_steps,
            "halted": self.halted,
            "halt_reason": self.halt_reason,
            "halt_step": self.halt_step,
            "success": self.success,
            "final_state": [float(x) for x in self.final_state],
        }


# ------------------------------------------------------------------ kinematics


def forward_kinematics(q: Sequence[float], config: ArmConfig, link_scale=1.0) -> np.ndarray:
    """Joint positions (d, 2) of the chain; angles accumulate from the base."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (config.d,):
        raise ValueError(f"expected {config.d} joint angles, got shape {q.shape}")
    ang = np.cumsum(q)
    lengths = np.asarray(config.link_lengths) * link_scale
    steps = np.stack([lengths * np.cos(ang), lengths * np.sin(ang)], axis=1)
    return np.cumsum(steps, axis=0)


def end_effector(q, config: ArmConfig) -> np.ndarray:
    return forward_kinematics(q, config)[-1]


def inverse_kinematics(target, config: ArmConfig, q_ref, rng: np.random.Generator, tries: int = 64) -> np.ndarray:
    """Planar IK for a target: the first two joints place the wrist, the distal
    joints set the end-link orientation (sampled ``tries`` times). Among all
    valid solutions, both elbow branches included, the one closest to ``q_ref``
    in L2 is returned."""
    if config.d < 2:
        raise ValueError("IK needs at least two joints")
    target = np.asarray(target, dtype=np.float64)
    l1, l2 = config.link_lengths[:2]
    rest = config.link_lengths[2:]
    lo, hi = config.lo, config.hi
    margin = 0.15
    q_ref = np.asarray(q_ref, dtype=np.float64)
    cands = []
    for i in range(tries + 1):
        if i == 0:
            # keep the reference's own distal orientation, so a reference that
            # already reaches the target is returned unchanged
            extra, phi = q_ref[2:].copy(), float(q_ref.sum())
        else:
            extra = rng.uniform(lo[2:] + margin, hi[2:] - margin) if rest else np.zeros(0)
            phi = rng.uniform(-math.pi, math.pi)
        # place the distal links (joints 3..d) along absolute angles derived from phi
        offset, ang = np.zeros(2), phi
        tail_angles = [phi]
        for k in range(len(rest) - 1, -1, -1):
            offset += rest[k] * np.array([math.cos(ang), math.sin(ang)])
            if k > 0:
                ang = ang - extra[k]
                tail_angles.append(ang)
        wrist = target - offset
        r2 = float(wrist @ wrist)
        c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        if abs(c2) > 1:
            continue
        for sign in (1.0, -1.0):
            q2 = sign * math.acos(c2)
            q1 = math.atan2(wrist[1], wrist[0]) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
            q1 = _wrap_into(q1, lo[0], hi[0])
            if q1 is None:
                continue
            q = np.empty(config.d)
            q[0], q[1] = q1, q2
            if rest:
                # absolute angle of link 3 is tail_angles[-1]; remaining extras are fixed
                first_tail = tail_angles[-1]
                q[2] = _wrap_pi(first_tail - q1 - q2)
                q[3:] = extra[1:]
            if np.all(q >= lo + margin) and np.all(q <= hi - margin):
                cands.append(q)
    if cands:
        return min(cands, key=lambda c: float(np.sum((c - q_ref) ** 2)))
    raise RuntimeError(f"inverse kinematics failed for target {tuple(target)}")


def _wrap_pi(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def _wrap_into(a: float, lo: float, hi: float):
    for k in (-1, 0, 1):
        b = a + 2 * math.pi * k
        if lo <= b <= hi:
            return b
    return None


# ------------------------------------------------------------------- rendering


def _to_px(points: np.ndarray, config: ArmConfig) -> np.ndarray:
    s = config.px_per_unit
    col = config.base_px[0] + points[..., 0] * s
    row = config.base_px[1] - points[..., 1] * s
    return np.stack([col, row], axis=-1)


def _segment_coverage(grid, p, q, width):
    d = q - p
    L2 = float(d @ d)
    rel = grid - p
    if L2 < 1e-12:
        dist = np.sqrt((rel**2).sum(-1))
    else:
        t = np.clip((rel @ d) / L2, 0.0, 1.0)
        dist = np.sqrt(((rel - t[..., None] * d) ** 2).sum(-1))
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _grid(config: ArmConfig):
    H, W = config.frame_size
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([cols, rows], axis=-1)


def rasterize_pose(joints: np.ndarray, config: ArmConfig, target=None) -> np.ndarray:
    """Anti-aliased frame of a chain given world-space joint positions (d, 2)."""
    H, W = config.frame_size
    if H < 1 or W < 1:
        raise ValueError("empty render region")
    grid = _grid(config)
    img = np.zeros((H, W))
    if target is not None:
        tp = _to_px(np.asarray(target, dtype=np.float64), config)
        dist = np.sqrt(((grid - tp) ** 2).sum(-1))
        img = np.maximum(img, config.target_intensity * np.clip(1.5 + 0.5 - dist, 0, 1))
    pts = _to_px(np.vstack([np.zeros((1, 2)), joints]), config)
    for i in range(len(joints)):
        cov = _segment_coverage(grid, pts[i], pts[i + 1], config.line_width)
        img = np.maximum(img, config.link_intensity[i] * cov)
    if config.joint_radius > 0:
        for i in range(1, len(joints)):
            dist = np.sqrt(((grid - pts[i]) ** 2).sum(-1))
            level = config.joint_intensity[i - 1] if config.joint_intensity else config.link_intensity[i]
            img = np.maximum(img, level * np.clip(config.joint_radius + 0.5 - dist, 0, 1))
    dist = np.sqrt(((grid - pts[-1]) ** 2).sum(-1))
    img = np.maximum(img, np.clip(config.ee_radius + 0.5 - dist, 0, 1))
    # stored frames are float32-exact so they survive the dataset container
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _jitter_joints(joints: np.ndarray, std: float, seed: int, step: int) -> np.ndarray:
    rng = make_rng(seed, "jitter", step)
    return joints + rng.normal(0.0, std, size=joints.shape)


def render_frame(
    q,
    config: ArmConfig,
    artifact: ArtifactSpec = NO_ARTIFACT,
    step: int = 0,
    seed: int = 0,
    target=None,
) -> np.ndarray:
    """Render one frame of pose ``q``.

    Deformation stretches every link by ``1 + magnitude``; joint jitter moves
    each rendered joint by Gaussian noise (std in length units, seeded by
    ``(seed, step)``). A discontinuity is realised by the caller, which renders
    an earlier pose in place of ``q`` (see :func:`render_episode`).
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("pose must be finite")
    scale, jitter = 1.0, 0.0
    if artifact.affects(step):
        if artifact.kind == ArtifactKind.DEFORMATION:
            scale = 1.0 + artifact.magnitude
        elif artifact.kind == ArtifactKind.JOINT_JITTER:
            jitter = artifact.magnitude
    return render_pose(q, config, target=target, link_scale=scale, jitter_std=jitter, seed=seed, step=step)


def render_pose(q, config, target=None, link_scale=1.0, jitter_std=0.0, seed=0, step=0) -> np.ndarray:
    joints = forward_kinematics(q, config, link_scale=link_scale)
    if jitter_std > 0:
        joints = _jitter_joints(joints, jitter_std, seed, step)
    return rasterize_pose(joints, config, target)


def render_episode(actions, task: TaskSpec | None, config: ArmConfig, artifact=NO_ARTIFACT, seed: int = 0) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    target = None if task is None else task.target
    frames = []
    for t, q in enumerate(actions):
        if artifact.kind == ArtifactKind.DISCONTINUITY and artifact.affects(t):
            src = max(0, t - int(round(artifact.magnitude)))
            frames.append(render_frame(actions[src], config, NO_ARTIFACT, t, seed, target))
        else:
            frames.append(render_frame(q, config, artifact, t, seed, target))
    return np.stack(frames)


def brightness_centroid(frame: np.ndarray) -> np.ndarray:
    """(col, row) intensity-weighted centroid."""
    H, W = frame.shape
    rows, cols = np.mgrid[0:H, 0:W]
    w = frame.sum()
    return np.array([(frame * cols).sum() / w, (frame * rows).sum() / w])


# --------------------------------------------------------------- demonstrations


def min_jerk_profile(tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return 10 * tau**3 - 15 * tau**4 + 6 * tau**5


def min_jerk_path(start, goal, T: int) -> np.ndarray:
    start, goal = np.asarray(start, dtype=np.float64), np.asarray(goal, dtype=np.float64)
    if T == 1:
        return goal[None].copy()
    s = np.array([min_jerk_profile(i / (T - 1)) for i in range(T)])
    return start + s[:, None] * (goal - start)


def sample_start(goal, config: ArmConfig, rng: np.random.Generator, max_offset: float = 1.0) -> np.ndarray:
    margin = 0.1
    off = rng.uniform(-max_offset, max_offset, size=config.d)
    return np.clip(goal + off, config.lo + margin, config.hi - margin)


def sample_start_for_task(task: TaskSpec, config: ArmConfig, rng: np.random.Generator) -> np.ndarray:
    """A start pose within reach of a limit-respecting min-jerk reach to ``task``."""
    ref = inverse_kinematics(task.target, config, _random_pose(config, rng), rng)
    return sample_start(ref, config, rng)


def _random_pose(config: ArmConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(config.lo + 0.3, config.hi - 0.3)


def generate_expert_episode(task: TaskSpec, config: ArmConfig, seed: int, q_start=None, T: int | None = None) -> Episode:
    task.check_reachable(config)
    rng = make_rng(seed, "expert", task.task_id)
    if q_start is None:
        q_start = sample_start_for_task(task, config, rng)
    q_start = np.asarray(q_start, dtype=np.float64)
    goal = inverse_kinematics(task.target, config, q_start, rng)
    T = T or config.episode_len
    while True:
        actions = min_jerk_path(q_start, goal, T)
        if limit_violation(actions, config, q_start) is None:
            break
        T += 4
    frames = render_episode(actions, task, config)
    return Episode(frames, actions, task, NO_ARTIFACT, q_start)


def sample_tasks(n_tasks: int, config: ArmConfig, seed: int) -> list[TaskSpec]:
    rng = make_rng(seed, "tasks")
    tasks = []
    R = config.reach
    for i in range(n_tasks):
        # uniform over the area of an upper-half annulus
        r = math.sqrt(rng.uniform((0.35 * R) ** 2, (0.85 * R) ** 2))
        a = rng.uniform(0.15 * math.pi, 0.85 * math.pi)
        tasks.append(TaskSpec(i, (r * math.cos(a), r * math.sin(a)), config.success_radius))
    return tasks


def generate_dataset(n_tasks: int, episodes_per_task: int, config: ArmConfig, seed: int, path=None) -> list[Episode]:
    if n_tasks < 1 or episodes_per_task < 1:
        raise ValueError("counts must be positive")
    tasks = sample_tasks(n_tasks, config, seed)
    episodes = []
    for task in tasks:
        for j in range(episodes_per_task):
            episodes.append(generate_expert_episode(task, config, seed=seed * 100003 + task.task_id * 1009 + j))
    if path is not None:
        save_dataset(path, episodes)
    return episodes


# -------------------------------------------------------------------- artifacts


def inject_artifacts(episode: Episode, spec: ArtifactSpec, config: ArmConfig, seed: int = 0) -> Episode:
    if spec.kind == ArtifactKind.NONE:
        raise ValueError("inject_artifacts needs an artifact kind other than none")
    T = episode.T
    if any(s < 0 or s >= T for s in spec.affected_steps):
        raise ValueError(f"affected steps out of range for episode of length {T}")
    frames = episode.frames.copy()
    target = episode.task.target
    for t in sorted(spec.affected_steps):
        if spec.kind == ArtifactKind.DISCONTINUITY:
            src = max(0, t - int(round(spec.magnitude)))
            frames[t] = render_frame(episode.actions[src], config, NO_ARTIFACT, t, seed, target)
        else:
            frames[t] = render_frame(episode.actions[t], config, spec, t, seed, target)
    return replace(episode, frames=frames, artifact=spec)


# ------------------------------------------------------------------- execution


def limit_violation(actions, config: ArmConfig, q_start=None, v_start=None):
    """First (step, reason) at which the command sequence breaks a limit, else None.

    The arm starts at ``q_start`` (default: the first command) moving with
    ``v_start`` (default: at rest).
    """
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) == 0:
        return None
    prev = np.asarray(actions[0] if q_start is None else q_start, dtype=np.float64)
    prev_v = np.zeros(config.d) if v_start is None else np.asarray(v_start, dtype=np.float64)
    vmax, amax = np.asarray(config.v_max), np.asarray(config.a_max)
    tol = 1e-9
    for t, a in enumerate(actions):
        if np.any(a < config.lo - tol) or np.any(a > config.hi + tol):
            return t, "joint_bound"
        v = (a - prev) / config.dt
        if np.any(np.abs(v) > vmax + tol):
            return t, "velocity_limit"
        if np.any(np.abs(v - prev_v) / config.dt > amax + tol):
            return t, "acceleration_limit"
        prev, prev_v = a, v
    return None


def execute_actions(actions, task: TaskSpec, config: ArmConfig, q_start=None, v_start=None) -> ExecutionReport:
    """Step through position commands from ``q_start`` (default: the first
    command), at rest unless ``v_start`` is given, halting at the first limit
    violation."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, config.d) if len(actions) else np.zeros((0, config.d))
    if len(actions) == 0:
        start = np.asarray(q_start if q_start is not None else np.zeros(config.d), dtype=np.float64)
        return ExecutionReport(0, False, None, False, start, trajectory=start[None])
    if q_start is None:
        q_start = actions[0]
    q_start = np.asarray(q_start, dtype=np.float64)
    hit = limit_violation(actions, config, q_start, v_start)
    n = len(actions) if hit is None else hit[0]
    traj = np.vstack([q_start[None], actions[:n]])
    final = traj[-1].copy()
    if hit is not None:
        return ExecutionReport(n, True, hit[1], False, final, halt_step=hit[0], trajectory=traj)
    ok = float(np.linalg.norm(end_effector(final, config) - np.asarray(task.target))) <= task.success_radius
    return ExecutionReport(n, False, None, bool(ok), final, trajectory=traj)


# ------------------------------------------------------------------ persistence


def episode_records(i: int, ep: Episode) -> dict:
    return {
        f"ep{i}/frames": ep.frames.astype(np.float32),
        f"ep{i}/actions": ep.actions,
        f"ep{i}/task": np.array([ep.task.task_id, ep.task.target[0], ep.task.target[1], ep.task.success_radius]),
        f"ep{i}/artifact": np.array([int(ep.artifact.kind), ep.artifact.magnitude]),
        f"ep{i}/affected": np.array(sorted(ep.artifact.affected_steps), dtype=np.int64),
        f"ep{i}/q_start": ep.q_start,
    }


def save_dataset(path, episodes: Sequence[Episode]) -> None:
    records = {}
    for i, ep in enumerate(episodes):
        records.update(episode_records(i, ep))
    save_checkpoint(path, records)


def load_dataset(path) -> list[Episode]:
    rec = load_checkpoint(path)
    episodes, i = [], 0
    while f"ep{i}/frames" in rec:
        task = rec[f"ep{i}/task"]
        art = rec[f"ep{i}/artifact"]
        affected = rec.get(f"ep{i}/affected", np.zeros(0, dtype=np.int64))
        episodes.append(
            Episode(
                rec[f"ep{i}/frames"].astype(np.float64),
                rec[f"ep{i}/actions"],
                TaskSpec(int(task[0]), (task[1], task[2]), float(task[3])),
                ArtifactSpec(ArtifactKind(int(art[0])), float(art[1]), frozenset(affected.tolist())),
                rec.get(f"ep{i}/q_start"),
            )
        )
        i += 1
    return episodes


def export_actions_csv(path, episodes: Sequence[Episode]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = episodes[0].actions.shape[1] if episodes else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "task_id", "step"] + [f"q{j + 1}" for j in range(d)])
        for i, ep in enumerate(episodes):
            for t, a in enumerate(ep.actions):
                w.writerow([i, ep.task.task_id, t] + [repr(float(x)) for x in a])
