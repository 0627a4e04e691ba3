"""Pipeline stages behind the ``eva`` command: configuration, artifact paths,
and the data / training / evaluation / study drivers."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
import tomli_w
import torch

from .env import (
    ArmConfig,
    ArtifactKind,
    ArtifactSpec,
    Episode,
    TaskSpec,
    end_effector,
    execute_actions,
    export_actions_csv,
    generate_dataset,
    generate_expert_episode,
    inject_artifacts,
    limit_violation,
    load_dataset,
    render_frame,
    sample_start_for_task,
    save_dataset,
)
from .flow import (
    HISTORY,
    GenConfig,
    GenTrainConfig,
    SamplerConfig,
    VelocityField,
    condition_for,
    decode_latent,
    sample_ode,
    train_gen,
)
from .grpo import AlignState, GrpoConfig, HackingMonitor, MonitorThresholds, RewardContext, align_iteration
from .idm import (
    IdmConfig,
    IdmTrainConfig,
    InverseDynamicsModel,
    decode_actions,
    decode_many,
    evaluate_idm,
    per_dim_accuracy,
    split_episodes,
    train_idm,
)
from .numeric import decode_json, encode_json, load_checkpoint, make_rng, save_checkpoint
from .reward import (
    ActionSequence,
    PenaltyWeights,
    RewardConfig,
    calibrate_P0,
    finite_differences,
    score_many,
)

log = logging.getLogger(__name__)


class MissingArtifact(Exception):
    """A stage needs an artifact that an earlier stage has not produced."""

    def __init__(self, name: str, path):
        super().__init__(f"missing artifact '{name}' (expected at {path}); run the stage that produces it first")
        self.name = name
        self.path = path


# ----------------------------------------------------------------------- config


@dataclass
class Paths:
    workdir: str = "eva_run"
    dataset: str = "data.eva"
    idm: str = "idm.eva"
    gen: str = "gen.eva"
    calib: str = "calib.eva"
    aligned: str = "aligned.eva"
    metrics: str = "metrics"


@dataclass
class DataConfig:
    n_tasks: int = 20
    episodes_per_task: int = 25


@dataclass
class RewardSettings:
    gamma: float = 1.0
    calib_rollouts: int = 64


@dataclass
class EvalConfig:
    n_trials: int = 20
    n_tasks: int = 5
    segment: int = 8
    max_segments: int = 4
    K: int = 8
    replay_trials: int = 20


@dataclass
class StudyConfig:
    n_per_arm: int = 30
    artifact_steps: int = 4
    deformation: float = 0.5
    jitter: float = 0.1  # length units
    discontinuity: float = 3.0
    n_generated: int = 40


_SECTIONS = {
    "paths": Paths,
    "arm": ArmConfig,
    "data": DataConfig,
    "idm": IdmConfig,
    "idm_train": IdmTrainConfig,
    "gen": GenConfig,
    "gen_train": GenTrainConfig,
    "sampler": SamplerConfig,
    "weights": PenaltyWeights,
    "reward": RewardSettings,
    "grpo": GrpoConfig,
    "monitor": MonitorThresholds,
    "eval": EvalConfig,
    "study": StudyConfig,
}
# stage seeds come from the global seed, not from per-section copies
_SEEDLESS = {"idm_train", "gen_train"}


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    arm: ArmConfig = field(default_factory=ArmConfig)
    data: DataConfig = field(default_factory=DataConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    idm_train: IdmTrainConfig = field(default_factory=IdmTrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    gen_train: GenTrainConfig = field(default_factory=GenTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    reward: RewardSettings = field(default_factory=RewardSettings)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    monitor: MonitorThresholds = field(default_factory=MonitorThresholds)
    eval: EvalConfig = field(default_factory=EvalConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    def path(self, name: str) -> Path:
        return Path(self.paths.workdir) / getattr(self.paths, name)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name in _SEEDLESS:
                d.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        unknown = set(raw) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {"seed": int(raw.get("seed", 0))}
        for name, sec_cls in _SECTIONS.items():
            kw[name] = _section(sec_cls, raw.get(name, {}), name)
        return cls(**kw)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(tomli.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_toml(Path(path).read_text())


def _section(sec_cls, values: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(sec_cls)}
    bad = set(values) - set(fields)
    if bad:
        raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
    kw = {}
    for k, v in values.items():
        default = fields[k].default
        kw[k] = tuple(v) if isinstance(v, list) and (isinstance(default, tuple) or default is dataclasses.MISSING) else v
    return sec_cls(**kw)


def default_seed() -> int:
    """Global seed default: ``EVA_SEED`` when set, else 0."""
    raw = os.environ.get("EVA_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"EVA_SEED must be an integer, got {raw!r}") from None


def set_override(cfg: PipelineConfig, dotted: str, value: str) -> None:
    """Apply ``section.key=value`` (value parsed as a TOML scalar or array)."""
    section, _, key = dotted.partition(".")
    parsed = tomli.loads(f"v = {value}")["v"] if value else value
    if not key:
        if section != "seed":
            raise ValueError(f"override {dotted!r} must be section.key")
        cfg.seed = int(parsed)
        return
    if section not in _SECTIONS:
        raise ValueError(f"unknown config section {section!r}")
    current = dataclasses.asdict(getattr(cfg, section))
    if key not in current:
        raise ValueError(f"unknown key {key!r} in [{section}]")
    current[key] = parsed
    if section in _SEEDLESS:
        current.pop("seed", None)
    setattr(cfg, section, _section(_SECTIONS[section], {k: list(v) if isinstance(v, tuple) else v for k, v in current.items()}, section))


# ------------------------------------------------------------ artifact loading


def _require(cfg: PipelineConfig, name: str, label: str | None = None) -> Path:
    p = cfg.path(name)
    if not p.exists():
        raise MissingArtifact(label or name, p)
    return p


def load_episodes(cfg: PipelineConfig) -> list[Episode]:
    return load_dataset(_require(cfg, "dataset"))


def tasks_of(episodes: Sequence[Episode]) -> list[TaskSpec]:
    seen = {}
    for ep in episodes:
        seen.setdefault(ep.task.task_id, ep.task)
    return [seen[k] for k in sorted(seen)]


def load_idm(cfg: PipelineConfig, path=None) -> InverseDynamicsModel:
    p = Path(path) if path else _require(cfg, "idm")
    if not p.exists():
        raise MissingArtifact("idm", p)
    return InverseDynamicsModel.from_records(load_checkpoint(p))


def load_gen(cfg: PipelineConfig, which: str = "gen") -> VelocityField:
    p = _require(cfg, which)
    return VelocityField.from_records(load_checkpoint(p))


def load_calibration(cfg: PipelineConfig) -> float:
    rec = load_checkpoint(_require(cfg, "calib", "calibration (P0)"))
    return float(rec["calib/P0"])


def reward_context(cfg: PipelineConfig, idm, P0: float) -> RewardContext:
    return RewardContext(idm, cfg.weights, RewardConfig.for_arm(cfg.arm, P0=P0, gamma=cfg.reward.gamma), cfg.arm)


def split_dataset(cfg: PipelineConfig, episodes):
    tr, va = split_episodes(len(episodes), cfg.idm_train.val_fraction, cfg.seed)
    return [episodes[i] for i in tr], [episodes[i] for i in va]


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in v)
    return "" if v is None else v


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ----------------------------------------------------------------------- stages


def stage_gen_data(cfg: PipelineConfig, export_csv=None) -> dict:
    path = cfg.path("dataset")
    episodes = generate_dataset(cfg.data.n_tasks, cfg.data.episodes_per_task, cfg.arm, cfg.seed, path=path)
    if export_csv:
        export_actions_csv(export_csv, episodes)
    return {"stage": "gen-data", "episodes": len(episodes), "tasks": cfg.data.n_tasks, "path": str(path)}


def fit_idm(cfg: PipelineConfig, episodes, pooling: str = "spatial_softmax"):
    """Train one IDM variant on the configured split; returns (model, history, val)."""
    train, val = split_dataset(cfg, episodes)
    model = InverseDynamicsModel(dataclasses.replace(cfg.idm, pooling=pooling, d=cfg.arm.d), seed=cfg.seed)
    tcfg = dataclasses.replace(cfg.idm_train, seed=cfg.seed)
    model, history = train_idm(train, model, tcfg, val)
    return model, history, val


def stage_train_idm(cfg: PipelineConfig, pooling: str = "spatial_softmax", out=None) -> dict:
    episodes = load_episodes(cfg)
    model, history, val = fit_idm(cfg, episodes, pooling)
    out = Path(out) if out else cfg.path("idm")
    save_checkpoint(out, model.records())
    write_csv(cfg.path("metrics") / f"idm_train_{pooling}.csv", history)
    last = history[-1]
    return {
        "stage": "train-idm",
        "pooling": pooling,
        "epochs": len(history),
        "train_loss": last["train_loss"],
        "val_loss": last.get("val_loss"),
        "val_accuracy_per_dim": last.get("val_accuracy_per_dim"),
        "path": str(out),
    }


def expert_replay(episode: Episode, idm: InverseDynamicsModel, arm: ArmConfig):
    """Execute the IDM's decode of ground-truth frames from the true start pose."""
    decoded = decode_actions(episode.frames, idm)
    return execute_actions(decoded, episode.task, arm, q_start=episode.q_start), decoded


def replay_trials(cfg: PipelineConfig, idm, tasks: Sequence[TaskSpec], n_trials: int) -> dict:
    """Fresh expert demonstrations per (task, trial), decoded and executed."""
    per_task = {}
    for task in tasks:
        wins = 0
        for trial in range(n_trials):
            ep = generate_expert_episode(task, cfg.arm, seed=_trial_seed(cfg.seed, "replay", task.task_id, trial))
            rep, _ = expert_replay(ep, idm, cfg.arm)
            wins += int(rep.success)
        per_task[task.task_id] = [wins, n_trials]
    total = sum(v[0] for v in per_task.values())
    return {"per_task": per_task, "success_rate": total / max(1, n_trials * len(tasks))}


def _trial_seed(seed: int, *stream) -> int:
    return int(make_rng(seed, "trial-seed", *stream).integers(0, 2**31 - 1))


def stage_eval_idm(cfg: PipelineConfig, idm_path=None) -> dict:
    episodes = load_episodes(cfg)
    idm = load_idm(cfg, idm_path)
    _, val = split_dataset(cfg, episodes)
    metrics = evaluate_idm(idm, val)
    replay = replay_trials(cfg, idm, tasks_of(episodes)[: cfg.eval.n_tasks], cfg.eval.replay_trials)
    out = {"stage": "eval-idm", **metrics, "replay_success_rate": replay["success_rate"], "replay_per_task": replay["per_task"]}
    write_json(cfg.path("metrics") / "eval_idm.json", out)
    return out


def stage_train_gen(cfg: PipelineConfig) -> dict:
    episodes = load_episodes(cfg)
    gcfg = dataclasses.replace(cfg.gen, d=cfg.arm.d, n_tasks=max(cfg.gen.n_tasks, 1 + max(ep.task.task_id for ep in episodes)))
    model = VelocityField(gcfg, seed=cfg.seed)
    model, losses = train_gen(episodes, model, dataclasses.replace(cfg.gen_train, seed=cfg.seed))
    save_checkpoint(cfg.path("gen"), model.records())
    write_csv(cfg.path("metrics") / "gen_train.csv", [{"step": i, "loss": l} for i, l in enumerate(losses)])
    k = max(1, len(losses) // 10)
    return {"stage": "train-gen", "steps": len(losses), "loss_start": float(np.mean(losses[:k])), "loss_end": float(np.mean(losses[-k:])), "path": str(cfg.path("gen"))}


def stage_calibrate(cfg: PipelineConfig, n_rollouts: int | None = None) -> dict:
    idm = load_idm(cfg)
    gen = load_gen(cfg)
    tasks = tasks_of(load_episodes(cfg))
    n = n_rollouts or cfg.reward.calib_rollouts
    P0, penalties = calibrate_P0(gen, idm, cfg.weights, cfg.arm, tasks, n, cfg.seed, cfg.sampler)
    save_checkpoint(cfg.path("calib"), {"calib/P0": np.float64(P0), "calib/penalties": penalties})
    return {"stage": "calibrate", "P0": P0, "n_rollouts": n, "penalty_min": float(penalties.min()), "penalty_max": float(penalties.max())}


ALIGN_COLUMNS = ["iter", "reward_mean", "reward_ema", "kl", "violation_rate", "artifact_rate", "grad_norm", "flags"]


def stage_align(cfg: PipelineConfig, P0: float | None = None) -> dict:
    idm = load_idm(cfg)
    gen = load_gen(cfg)
    if P0 is None:
        P0 = load_calibration(cfg)
    tasks = tasks_of(load_episodes(cfg))
    ctx = reward_context(cfg, idm, P0)
    idm_digest = _digest(idm)
    state = AlignState.start(gen, cfg.grpo)
    monitor = HackingMonitor(cfg.monitor)
    rows = []
    halted = False
    for _ in range(cfg.grpo.total_iters):
        m = align_iteration(state, tasks, ctx, cfg.grpo, cfg.sampler, cfg.seed, monitor)
        rows.append(m)
        log.info("align %s", m)
        if monitor.halt:
            log.warning("hacking monitor flags persisted for %d iterations; stopping early", cfg.monitor.patience)
            halted = True
            break
    if _digest(idm) != idm_digest:
        raise RuntimeError("IDM parameters changed during alignment")
    save_checkpoint(cfg.path("aligned"), state.model.records())
    metrics_dir = cfg.path("metrics")
    write_csv(metrics_dir / "align.csv", rows, ALIGN_COLUMNS)
    from .report import plot_reward_curve

    plot_reward_curve(rows, metrics_dir / "align_reward.png")
    return {
        "stage": "align",
        "iters": len(rows),
        "P0": P0,
        "reward_ema_start": rows[0]["reward_ema"],
        "reward_ema_end": rows[-1]["reward_ema"],
        "violation_rate_start": rows[0]["violation_rate"],
        "violation_rate_end": rows[-1]["violation_rate"],
        "early_stop": halted,
        "path": str(cfg.path("aligned")),
    }


def _digest(model) -> str:
    from .grpo import param_digest

    return param_digest(model)


# ---------------------------------------------------------------- execution


@dataclass
class SegmentRecord:
    segment: int
    R: float
    violation: bool
    artifact: bool
    mean_abs_alpha: float
    mean_abs_jerk: float
    executed: int


@dataclass
class RecedingResult:
    report: object  # ExecutionReport
    segments: list
    samples: int
    observed_frames: np.ndarray
    episodes: list = field(default_factory=list, repr=False)


def _propose(task, q, history, gen, ctx: RewardContext, K: int, n_steps: int, seed: int, stream):
    """K ODE rollouts from the current state; returns (best episode, its score, all scores)."""
    cond = condition_for(task, q, gen.cfg, history)
    x1 = sample_ode([cond] * K, gen, n_steps, seed=seed, stream=stream)
    eps = [decode_latent(x1[i].numpy(), task, q, ctx.arm, gen.cfg, seed=seed) for i in range(K)]
    scores = score_many(eps, ctx.idm, ctx.weights, ctx.rcfg, ctx.arm)
    best = int(np.argmax([s.R for s in scores]))
    return eps[best], scores[best], scores


def receding_horizon(
    task: TaskSpec,
    q_start,
    gen: VelocityField,
    ctx: RewardContext,
    segment: int = 8,
    max_segments: int = 4,
    seed: int = 0,
    K: int = 1,
    n_steps: int = 32,
    stream="exec",
) -> RecedingResult:
    """Generate, decode, execute ``segment`` steps, re-observe, repeat.

    The condition uses the true simulator state as the current pose and the
    IDM's reading of the last four observed frames as history. Execution
    keeps velocity continuity across segments, so a jump at a segment seam
    counts as a violation.
    """
    arm = ctx.arm
    q = np.asarray(q_start, dtype=np.float64).copy()
    v = np.zeros(arm.d)
    observed = [render_frame(q, arm, target=task.target)]
    traj = [q.copy()]
    segs, episodes = [], []
    samples = 0
    report = execute_actions(np.zeros((0, arm.d)), task, arm, q)
    for s in range(max_segments):
        history = None
        if len(observed) > 1:
            window = np.stack(observed[-(HISTORY + 1) :])
            history = decode_actions(window, ctx.idm)[:-1]
        ep, score, _ = _propose(task, q, history, gen, ctx, K, n_steps, seed, (stream, s))
        samples += K
        episodes.append(ep)
        acts = score.actions[1 : segment + 1]
        prof = finite_differences(ActionSequence(score.actions, arm.dt))
        rep = execute_actions(acts, task, arm, q_start=q, v_start=v)
        segs.append(
            SegmentRecord(
                s,
                score.R,
                limit_violation(score.actions, arm, q) is not None,
                ep.artifact.kind != ArtifactKind.NONE,
                float(np.abs(prof.alpha).mean()) if prof.alpha.size else 0.0,
                float(np.abs(prof.jerk).mean()) if prof.jerk.size else 0.0,
                rep.executed_steps,
            )
        )
        new = rep.trajectory[1:]
        if len(new):
            full = np.vstack([traj[-1][None], new])
            v = (full[-1] - full[-2]) / arm.dt
            traj.extend(new)
            observed.extend(render_frame(x, arm, target=task.target) for x in new)
            q = new[-1].copy()
        total = len(traj) - 1
        if rep.halted:
            report = dataclasses.replace(rep, executed_steps=total, halt_step=total, trajectory=np.stack(traj))
            break
        reached = float(np.linalg.norm(end_effector(q, arm) - np.asarray(task.target))) <= task.success_radius
        report = dataclasses.replace(rep, executed_steps=total, success=reached, final_state=q.copy(), trajectory=np.stack(traj))
        if reached:
            break
    return RecedingResult(report, segs, samples, np.stack(observed), episodes)


def stage_execute(cfg: PipelineConfig, task_id: int = 0, which: str = "aligned", trial: int = 0, max_segments=None, expert_replay_mode=False, dump_frames=None) -> dict:
    episodes = load_episodes(cfg)
    tasks = {t.task_id: t for t in tasks_of(episodes)}
    if task_id not in tasks:
        raise ValueError(f"task {task_id} not in dataset (have {sorted(tasks)})")
    task = tasks[task_id]
    idm = load_idm(cfg)
    if expert_replay_mode:
        ep = generate_expert_episode(task, cfg.arm, seed=_trial_seed(cfg.seed, "replay", task_id, trial))
        rep, _ = expert_replay(ep, idm, cfg.arm)
        frames = ep.frames
        out = {"stage": "execute", "mode": "expert-replay", "task": task_id, **rep.to_dict()}
    else:
        gen = load_gen(cfg, which)
        ctx = reward_context(cfg, idm, load_calibration(cfg))
        q0 = _trial_start(cfg, task, trial)
        res = receding_horizon(
            task, q0, gen, ctx, cfg.eval.segment, cfg.eval.max_segments if max_segments is None else max_segments,
            seed=_trial_seed(cfg.seed, "exec", task_id, trial), n_steps=cfg.sampler.n_steps,
        )
        frames = res.observed_frames
        out = {"stage": "execute", "mode": which, "task": task_id, "segments": len(res.segments), **res.report.to_dict()}
    if dump_frames:
        from .report import dump_pgm_frames

        dump_pgm_frames(frames, dump_frames)
    return out


def _trial_start(cfg: PipelineConfig, task: TaskSpec, trial: int) -> np.ndarray:
    return sample_start_for_task(task, cfg.arm, make_rng(cfg.seed, "eval-start", task.task_id, trial))


# ----------------------------------------------------------------- evaluation


def eval_variant(cfg: PipelineConfig, variant: str, tasks, idm, P0: float) -> dict:
    """Paired-seed evaluation of one variant: ``pre``, ``post`` or ``rejection-K``."""
    K = 1
    if variant == "post":
        gen = load_gen(cfg, "aligned")
    elif variant == "pre":
        gen = load_gen(cfg, "gen")
    elif variant.startswith("rejection"):
        gen = load_gen(cfg, "gen")
        K = int(variant.split("-", 1)[1]) if "-" in variant else cfg.eval.K
    else:
        raise ValueError(f"unknown variant {variant!r}")
    ctx = reward_context(cfg, idm, P0)
    per_task, segs, trials = {}, [], []
    samples = 0
    for task in tasks:
        wins = 0
        for trial in range(cfg.eval.n_trials):
            res = receding_horizon(
                task, _trial_start(cfg, task, trial), gen, ctx, cfg.eval.segment, cfg.eval.max_segments,
                seed=_trial_seed(cfg.seed, "exec", task.task_id, trial), K=K, n_steps=cfg.sampler.n_steps,
            )
            wins += int(res.report.success)
            samples += res.samples
            segs.extend(res.segments)
            trials.append({"task": task.task_id, "trial": trial, "success": int(res.report.success), "halted": int(res.report.halted),
                           "halt_reason": res.report.halt_reason or "", "executed_steps": res.report.executed_steps, "segments": len(res.segments)})
        per_task[str(task.task_id)] = [wins, cfg.eval.n_trials]
    n = sum(v[1] for v in per_task.values())
    return {
        "variant": variant,
        "K": K,
        "per_task": per_task,
        "success_rate": sum(v[0] for v in per_task.values()) / max(1, n),
        "mean_reward": float(np.mean([s.R for s in segs])),
        "violation_rate": float(np.mean([s.violation for s in segs])),
        "mean_abs_alpha": float(np.mean([s.mean_abs_alpha for s in segs])),
        "mean_abs_jerk": float(np.mean([s.mean_abs_jerk for s in segs])),
        "artifact_incidence": float(np.mean([s.artifact for s in segs])),
        "generator_samples": samples,
        "trials": trials,
    }


def stage_eval(cfg: PipelineConfig, variants: Sequence[str] = ("pre", "post")) -> dict:
    episodes = load_episodes(cfg)
    tasks = tasks_of(episodes)[: cfg.eval.n_tasks]
    idm = load_idm(cfg)
    P0 = load_calibration(cfg)
    summaries = {}
    metrics_dir = cfg.path("metrics")
    for v in variants:
        t0 = time.perf_counter()
        s = eval_variant(cfg, v, tasks, idm, P0)
        write_csv(metrics_dir / f"eval_{v}.csv", s.pop("trials"))
        summaries[v] = s
        log.info("eval %s done in %.1fs", v, time.perf_counter() - t0)
    write_json(metrics_dir / "eval_summary.json", summaries)
    rows = [{"variant": v, **{k: s[k] for k in ("K", "success_rate", "mean_reward", "violation_rate", "mean_abs_alpha", "mean_abs_jerk", "artifact_incidence", "generator_samples")}} for v, s in summaries.items()]
    write_csv(metrics_dir / "eval_summary.csv", rows)
    return {"stage": "eval", "variants": {v: {k: s[k] for k in ("success_rate", "violation_rate", "mean_reward", "generator_samples")} for v, s in summaries.items()}}


# ------------------------------------------------------------------- studies


def _artifact_specs(cfg: PipelineConfig, n: int, T: int, seed: int) -> list[ArtifactSpec]:
    """n artifact specs cycling through the three kinds, each on a random
    contiguous block of steps."""
    st = cfg.study
    kinds = [(ArtifactKind.DEFORMATION, st.deformation), (ArtifactKind.JOINT_JITTER, st.jitter), (ArtifactKind.DISCONTINUITY, st.discontinuity)]
    rng = make_rng(seed, "study-artifacts")
    specs = []
    for i in range(n):
        kind, mag = kinds[i % 3]
        lo = int(st.discontinuity) if kind == ArtifactKind.DISCONTINUITY else 0
        start = int(rng.integers(lo, T - st.artifact_steps + 1))
        specs.append(ArtifactSpec(kind, mag, frozenset(range(start, start + st.artifact_steps))))
    return specs


def study_reward_validity(cfg: PipelineConfig, n: int | None = None) -> dict:
    n = n or cfg.study.n_per_arm
    if n < 3:
        raise ValueError("reward-validity study needs at least 3 episodes per arm")
    episodes = load_episodes(cfg)
    tasks = tasks_of(episodes)
    idm = load_idm(cfg)
    P0 = load_calibration(cfg)
    ctx = reward_context(cfg, idm, P0)
    clean = [generate_expert_episode(tasks[i % len(tasks)], cfg.arm, seed=_trial_seed(cfg.seed, "study-clean", i)) for i in range(n)]
    specs = _artifact_specs(cfg, n, cfg.arm.episode_len, cfg.seed)
    bad = [inject_artifacts(ep, sp, cfg.arm, seed=_trial_seed(cfg.seed, "study-inject", i)) for i, (ep, sp) in enumerate(zip(clean, specs))]
    rc = [s.R for s in score_many(clean, idm, ctx.weights, ctx.rcfg, ctx.arm)]
    rb = [s.R for s in score_many(bad, idm, ctx.weights, ctx.rcfg, ctx.arm)]
    by_kind = {}
    for sp, a, b in zip(specs, rc, rb):
        k = by_kind.setdefault(sp.kind.name.lower(), {"pairs": 0, "clean_higher": 0})
        k["pairs"] += 1
        k["clean_higher"] += int(a > b)
    # part two: generated rollouts grouped by execution outcome
    gen = load_gen(cfg)
    outcome = {"success": [], "failure": []}
    for i in range(cfg.study.n_generated):
        task = tasks[i % len(tasks)]
        q0 = sample_start_for_task(task, cfg.arm, make_rng(cfg.seed, "study-gen-start", i))
        ep, score, _ = _propose(task, q0, None, gen, ctx, 1, cfg.sampler.n_steps, cfg.seed, ("study-gen", i))
        rep = execute_actions(score.actions, task, cfg.arm, q_start=q0)
        outcome["success" if rep.success else "failure"].append(score.R)
    report = {
        "n_per_arm": n,
        "clean_R": rc,
        "artifact_R": rb,
        "clean_mean_R": float(np.mean(rc)),
        "artifact_mean_R": float(np.mean(rb)),
        "pairs_clean_higher": int(sum(a > b for a, b in zip(rc, rb))),
        "by_kind": by_kind,
        "generated_success_R": outcome["success"],
        "generated_failure_R": outcome["failure"],
        "generated_success_mean_R": float(np.mean(outcome["success"])) if outcome["success"] else None,
        "generated_failure_mean_R": float(np.mean(outcome["failure"])) if outcome["failure"] else None,
    }
    metrics_dir = cfg.path("metrics")
    write_json(metrics_dir / "study_reward_validity.json", report)
    from .report import plot_reward_validity

    plot_reward_validity(report, metrics_dir / "study_reward_validity.png")
    return {"stage": "study-reward-validity", **{k: v for k, v in report.items() if not isinstance(v, list)}}


def study_idm_ablation(cfg: PipelineConfig) -> dict:
    episodes = load_episodes(cfg)
    tasks = tasks_of(episodes)[: cfg.eval.n_tasks]
    report = {}
    for pooling in ("spatial_softmax", "gap"):
        model, history, val = fit_idm(cfg, episodes, pooling)
        frames = np.stack([ep.frames for ep in val]) if len({ep.T for ep in val}) == 1 else None
        if frames is not None:
            pred = decode_many(frames, model)
            gt = np.stack([ep.actions for ep in val])
        else:
            pred = np.concatenate([decode_actions(ep.frames, model) for ep in val])
            gt = np.concatenate([ep.actions for ep in val])
        acc = per_dim_accuracy(pred, gt)
        replay = replay_trials(cfg, model, tasks, cfg.eval.replay_trials)
        report[pooling] = {
            "accuracy_per_dim": acc.tolist(),
            "accuracy_mean": float(acc.mean()),
            "mae_per_dim": np.abs(pred - gt).reshape(-1, gt.shape[-1]).mean(0).tolist(),
            "replay_success_rate": replay["success_rate"],
            "train_loss": history[-1]["train_loss"],
        }
        save_checkpoint(cfg.path("metrics") / f"idm_ablation_{pooling}.eva", model.records())
    metrics_dir = cfg.path("metrics")
    write_json(metrics_dir / "study_idm_ablation.json", report)
    from .report import plot_idm_ablation

    plot_idm_ablation(report, metrics_dir / "study_idm_ablation.png")
    return {"stage": "study-idm-ablation", **{f"{p}_{k}": v for p, r in report.items() for k, v in r.items()}}


# -------------------------------------------------------------- rollout/score


def stage_rollout(cfg: PipelineConfig, task_id: int = 0, which: str = "gen", n: int = 1, sde: bool = False, out=None, dump_frames=None) -> dict:
    episodes = load_episodes(cfg)
    tasks = {t.task_id: t for t in tasks_of(episodes)}
    task = tasks[task_id]
    gen = load_gen(cfg, which)
    starts = [_trial_start(cfg, task, i) for i in range(n)]
    conds = [condition_for(task, q0, gen.cfg) for q0 in starts]
    if sde:
        from .flow import sample_sde

        x1 = sample_sde(conds, gen, cfg.sampler, seed=cfg.seed, stream="rollout").x1
    else:
        x1 = sample_ode(conds, gen, cfg.sampler.n_steps, seed=cfg.seed, stream="rollout")
    eps = [decode_latent(x1[i].numpy(), task, q0, cfg.arm, gen.cfg, seed=cfg.seed) for i, q0 in enumerate(starts)]
    out = Path(out) if out else cfg.path("metrics") / f"rollout_{which}_task{task_id}.eva"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, eps)
    if dump_frames:
        from .report import dump_pgm_frames

        for i, ep in enumerate(eps):
            dump_pgm_frames(ep.frames, Path(dump_frames) / f"rollout{i}")
    return {"stage": "rollout", "n": n, "task": task_id, "artifacts": int(sum(ep.artifact.kind != 0 for ep in eps)), "path": str(out)}


def stage_score(cfg: PipelineConfig, dataset_path, P0: float | None = None) -> list[dict]:
    idm = load_idm(cfg)
    P0 = load_calibration(cfg) if P0 is None else P0
    ctx = reward_context(cfg, idm, P0)
    p = Path(dataset_path)
    if not p.exists():
        raise MissingArtifact("episodes", p)
    eps = load_dataset(p)
    return [s.record() for s in score_many(eps, idm, ctx.weights, ctx.rcfg, ctx.arm)]
