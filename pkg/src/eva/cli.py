"""``eva`` command line: one subcommand per pipeline stage.

Every successful command prints one JSON line on stdout (``score`` prints
one per episode). A stage whose inputs are missing exits with status 2 and
names the missing artifact on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import pipeline as P

log = logging.getLogger("eva")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--workdir", help="directory for datasets, checkpoints and metrics")
    p.add_argument("--seed", type=int, help="global seed (default: config, then EVA_SEED, then 0)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eva", description="Executability-aligned rollout generation for a planar arm.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _common(p)
        return p

    p = add("config", "print the effective configuration as TOML, or write it with --write")
    p.add_argument("--write", metavar="PATH")

    p = add("gen-data", "generate the expert demonstration dataset")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--episodes-per-task", type=int)
    p.add_argument("--export-csv", metavar="PATH", help="also write all actions as CSV")

    p = add("train-idm", "train the inverse dynamics model")
    p.add_argument("--pooling", choices=["spatial_softmax", "gap"], default="spatial_softmax")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="checkpoint path (default: the configured idm path)")

    p = add("eval-idm", "held-out accuracy and expert-frame replay success of a trained IDM")
    p.add_argument("--idm", help="checkpoint to evaluate (default: the configured idm path)")

    p = add("train-gen", "supervised flow-matching training of the generator")
    p.add_argument("--steps", type=int)

    p = add("calibrate", "estimate the penalty scale P0 from pre-alignment rollouts")
    p.add_argument("--n-rollouts", type=int)

    p = add("align", "GRPO post-training against the executability reward")
    p.add_argument("--iters", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--eps-clip", type=float)
    p.add_argument("--beta-kl", type=float)
    p.add_argument("--inner-epochs", type=int)
    p.add_argument("--lr", type=float)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--p0", type=float, help="use this penalty scale instead of the calibration file")
    g.add_argument("--calibrate-p0", type=int, metavar="N", help="calibrate P0 from N rollouts first")
    p.add_argument("--monitor-thresholds", metavar="K=V,...", help="e.g. static_disp=0.01,high_reward=0.9,regression=0.2,patience=5")

    p = add("rollout", "sample generator rollouts and save them as a dataset file")
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--which", choices=["gen", "aligned"], default="gen")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--sde", action="store_true", help="use the stochastic sampler")
    p.add_argument("--out")
    p.add_argument("--dump-frames", metavar="DIR", help="write every frame as PGM")

    p = add("score", "score the episodes of a dataset file with the frozen IDM reward")
    p.add_argument("episodes", help="dataset file")
    p.add_argument("--p0", type=float)

    p = add("execute", "receding-horizon execution of one trial")
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--which", choices=["gen", "aligned"], default="aligned")
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--max-segments", type=int)
    p.add_argument("--expert-replay", action="store_true", help="decode ground-truth frames instead of generating")
    p.add_argument("--dump-frames", metavar="DIR", help="write the observed frames as PGM")

    p = add("eval", "paired-seed execution evaluation of generator variants")
    p.add_argument("--variants", default="pre,post", help="comma list of pre, post, rejection-K")
    p.add_argument("--trials", type=int, help="trials per task")

    p = add("study-reward-validity", "reward of clean vs. artifact episodes and of successful vs. failed rollouts")
    p.add_argument("--n", type=int, help="episodes per arm")

    add("study-idm-ablation", "spatial-softmax vs. global-average-pooling IDM")
    return ap


def load_config(args) -> P.PipelineConfig:
    cfg = P.PipelineConfig.load(args.config) if args.config else P.PipelineConfig(seed=P.default_seed())
    if args.config and "seed" not in _raw_keys(args.config):
        cfg.seed = P.default_seed()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workdir:
        cfg.paths.workdir = args.workdir
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        P.set_override(cfg, key.strip(), value.strip())
    return cfg


def _raw_keys(path) -> set:
    import tomli

    with open(path, "rb") as fh:
        return set(tomli.load(fh))


def _apply(cfg, section: str, **values) -> None:
    for k, v in values.items():
        if v is not None:
            P.set_override(cfg, f"{section}.{k}", json.dumps(v))


def run(args) -> object:
    cfg = load_config(args)
    c = args.command
    if c == "config":
        if args.write:
            cfg.save(args.write)
            return {"command": "config", "path": args.write}
        sys.stdout.write(cfg.to_toml())
        return None
    if c == "gen-data":
        _apply(cfg, "data", n_tasks=args.n_tasks, episodes_per_task=args.episodes_per_task)
        return P.stage_gen_data(cfg, args.export_csv)
    if c == "train-idm":
        _apply(cfg, "idm_train", epochs=args.epochs, lr=args.lr)
        return P.stage_train_idm(cfg, args.pooling, args.out)
    if c == "eval-idm":
        return P.stage_eval_idm(cfg, args.idm)
    if c == "train-gen":
        _apply(cfg, "gen_train", steps=args.steps)
        return P.stage_train_gen(cfg)
    if c == "calibrate":
        return P.stage_calibrate(cfg, args.n_rollouts)
    if c == "align":
        _apply(cfg, "grpo", total_iters=args.iters, G=args.group_size, eps_clip=args.eps_clip, beta_kl=args.beta_kl, inner_epochs=args.inner_epochs, lr=args.lr)
        if args.monitor_thresholds:
            for pair in args.monitor_thresholds.split(","):
                k, _, v = pair.partition("=")
                P.set_override(cfg, f"monitor.{k.strip()}", v.strip())
        P0 = args.p0
        if args.calibrate_p0:
            P0 = P.stage_calibrate(cfg, args.calibrate_p0)["P0"]
        return P.stage_align(cfg, P0)
    if c == "rollout":
        return P.stage_rollout(cfg, args.task, args.which, args.n, args.sde, args.out, args.dump_frames)
    if c == "score":
        return P.stage_score(cfg, args.episodes, args.p0)
    if c == "execute":
        return P.stage_execute(cfg, args.task, args.which, args.trial, args.max_segments, args.expert_replay, args.dump_frames)
    if c == "eval":
        _apply(cfg, "eval", n_trials=args.trials)
        return P.stage_eval(cfg, [v.strip() for v in args.variants.split(",") if v.strip()])
    if c == "study-reward-validity":
        return P.study_reward_validity(cfg, args.n)
    if c == "study-idm-ablation":
        return P.study_idm_ablation(cfg)
    raise AssertionError(c)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        out = run(args)
    except P.MissingArtifact as exc:
        print(f"eva {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"eva {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if out is None:
        return 0
    if isinstance(out, list):
        for rec in out:
            print(json.dumps(rec, sort_keys=True))
    else:
        out = dict(out)
        out.setdefault("command", args.command)
        out["seconds"] = round(time.perf_counter() - t0, 3)
        print(json.dumps(out, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
