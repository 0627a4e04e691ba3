import json

import pytest

from eva.cli import main

# a configuration small enough to run every stage in a few seconds
TINY = {
    "data.n_tasks": 3,
    "data.episodes_per_task": 4,
    "idm_train.epochs": 1,
    "idm_train.batch_size": 16,
    "gen.hidden": 32,
    "gen_train.steps": 20,
    "gen_train.batch_size": 16,
    "sampler.n_steps": 4,
    "reward.calib_rollouts": 8,
    "grpo.total_iters": 2,
    "grpo.G": 2,
    "grpo.prompts_per_iter": 2,
    "grpo.inner_epochs": 1,
    "grpo.groups_per_minibatch": 1,
    "eval.n_trials": 1,
    "eval.n_tasks": 2,
    "eval.max_segments": 2,
    "eval.replay_trials": 1,
    "eval.K": 2,
    "study.n_per_arm": 3,
    "study.n_generated": 2,
}

STAGES = [
    ["gen-data"],
    ["train-idm"],
    ["eval-idm"],
    ["train-gen"],
    ["calibrate"],
    ["align"],
    ["eval", "--variants", "pre,post,rejection-2"],
]


def tiny_args(workdir, seed=0):
    args = ["--workdir", str(workdir), "--seed", str(seed)]
    for k, v in TINY.items():
        args += ["--set", f"{k}={v}"]
    return args


def run_cli(capsys, *argv):
    """Run ``eva`` in-process; returns (exit code, parsed JSON lines, stderr)."""
    code = main(list(argv))
    out, err = capsys.readouterr()
    lines = [json.loads(l) for l in out.splitlines() if l.startswith("{")]
    return code, lines, err


def run_tiny_pipeline(workdir, seed=0):
    results = {}
    for stage in STAGES:
        code = main(stage + tiny_args(workdir, seed))
        if code != 0:
            raise RuntimeError(f"stage {stage} exited with {code}")
        results[stage[0]] = code
    return results


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("tiny_run")
    run_tiny_pipeline(workdir)
    return workdir
