import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from eva.env import ArmConfig, Episode, generate_expert_episode, render_episode, sample_tasks
from eva.flow import GenConfig, SamplerConfig, VelocityField, condition_for, decode_latent, sample_ode, sample_sde, trajectory_log_probs
from eva.grpo import (
    AlignState,
    GrpoConfig,
    HackingMonitor,
    MonitorThresholds,
    RewardContext,
    RolloutGroup,
    align_iteration,
    clipped_objective,
    compute_advantages,
    grpo_surrogate,
    kl_reference,
    param_digest,
    rejection_sampling_baseline,
    step_ratio,
)
from eva.idm import IdmConfig, InverseDynamicsModel
from eva.numeric import evaluate_with_gradients, finite_difference_gradient
from eva.reward import PenaltyWeights, RewardConfig

ARM = ArmConfig()
TOY = GenConfig(T=2, d=1, n_tasks=2, hidden=8, t_embed=4)


class Shifted(torch.nn.Module):
    """Wraps a velocity field and adds ``c`` to one output coordinate."""

    def __init__(self, base, c, index=(0, 0)):
        super().__init__()
        self.base, self.c, self.index, self.cfg = base, c, index, base.cfg

    def forward(self, x, t, cond):
        out = self.base(x, t, cond).clone()
        out[:, self.index[0], self.index[1]] += self.c
        return out


def _traj(model, B=3, n_steps=2, g=0.3, seed=0):
    conds = np.random.default_rng(seed).normal(size=(B, model.cfg.cond_dim))
    return sample_sde(conds, model, SamplerConfig(n_steps=n_steps, g=g), seed=seed)


def _group(model, rewards, seed=0, n_steps=2):
    traj = _traj(model, B=len(rewards), n_steps=n_steps, seed=seed)
    with torch.no_grad():
        old = trajectory_log_probs(traj, model)
    r = np.asarray(rewards, dtype=np.float64)
    return RolloutGroup(None, None, traj, r, compute_advantages(r), old)


# ---------------------------------------------------------------- advantages


def test_advantage_examples():
    assert not compute_advantages([0.3] * 5).any()
    assert np.allclose(compute_advantages([0.0, 1.0], eps_std=0.0), [-1, 1], atol=1e-15)
    assert np.allclose(compute_advantages([2.0, 4.0, 6.0]), [-1.224744871391589, 0, 1.224744871391589], atol=1e-8)
    with pytest.raises(ValueError):
        compute_advantages([1.0])
    assert compute_advantages([0.0] * 9 + [1.0]).max() == pytest.approx(3.0, abs=1e-6)
    assert compute_advantages([0.0] * 99 + [1.0]).max() == 5.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-10_000, 10_000).map(lambda k: k / 1000), min_size=2, max_size=16), st.floats(-100, 100))
def test_advantage_properties(rewards, shift):
    r = np.asarray(rewards)
    adv = compute_advantages(r, adv_clip=1e9)
    # rounding in r - mean(r) is amplified by 1 / (std + 1e-8) when rewards nearly tie
    def rounding(x):
        return 16 * np.finfo(float).eps * np.abs(x).max() / (x.std() + 1e-8)
    assert abs(adv.mean()) < 1e-9 + rounding(r)
    assert np.allclose(adv, compute_advantages(r + shift, adv_clip=1e9), atol=1e-6 + rounding(r + shift))
    if r.std() > 1e-3:
        assert r[np.argmax(adv)] == r.max()  # ties may resolve to any maximiser
        assert adv.std() == pytest.approx(r.std() / (r.std() + 1e-8), abs=1e-9)
    assert np.abs(compute_advantages(r)).max() <= 5.0


# -------------------------------------------------------------------- ratios


def test_ratio_is_one_at_old_params():
    model = VelocityField(TOY, seed=1)
    g = _group(model, [0.1, 0.5, 0.9], n_steps=6)
    assert torch.equal(step_ratio(g.traj, model, g.old_log_probs), torch.ones(3, 6, dtype=torch.float64))
    with pytest.raises(ValueError):
        step_ratio(g.traj, model, None)


def test_ratio_under_output_shift_matches_gaussian_oracle():
    base = VelocityField(TOY, seed=2)
    g = _group(base, [0.0, 1.0, 0.5], n_steps=4)
    c = 0.37
    with torch.no_grad():
        r = step_ratio(g.traj, Shifted(base, c, (1, 2)), g.old_log_probs).numpy()
    # independent route: plain numpy Gaussian log-density ratio per step
    grid = g.traj.timesteps.numpy()
    states = g.traj.states.numpy()
    with torch.no_grad():
        from eva.flow import step_means

        mu = step_means(g.traj, base).numpy()
    gs = g.traj.sampler.g
    for b in range(3):
        for i in range(4):
            t, dt = grid[i], grid[i + 1] - grid[i]
            sd = gs * math.sqrt(dt)
            shift = np.zeros_like(mu[b, i])
            shift[1, 2] = c * dt * (1 + gs**2 * t / (2 * (1 - t)))
            x = states[b, i + 1]
            lp_new = -0.5 * np.sum((x - mu[b, i] - shift) ** 2) / sd**2
            lp_old = -0.5 * np.sum((x - mu[b, i]) ** 2) / sd**2
            assert math.log(r[b, i]) == pytest.approx(lp_new - lp_old, abs=1e-10)


def test_ratio_is_clamped():
    base = VelocityField(TOY, seed=2)
    g = _group(base, [0.0, 1.0], n_steps=2)
    with torch.no_grad():
        r = step_ratio(g.traj, Shifted(base, 1e4), g.old_log_probs)
    assert torch.all((r == math.exp(-20)) | (r == math.exp(20)))


# ------------------------------------------------------------------------ KL


@torch.no_grad()
def test_kl_examples():
    base = VelocityField(TOY, seed=3)
    traj = _traj(base, B=4, n_steps=1)
    assert float(kl_reference(traj, base, base)) == 0.0
    dt = float(traj.timesteps[1] - traj.timesteps[0])
    g = traj.sampler.g
    # at t = 0 the output shift moves the mean by exactly c * dt
    c = g * math.sqrt(dt) / dt
    assert float(kl_reference(traj, Shifted(base, c), base)) == pytest.approx(0.5, abs=1e-10)
    assert float(kl_reference(traj, Shifted(base, -c), base)) == pytest.approx(0.5, abs=1e-10)
    multi = _traj(base, B=2, n_steps=5)
    assert float(kl_reference(multi, Shifted(base, 0.2, (0, 0)), base)) > 0


# ----------------------------------------------------------------- surrogate


def test_surrogate_at_old_equals_minus_mean_advantage():
    model = VelocityField(TOY, seed=4)
    groups = [_group(model, [0.1, 0.7, 0.4], seed=1), _group(model, [0.9, 0.2, 0.2], seed=2)]
    loss, info = grpo_surrogate(groups, model, model.clone(), GrpoConfig(G=3))
    assert abs(float(loss.detach())) < 1e-12 and info["kl"] == 0.0


def test_clip_branch_arithmetic():
    eps = 0.001
    r = torch.tensor([[1 + 2 * eps], [1 - 2 * eps]], dtype=torch.float64)
    out = clipped_objective(r, torch.tensor([2.0, 2.0], dtype=torch.float64), eps)
    assert float(out[0, 0]) == pytest.approx((1 + eps) * 2.0, abs=1e-12)
    assert float(out[1, 0]) == pytest.approx((1 - 2 * eps) * 2.0, abs=1e-12)
    neg = clipped_objective(r, torch.tensor([-1.0, -1.0], dtype=torch.float64), eps)
    assert float(neg[0, 0]) == pytest.approx(-(1 + 2 * eps), abs=1e-12)
    assert float(neg[1, 0]) == pytest.approx(-(1 - eps), abs=1e-12)


def test_surrogate_gradient_is_reinforce_at_old_params():
    for seed in range(5):
        model = VelocityField(TOY, seed=seed)
        groups = [_group(model, np.random.default_rng(seed).uniform(size=4), seed=seed, n_steps=2)]
        cfg = GrpoConfig(G=4, beta_kl=0.0)
        params = list(model.parameters())
        _, grads = evaluate_with_gradients(lambda: grpo_surrogate(groups, model, model, cfg)[0], params)
        g = groups[0]
        adv = torch.as_tensor(g.advantages)
        N = g.traj.n_steps
        reinforce = lambda: -(adv[:, None] * trajectory_log_probs(g.traj, model)).sum() / (len(adv) * N)
        _, ref = evaluate_with_gradients(reinforce, params)
        for a, b in zip(grads, ref):
            assert torch.allclose(a, b, atol=1e-5, rtol=0)


def test_surrogate_gradient_matches_finite_differences():
    for seed in range(5):
        model = VelocityField(TOY, seed=seed)
        ref = Shifted(VelocityField(TOY, seed=seed + 100), 0.0)
        groups = [_group(model, np.random.default_rng(seed).uniform(size=3), seed=seed)]
        cfg = GrpoConfig(G=3, beta_kl=0.5)
        params = list(model.parameters())
        fn = lambda: grpo_surrogate(groups, model, ref, cfg)[0]
        _, grads = evaluate_with_gradients(fn, params)
        for a, b in zip(grads, finite_difference_gradient(fn, params, h=1e-5)):
            assert torch.allclose(a, b, atol=1e-5, rtol=0)


# ----------------------------------------------------------------- iteration


@pytest.fixture(scope="module")
def small_setup():
    tasks = sample_tasks(2, ARM, seed=0)
    gcfg = GenConfig(n_tasks=2, hidden=16, t_embed=8)
    idm = InverseDynamicsModel(IdmConfig(), seed=0)
    ctx = RewardContext(idm, PenaltyWeights.for_arm(ARM), RewardConfig.for_arm(ARM, P0=1.0), ARM)
    cfg = GrpoConfig(G=2, prompts_per_iter=2, groups_per_minibatch=1, inner_epochs=2)
    return tasks, gcfg, ctx, cfg, SamplerConfig(n_steps=4)


def _run(setup, iters=2):
    tasks, gcfg, ctx, cfg, sampler = setup
    state = AlignState.start(VelocityField(gcfg, seed=0), cfg)
    ref = param_digest(state.ref_model)
    idm_digest = param_digest(ctx.idm)
    rows = [align_iteration(state, tasks, ctx, cfg, sampler, seed=7, monitor=HackingMonitor()) for _ in range(iters)]
    assert param_digest(state.ref_model) == ref and param_digest(ctx.idm) == idm_digest
    return rows, param_digest(state.model)


def test_align_iteration_is_deterministic(small_setup):
    rows_a, digest_a = _run(small_setup)
    rows_b, digest_b = _run(small_setup)
    assert rows_a == rows_b and digest_a == digest_b
    assert [r["iter"] for r in rows_a] == [0, 1]
    for r in rows_a:
        assert 0 <= r["violation_rate"] <= 1 and 0 < r["reward_mean"] <= 1


def test_identical_rewards_leave_params_unchanged(small_setup):
    tasks, gcfg, ctx, _, sampler = small_setup
    flat_idm = InverseDynamicsModel(IdmConfig(), seed=0)
    flat_idm.zero_head()  # every frame decodes to the same pose, so R = 1 everywhere
    flat = RewardContext(flat_idm, ctx.weights, ctx.rcfg, ARM)
    cfg = GrpoConfig(G=2, prompts_per_iter=2, groups_per_minibatch=1, weight_decay=0.0)
    state = AlignState.start(VelocityField(gcfg, seed=0), cfg)
    before = param_digest(state.model)
    m = align_iteration(state, tasks, flat, cfg, sampler, seed=1)
    assert m["reward_mean"] == 1.0
    assert param_digest(state.model) == before


# ------------------------------------------------------------------- monitor


def test_monitor_flags():
    task = sample_tasks(1, ARM, seed=2)[0]
    moving = generate_expert_episode(task, ARM, seed=0)
    mon = HackingMonitor()
    assert mon.update([(moving, 0.95), (moving, 0.4)], ARM) == ""
    still = np.repeat(moving.actions[:1], 16, axis=0)
    static = Episode(render_episode(still, task, ARM), still, task)
    assert mon.sample_flags(static, 1.0) == ["static"]
    assert mon.sample_flags(static, 0.5) == []
    flags = mon.update([(static, 1.0)], ARM)
    assert "static" in flags.split("|") and "goal_regression" in flags.split("|")


def test_monitor_halts_after_patience():
    mon = HackingMonitor(MonitorThresholds(patience=5))
    for i in range(4):
        mon.record(["static"])
        assert not mon.halt
    mon.record([])
    for i in range(4):
        mon.record(["static"])
    assert not mon.halt
    mon.record(["goal_regression"])
    assert mon.halt
    with pytest.raises(ValueError):
        HackingMonitor().update([], ARM)


# ------------------------------------------------------------ rejection sampling


def test_rejection_sampling(small_setup):
    tasks, gcfg, ctx, _, _ = small_setup
    model = VelocityField(gcfg, seed=5)
    q0 = np.array([0.2, 0.3, -0.1])
    ep1, s1, st1 = rejection_sampling_baseline(tasks[0], q0, model, 1, ctx, seed=3, n_steps=8)
    x1 = sample_ode([condition_for(tasks[0], q0, gcfg)], model, 8, seed=3, stream="reject")
    direct = decode_latent(x1[0].numpy(), tasks[0], q0, ARM, gcfg, seed=3)
    assert np.array_equal(ep1.actions, direct.actions) and st1["mean_R"] == st1["max_R"] == s1.R
    _, s8, st8 = rejection_sampling_baseline(tasks[0], q0, model, 8, ctx, seed=3, n_steps=8)
    assert s8.R == st8["max_R"] >= st8["mean_R"] and st8["K"] == 8 and st8["wall_clock"] > 0
    with pytest.raises(ValueError):
        rejection_sampling_baseline(tasks[0], q0, model, 0, ctx, seed=3)
