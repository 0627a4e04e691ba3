"""Inverse dynamics model: a window of frames -> the joint command at its centre."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import Episode
from .numeric import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    decode_json,
    encode_json,
    make_rng,
)

log = logging.getLogger(__name__)

ACCURACY_TOL = 0.05  # rad


def spatial_softmax(features: torch.Tensor) -> torch.Tensor:
    """Expected grid coordinates per channel.

    ``features`` is (..., C, H, W); returns (..., C, 2) with the row coordinate
    first, both normalised to [-1, 1] (a single row/column maps to 0).
    """
    *lead, C, H, W = features.shape
    flat = features.reshape(*lead, C, H * W)
    p = torch.softmax(flat, dim=-1)  # max-subtracted internally
    rows = torch.linspace(-1.0, 1.0, H) if H > 1 else torch.zeros(1)
    cols = torch.linspace(-1.0, 1.0, W) if W > 1 else torch.zeros(1)
    gi = rows[:, None].expand(H, W).reshape(-1)
    gj = cols[None, :].expand(H, W).reshape(-1)
    return torch.stack([(p * gi).sum(-1), (p * gj).sum(-1)], dim=-1)


def _init_uniform(module: nn.Module, rng: np.random.Generator) -> None:
    """Fan-in uniform init drawn from an explicit stream (torch's default scheme)."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(m.weight.shape))))
                m.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(m.bias.shape))))


@dataclass
class IdmConfig:
    d: int = 3
    k: int = 1
    channels: int = 16
    hidden: int = 128
    pooling: str = "spatial_softmax"  # or "gap"


class InverseDynamicsModel(nn.Module):
    def __init__(self, cfg: IdmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        c_in = 2 * cfg.k + 1
        self.conv1 = nn.Conv2d(c_in, 8, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(8, cfg.channels, 3, stride=2, padding=1)
        head_in = 2 * cfg.channels if cfg.pooling == "spatial_softmax" else cfg.channels
        self.fc1 = nn.Linear(head_in, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.d)
        self.register_buffer("action_mean", torch.zeros(cfg.d))
        self.register_buffer("action_std", torch.ones(cfg.d))
        _init_uniform(self, make_rng(seed, "idm-init"))

    def features(self, windows: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(windows))
        return self.conv2(h)

    def pool(self, feats: torch.Tensor) -> torch.Tensor:
        if self.cfg.pooling == "gap":
            return feats.mean(dim=(-2, -1))
        return spatial_softmax(feats).flatten(-2)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, 2k+1, H, W) -> standardized actions (B, d)."""
        if windows.ndim != 4 or windows.shape[1] != 2 * self.cfg.k + 1:
            raise ValueError(f"expected windows of shape (B, {2 * self.cfg.k + 1}, H, W), got {tuple(windows.shape)}")
        z = self.pool(self.features(windows))
        return self.fc2(F.relu(self.fc1(z)))

    def predict(self, windows: torch.Tensor) -> torch.Tensor:
        return self.forward(windows) * self.action_std + self.action_mean

    def zero_head(self) -> None:
        with torch.no_grad():
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()
            self.action_mean.zero_()

    # checkpointing in the EVA1 container under "idm/..."
    def records(self, prefix: str = "idm") -> dict:
        rec = {f"{prefix}/{k}": v for k, v in self.state_dict().items()}
        rec[f"{prefix}/config"] = encode_json(asdict(self.cfg))
        return rec

    @classmethod
    def from_records(cls, rec: dict, prefix: str = "idm") -> "InverseDynamicsModel":
        if f"{prefix}/config" not in rec:
            raise KeyError(f"no {prefix!r} model in checkpoint")
        model = cls(IdmConfig(**decode_json(rec[f"{prefix}/config"])))
        sd = {k[len(prefix) + 1 :]: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in rec.items() if k.startswith(prefix + "/") and k != f"{prefix}/config"}
        model.load_state_dict(sd)
        model.eval()
        return model


def idm_forward_gap(windows: torch.Tensor, model: InverseDynamicsModel) -> torch.Tensor:
    if model.cfg.pooling != "gap":
        raise ValueError("model was not built with global average pooling")
    return model.predict(windows)


def window_indices(T: int, k: int) -> np.ndarray:
    """(T, 2k+1) frame indices of every centred window, clamped at the edges."""
    t = np.arange(T)[:, None] + np.arange(-k, k + 1)[None, :]
    return np.clip(t, 0, T - 1)


def make_windows(frames, k: int) -> torch.Tensor:
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float64))
    return frames[torch.from_numpy(window_indices(len(frames), k))]


def idm_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the squared L2 action error."""
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    return ((pred - target) ** 2).sum(-1).mean()


def decode_actions(frames, model: InverseDynamicsModel) -> np.ndarray:
    """One action row per frame (edge windows clamp-replicate frames)."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    with torch.no_grad():
        return model.predict(make_windows(frames, model.cfg.k)).numpy()


def decode_many(frame_stack, model: InverseDynamicsModel) -> np.ndarray:
    """Batched decode of (N, T, H, W) -> (N, T, d)."""
    frame_stack = np.asarray(frame_stack, dtype=np.float64)
    N, T = frame_stack.shape[:2]
    idx = torch.from_numpy(window_indices(T, model.cfg.k))
    with torch.no_grad():
        fr = torch.from_numpy(frame_stack)
        win = fr[:, idx].reshape(N * T, -1, *frame_stack.shape[2:])
        return model.predict(win).reshape(N, T, -1).numpy()


def accuracy(pred: np.ndarray, target: np.ndarray, tol: float = ACCURACY_TOL) -> float:
    """Fraction of all predicted entries within ``tol`` of ground truth."""
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target)) <= tol))


def per_dim_accuracy(pred: np.ndarray, target: np.ndarray, tol: float = ACCURACY_TOL) -> np.ndarray:
    err = np.abs(np.asarray(pred) - np.asarray(target)).reshape(-1, np.shape(pred)[-1])
    return (err <= tol).mean(0)


@dataclass
class IdmTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    max_grad_norm: float = 5.0
    lr_floor: float = 0.02  # cosine decay ends at lr * lr_floor


def split_episodes(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = make_rng(seed, "idm-split").permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 and val_fraction > 0 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_idm(
    episodes: Sequence[Episode],
    model: InverseDynamicsModel,
    cfg: IdmTrainConfig,
    val_episodes: Sequence[Episode] | None = None,
) -> tuple[InverseDynamicsModel, list[dict]]:
    """Minibatch AdamW regression on clean expert episodes.

    Returns the trained model and a per-epoch log with train/validation loss and
    validation accuracy at the ±0.05 rad threshold.
    """
    if not episodes:
        raise ValueError("cannot train an IDM on an empty dataset")
    if any(ep.artifact.kind != 0 for ep in episodes):
        raise ValueError("IDM training data must be artifact-free")
    frames, actions, win_idx = _flatten_windows(episodes, model.cfg.k)
    mean = actions.mean(0)
    std = actions.std(0).clamp_min(1e-6)
    model.action_mean.copy_(mean)
    model.action_std.copy_(std)
    n = len(actions)

    params = list(model.parameters())
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed, "idm-batches")
    n_batches = int(np.ceil(n / cfg.batch_size))
    total = cfg.epochs * n_batches
    history = []
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        running = 0.0
        model.train()
        for b in range(n_batches):
            sel = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            win = frames[win_idx[sel]]
            tgt = (actions[sel] - mean) / std
            loss = idm_loss(model(win), tgt)
            grads = torch.autograd.grad(loss, params)
            grads = clip_grad_norm(grads, cfg.max_grad_norm)
            step = epoch * n_batches + b
            opt.lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * step / total)))
            adamw_step(params, grads, opt)
            running += float(loss.detach()) * len(sel)
        row = {"epoch": epoch, "train_loss": running / n}
        if val_episodes:
            row.update(evaluate_idm(model, val_episodes))
        history.append(row)
        log.info("idm epoch %d %s", epoch, row)
    model.eval()
    return model, history


def _flatten_windows(episodes: Sequence[Episode], k: int):
    """All frames concatenated, all actions concatenated, and per-action window
    indices into the frame array (episodes may differ in length)."""
    frames = torch.from_numpy(np.concatenate([ep.frames for ep in episodes]))
    actions = torch.from_numpy(np.concatenate([ep.actions for ep in episodes]))
    idx, offset = [], 0
    for ep in episodes:
        idx.append(window_indices(ep.T, k) + offset)
        offset += ep.T
    return frames, actions, torch.from_numpy(np.concatenate(idx))


def evaluate_idm(model: InverseDynamicsModel, episodes: Sequence[Episode]) -> dict:
    frames, gt, win_idx = _flatten_windows(episodes, model.cfg.k)
    with torch.no_grad():
        pred = model.predict(frames[win_idx]).numpy()
    gt = gt.numpy()
    std = model.action_std.numpy()
    return {
        "val_loss": float((((pred - gt) / std) ** 2).sum(-1).mean()),
        "val_accuracy": accuracy(pred, gt),
        "val_accuracy_per_dim": per_dim_accuracy(pred, gt).tolist(),
        "val_mae": float(np.abs(pred - gt).mean()),
    }
