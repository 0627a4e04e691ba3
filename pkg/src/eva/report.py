"""File outputs for humans: PGM frame dumps and matplotlib figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version text, so reruns give identical files
_PNG_META = {"Software": None}


def write_pgm(path, frame) -> None:
    """Binary 8-bit PGM (P5) of a [0, 1] frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("a PGM frame must be 2-D")
    px = np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
    H, W = px.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][: W * H], dtype=np.uint8).reshape(H, W).astype(np.float64) / maxval


def dump_pgm_frames(frames, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, f in enumerate(frames):
        p = directory / f"frame_{t:03d}.pgm"
        write_pgm(p, f)
        paths.append(p)
    return paths


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_reward_curve(rows, path) -> Path:
    """Raw per-iteration reward with its EMA, and the violation rate."""
    it = [r["iter"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(it, [r["reward_mean"] for r in rows], color="0.6", lw=1, label="reward (raw)")
    ax1.plot(it, [r["reward_ema"] for r in rows], color="C0", lw=2, label="reward (EMA)")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("reward")
    ax1.legend(frameon=False)
    ax2.plot(it, [r["violation_rate"] for r in rows], color="C3")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("limit-violation rate")
    ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def plot_reward_validity(report: dict, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.boxplot([report["clean_R"], report["artifact_R"]])
    ax1.set_xticks([1, 2], ["clean", "artifact"])
    ax1.set_ylabel("reward")
    succ, fail = report["generated_success_R"], report["generated_failure_R"]
    data = [x for x in (succ, fail) if x]
    labels = [n for n, x in (("success", succ), ("failure", fail)) if x]
    if data:
        ax2.boxplot(data)
        ax2.set_xticks(range(1, len(data) + 1), labels)
    ax2.set_ylabel("reward of generated rollout")
    fig.tight_layout()
    return _save(fig, path)


def plot_idm_ablation(report: dict, path) -> Path:
    names = list(report)
    d = len(report[names[0]]["accuracy_per_dim"])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    w = 0.8 / len(names)
    for i, n in enumerate(names):
        ax.bar(np.arange(d) + i * w, report[n]["accuracy_per_dim"], width=w, label=n)
    ax.set_xticks(np.arange(d) + w * (len(names) - 1) / 2, [f"q{j + 1}" for j in range(d)])
    ax.set_ylabel("accuracy within 0.05 rad")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
