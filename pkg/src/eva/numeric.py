"""Dense float64 arithmetic, gradients, optimizer and the EVA1 checkpoint container.

Tensors are ``torch.Tensor`` objects in float64. Reverse-mode gradients come from
torch autograd; :func:`finite_difference_gradient` is an independent oracle that
only ever evaluates the forward function.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

MAGIC = b"EVA1"
FORMAT_VERSION = 1

# dtype tag -> numpy dtype (little-endian)
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {v: k for k, v in _DTYPE_TAGS.items()}


class NonFiniteError(FloatingPointError):
    """Raised when a forward computation produces NaN or Inf."""


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- RNG


def _stream_key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an explicit stream id.

    Stream components may be ints or strings; different streams are independent
    and each is reproducible on its own, regardless of call order elsewhere.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))


def randn(rng: np.random.Generator, *shape: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


def tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone()
    t.requires_grad_(requires_grad)
    return t


# --------------------------------------------------------------------- gradients


def _iter_tensors(obj):
    if isinstance(obj, torch.Tensor):
        yield obj
    elif isinstance(obj, (tuple, list)):
        for o in obj:
            yield from _iter_tensors(o)


class _FiniteGuard(TorchFunctionMode):
    """Checks every intermediate result while the loss graph is being built."""

    def __init__(self):
        super().__init__()
        self.node = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        self.node += 1
        for t in _iter_tensors(out):
            if t.is_floating_point() and not bool(torch.isfinite(t).all()):
                name = getattr(func, "__name__", repr(func))
                raise NonFiniteError(f"non-finite value produced at node {self.node} ({name})")
        return out


def evaluate_with_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    check_finite: bool = True,
) -> tuple[float, list[torch.Tensor]]:
    """Evaluate ``loss_fn()`` and return ``(loss, [dL/dp for p in params])``.

    Parameters that do not take part in the graph get zero gradients. With
    ``check_finite`` the forward pass is traced op by op and the first node that
    produces NaN/Inf is named in the raised :class:`NonFiniteError`.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("all params must have requires_grad set")
    if check_finite:
        with _FiniteGuard():
            loss = loss_fn()
    else:
        loss = loss_fn()
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("loss_fn must return a single scalar")
    loss = loss.reshape(())
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss is not finite")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError("non-finite gradient")
    return float(loss.detach()), grads


def finite_difference_gradient(
    loss_fn: Callable[[], torch.Tensor | float],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> list[torch.Tensor]:
    """Central differences (L(p+h) - L(p-h)) / 2h, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out


# --------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "OptimizerState":
        st = cls(**kw)
        st.exp_avg = [torch.zeros_like(p, requires_grad=False) for p in params]
        st.exp_avg_sq = [torch.zeros_like(p, requires_grad=False) for p in params]
        return st


def adamw_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: OptimizerState
) -> tuple[Sequence[torch.Tensor], OptimizerState]:
    """One AdamW update (decoupled weight decay), applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p, requires_grad=False) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p, requires_grad=False) for p in params]
    state.step += 1
    bc1 = 1 - state.beta1**state.step
    bc2 = 1 - state.beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if p.shape != g.shape or m.shape != p.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            p.mul_(1 - state.lr * state.weight_decay)
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            denom = (v.sqrt() / np.sqrt(bc2)).add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params, state


def global_norm(grads: Iterable[torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)))


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float) -> list[torch.Tensor]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


# -------------------------------------------------------------------- checkpoint


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float64 or arr.dtype == np.float32 or arr.dtype == np.uint8:
        return arr.astype(arr.dtype.newbyteorder("<"))
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return arr.astype("<i8")
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype("<f8")
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def decode_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def dumps_checkpoint(records: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for name, value in records.items():
        arr = _as_array(value).copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        bname = name.encode("utf-8")
        buf.write(struct.pack("<I", len(bname)))
        buf.write(bname)
        buf.write(struct.pack("<BI", _TAG_OF[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not an EVA1 container")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos, out = 8, {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BI", data, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        dt = _DTYPE_TAGS.get(tag)
        if dt is None:
            raise CheckpointError(f"unknown dtype tag {tag} in record {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated payload in record {name!r}")
        out[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def save_checkpoint(path, records: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(records))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
