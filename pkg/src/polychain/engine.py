"""Tensor primitives used by the GNN stack, on top of torch autograd.

Graphs are handled as edge lists plus segment reductions (no sparse
matrices).  Also holds the optimizer/scheduler helpers and the binary
checkpoint format.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import hashlib
import io
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CacheFormatError, SegmentOutOfRange

SUM, MEAN, MAX = "sum", "mean", "max"


def _check_segments(segments: torch.Tensor, num_segments: int):
    if segments.numel() and (int(segments.min()) < 0 or int(segments.max()) >= num_segments):
        raise SegmentOutOfRange(f"segment ids must lie in [0, {num_segments})")


def segment_reduce(src: torch.Tensor, segments: torch.Tensor, num_segments: int,
                   reduction: str = SUM, check: bool = True) -> torch.Tensor:
    """Reduce rows of ``src`` that share a segment id.  Empty segments give zeros."""
    segments = torch.as_tensor(segments, dtype=torch.long, device=src.device)
    if check:
        _check_segments(segments, num_segments)
    shape = (num_segments,) + tuple(src.shape[1:])
    if reduction in (SUM, MEAN) and src.dtype in (torch.float16, torch.bfloat16, torch.float32):
        # accumulate in double so results do not depend on row order beyond final rounding
        return segment_reduce(src.double(), segments, num_segments, reduction, check=False).to(src.dtype)
    if reduction == SUM:
        return src.new_zeros(shape).index_add(0, segments, src)
    if reduction == MEAN:
        total = src.new_zeros(shape).index_add(0, segments, src)
        counts = torch.bincount(segments, minlength=num_segments).clamp(min=1).to(src.dtype)
        return total / counts.view(-1, *([1] * (src.dim() - 1)))
    if reduction == MAX:
        index = segments.view(-1, *([1] * (src.dim() - 1))).expand_as(src)
        out = src.new_zeros(shape).scatter_reduce(0, index, src, reduce="amax", include_self=False)
        return out
    raise ValueError(f"unknown reduction {reduction!r}")


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` (shape (N,) or (N, h)) within each segment."""
    segments = torch.as_tensor(segments, dtype=torch.long, device=scores.device)
    peak = segment_reduce(scores.detach(), segments, num_segments, MAX, check=False)
    shifted = (scores - peak[segments]).exp()
    denom = segment_reduce(shifted, segments, num_segments, SUM, check=False)
    return shifted / denom[segments]


def gelu(x):
    return F.gelu(x)


def leaky_relu(x, slope: float = 0.2):
    return F.leaky_relu(x, slope)


def dropout(x, p: float, training: bool):
    """Inverted dropout: kept activations are scaled by 1 / (1 - p)."""
    return F.dropout(x, p=p, training=training)


def huber_loss(pred, target, delta: float = 1.0):
    return F.huber_loss(pred, target, delta=delta)


def cross_entropy(logits, target):
    return F.cross_entropy(logits, target)


def backward(loss: torch.Tensor):
    if loss.dim() != 0:
        raise ValueError("backward needs a scalar loss")
    loss.backward()


# ---------------------------------------------------------------------------
# optimization


def adamw(params, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """AdamW with decoupled weight decay."""
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def cosine_anneal(step: int, total: int, floor: float = 0.0) -> float:
    """Cosine learning-rate multiplier: 1 at step 0, ``floor`` at ``step >= total``."""
    if total <= 0:
        return 1.0
    t = min(max(step, 0), total) / total
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, factor: float = 0.3, patience: int = 30, min_lr: float = 1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float):
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] = max(group["lr"] * self.factor, self.min_lr)
            self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"PCKP" | u16 version | u32 manifest length | manifest JSON (utf-8)
#   then per parameter, in manifest order:
#     u32 ndim | ndim x u32 shape | prod(shape) x float32

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


def _libc():
    try:
        lib = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        return lib if hasattr(lib, "malloc_trim") else None
    except OSError:
        return None


_LIBC = _libc()


def release_memory():
    """Hand freed heap pages back to the OS (glibc only; a no-op elsewhere).

    Variable-size graph batches fragment the CPU allocator's heap, so resident
    memory would otherwise climb by a few hundred MB per epoch.
    """
    if _LIBC is not None:
        _LIBC.malloc_trim(0)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_state(path, state: dict[str, torch.Tensor], manifest: dict):
    manifest = dict(manifest)
    manifest["parameters"] = [[name, list(t.shape)] for name, t in state.items()]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CacheFormatError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CacheFormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 10
    manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    state = {}
    for name, _ in manifest["parameters"]:
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CacheFormatError(f"{path}: trailing bytes in checkpoint")
    return state, manifest
