"""Patch-based two-layer pixel classifier with hand-written gradients.

Each pixel is classified from the ``P x P`` window centred on it (zero
padded at the border)::

    h = relu(W1 @ patch + b1)
    logits = W2 @ h + b2

All weights are shared across pixel positions, so the model is a tiny
fully-convolutional net and can be trained with plain numpy.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptCheckpoint, IncompatibleCheckpoint, ShapeMismatch
from .numkit import RngStream

PARAM_NAMES = ("W1", "b1", "W2", "b2")
BIAS_NAMES = ("b1", "b2")


@dataclass
class ModelParams:
    W1: np.ndarray  # (hidden, P*P*Ch)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (C, hidden)
    b2: np.ndarray  # (C,)
    patch_size: int = 5

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd integer")
        h, d = self.W1.shape
        c = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (c, h) or self.b2.shape != (c,):
            raise ShapeMismatch("inconsistent parameter shapes")
        if d % (self.patch_size**2):
            raise ShapeMismatch("W1 width is not a multiple of patch_size**2")

    @classmethod
    def init(cls, in_channels, num_classes, patch_size=5, hidden=32, rng=None):
        """He-normal weights, zero biases."""
        rng = rng if rng is not None else RngStream(0)
        d = patch_size * patch_size * in_channels
        return cls(
            W1=rng.normal(size=(hidden, d), scale=np.sqrt(2.0 / d)),
            b1=np.zeros(hidden),
            W2=rng.normal(size=(num_classes, hidden), scale=np.sqrt(2.0 / hidden)),
            b2=np.zeros(num_classes),
            patch_size=patch_size,
        )

    @property
    def hidden(self):
        return self.W1.shape[0]

    @property
    def num_classes(self):
        return self.W2.shape[0]

    @property
    def in_channels(self):
        return self.W1.shape[1] // (self.patch_size**2)

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self):
        return ModelParams(*(a.copy() for a in self.arrays()), patch_size=self.patch_size)

    def zeros_like(self):
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()), patch_size=self.patch_size)

    def dims(self):
        return {
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "hidden": self.hidden,
            "num_classes": self.num_classes,
        }

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.patch_size == other.patch_size and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


Gradients = ModelParams


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (H, W, Ch) or (N, H, W, Ch), got {x.shape}")
    return x, False


def extract_patches(x, patch_size):
    """(N, H, W, Ch) -> (N*H*W, Ch*P*P) zero-padded sliding windows."""
    n, height, width, ch = x.shape
    r = patch_size // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))
    return win.reshape(n * height * width, ch * patch_size * patch_size)


@dataclass
class ForwardCache:
    shape: tuple
    patches: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray = field(repr=False)


def forward_cached(params: ModelParams, x) -> ForwardCache:
    x, _ = _as_batch(x)
    if x.shape[-1] != params.in_channels:
        raise ShapeMismatch(
            f"input has {x.shape[-1]} channels, model expects {params.in_channels}"
        )
    patches = extract_patches(x, params.patch_size)
    hid = patches @ params.W1.T
    hid += params.b1
    np.maximum(hid, 0.0, out=hid)
    logits = hid @ params.W2.T + params.b2
    n, height, width, _ = x.shape
    return ForwardCache((n, height, width), patches, hid, logits.reshape(n, height, width, -1))


def forward(params: ModelParams, x) -> np.ndarray:
    """Per-pixel logits, shape (H, W, C) or (N, H, W, C) matching ``x``."""
    x, single = _as_batch(x)
    logits = forward_cached(params, x).logits
    return logits[0] if single else logits


def backprop(params: ModelParams, cache: ForwardCache, dlogits) -> Gradients:
    """Chain rule from d(loss)/d(logits) back to every parameter."""
    g = np.asarray(dlogits, dtype=np.float64).reshape(-1, params.num_classes)
    dW2 = g.T @ cache.hidden
    db2 = g.sum(axis=0)
    dh = g @ params.W2
    dh *= cache.hidden > 0
    dW1 = dh.T @ cache.patches
    db1 = dh.sum(axis=0)
    return Gradients(dW1, db1, dW2, db2, patch_size=params.patch_size)


def backward(params, labeled=None, pseudo=None, loss_spec=None, teacher=None):
    """Exact gradients of the loss selected by ``loss_spec``.

    Returns ``(loss, grads, info)``; see ``losses.loss_and_grad``.
    """
    from .losses import loss_and_grad

    return loss_and_grad(params, labeled, pseudo, loss_spec, teacher=teacher)


# ----------------------------------------------------------------- optimiser


@dataclass
class OptimConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iter: int = 500
    poly_power: float = 0.9
    # reference value for a large pretrained model; base_lr above is the
    # rescaled desk-scale value actually used
    reference_base_lr: float = 2.5e-4

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @property
    def lr_multiplier(self):
        return self.base_lr / self.reference_base_lr


def poly_lr(base_lr, it, max_iter, power=0.9):
    """``base_lr * (1 - it/max_iter) ** power``."""
    if not 0 <= it <= max_iter:
        raise ValueError("iteration outside [0, max_iter]")
    return base_lr * (1.0 - it / max_iter) ** power


def sgd_step(params: ModelParams, grads: Gradients, velocity: Gradients, cfg: OptimConfig, it):
    """One momentum-SGD update; weight decay is skipped for biases."""
    if it >= cfg.max_iter:
        raise ValueError("iteration must be < max_iter")
    lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.poly_power)
    new_p, new_v = {}, {}
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        v = cfg.momentum * getattr(velocity, name) + getattr(grads, name)
        if cfg.weight_decay and name not in BIAS_NAMES:
            v = v + cfg.weight_decay * theta
        new_v[name] = v
        new_p[name] = theta - lr * v
    ps = params.patch_size
    return ModelParams(**new_p, patch_size=ps), ModelParams(**new_v, patch_size=ps)


@dataclass
class TeacherState:
    params: ModelParams
    decay: float = 0.99


def ema_update(teacher: TeacherState, student: ModelParams) -> TeacherState:
    m = teacher.decay
    if teacher.params.dims() != student.dims():
        raise ShapeMismatch("teacher and student dimensions differ")
    new = {
        n: m * getattr(teacher.params, n) + (1.0 - m) * getattr(student, n) for n in PARAM_NAMES
    }
    return TeacherState(ModelParams(**new, patch_size=student.patch_size), m)


# --------------------------------------------------------------- checkpoints

MAGIC = b"STLC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sI4IBBdI")


def save_checkpoint(path, params, velocity=None, teacher=None, meta=None):
    """Write a checksummed binary checkpoint.

    Layout: magic, version, (P, Ch, hidden, C), has_velocity, has_teacher,
    teacher decay, meta length, meta JSON, float64 arrays (W1, b1, W2, b2,
    then velocity, then teacher), CRC32 of everything before it.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(
        MAGIC,
        CKPT_VERSION,
        params.patch_size,
        params.in_channels,
        params.hidden,
        params.num_classes,
        int(velocity is not None),
        int(teacher is not None),
        float(teacher.decay) if teacher is not None else 0.0,
        len(meta_bytes),
    )
    chunks = [head, meta_bytes]
    for block in (params, velocity, teacher.params if teacher is not None else None):
        if block is not None:
            chunks.extend(a.astype("<f8").tobytes() for a in block.arrays())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path, expect=None):
    """Inverse of :func:`save_checkpoint`.

    ``expect`` is an optional dict of dims (``patch_size``, ``in_channels``,
    ``hidden``, ``num_classes``) that must match the stored header.
    Returns ``(params, velocity, teacher, meta)``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size + 4:
        raise CorruptCheckpoint("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint("CRC mismatch")
    magic, version, ps, ch, hid, nc, has_v, has_t, decay, mlen = _HEADER.unpack_from(body)
    if magic != MAGIC or version != CKPT_VERSION:
        raise CorruptCheckpoint("bad magic or version")
    dims = {"patch_size": ps, "in_channels": ch, "hidden": hid, "num_classes": nc}
    if expect:
        bad = {k: (v, dims[k]) for k, v in expect.items() if k in dims and dims[k] != v}
        if bad:
            raise IncompatibleCheckpoint(f"checkpoint dims differ: {bad}")
    off = _HEADER.size
    meta = json.loads(body[off : off + mlen].decode("utf-8"))
    off += mlen
    d = ps * ps * ch
    shapes = [(hid, d), (hid,), (nc, hid), (nc,)]

    def read_block():
        nonlocal off
        arrs = []
        for shape in shapes:
            n = int(np.prod(shape)) * 8
            if off + n > len(body):
                raise CorruptCheckpoint("truncated array data")
            arrs.append(np.frombuffer(body[off : off + n], dtype="<f8").reshape(shape).copy())
            off += n
        return ModelParams(*arrs, patch_size=ps)

    params = read_block()
    velocity = read_block() if has_v else None
    teacher = TeacherState(read_block(), decay) if has_t else None
    if off != len(body):
        raise CorruptCheckpoint("trailing bytes after array data")
    return params, velocity, teacher, meta
