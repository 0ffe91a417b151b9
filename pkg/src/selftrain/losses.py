"""Loss-side math: masked pixel cross-entropy, the alpha-mixed objective,
temperature scaling, label erase and the mean-teacher consistency term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import segmodel
from .errors import DivergedLoss, EmptyBatch, InvalidTemperature, ShapeMismatch
from .numkit import log_softmax, softmax
from .synthgen import IGNORE


@dataclass
class PseudoLabelConfig:
    temperature: float = 0.2
    erase_threshold: float = 0.8
    erase_enabled: bool = True
    ts_enabled: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidTemperature("temperature must be > 0")
        if not 0.0 <= self.erase_threshold <= 1.0 + 1e-6:
            raise ValueError("erase_threshold must lie in [0, 1]")


@dataclass
class LossSpec:
    alpha: float = 1.0
    consistency_weight: float = 1.0
    consistency_enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")

    def with_alpha(self, alpha):
        return LossSpec(alpha, self.consistency_weight, self.consistency_enabled)


@dataclass
class Batch:
    features: np.ndarray  # (B, H, W, Ch)
    labels: np.ndarray | None = None  # (B, H, W) uint8, IGNORE allowed

    def __len__(self):
        return 0 if self.features is None else len(self.features)


def _check_pair(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    return logits, labels


def pixel_ce(logits, labels) -> float:
    """Mean ``-log softmax(logits)[label]`` over non-IGNORE pixels.

    Returns 0.0 when every pixel is IGNORE (see :func:`ce_and_grad` for the
    empty flag).
    """
    loss, _, _ = ce_and_grad(logits, labels, need_grad=False)
    return loss


def ce_and_grad(logits, labels, need_grad=True):
    """Batch CE: per-image mean over valid pixels, then mean over images.

    Accepts a single (H, W, C) grid or a (B, H, W, C) batch. Returns
    ``(loss, dloss/dlogits or None, empty)``.
    """
    logits, labels = _check_pair(logits, labels)
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    n_img, num_classes = logits.shape[0], logits.shape[-1]
    valid = labels != IGNORE
    if np.any(labels[valid] >= num_classes):
        raise ValueError("label id outside [0, C)")
    counts = valid.reshape(n_img, -1).sum(axis=1)
    logp = log_softmax(logits)
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    per_img = np.where(valid, -picked, 0.0).reshape(n_img, -1).sum(axis=1)
    nonempty = counts > 0
    per_img[nonempty] /= counts[nonempty]
    loss = float(per_img.sum() / n_img)
    empty = not nonempty.any()
    grad = None
    if need_grad:
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
        scale = np.where(nonempty, 1.0 / np.maximum(counts, 1), 0.0) / n_img
        grad *= (valid * scale[:, None, None])[..., None]
    return loss, grad, empty


def apply_temperature(logits, tau):
    """Scale logits by ``tau``; argmax is unchanged for any tau > 0."""
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {tau}")
    return np.asarray(logits, dtype=np.float64) * tau


def pseudo_labels_from_logits(logits, cfg: PseudoLabelConfig):
    """Temperature, softmax, argmax, then erase pixels below the threshold."""
    tau = cfg.temperature if cfg.ts_enabled else 1.0
    p = softmax(apply_temperature(logits, tau))
    labels = np.argmax(p, axis=-1).astype(np.uint8)
    if cfg.erase_enabled:
        labels[p.max(axis=-1) < cfg.erase_threshold] = IGNORE
    return labels


def make_pseudo_labels(params, unlabeled, cfg: PseudoLabelConfig, chunk=64):
    """Pseudo-label every unlabeled image from the current model."""
    unlabeled = np.asarray(unlabeled)
    out = []
    for start in range(0, len(unlabeled), chunk):
        logits = segmodel.forward(params, unlabeled[start : start + chunk])
        out.append(pseudo_labels_from_logits(logits, cfg))
    if not out:
        return np.empty((0,) + unlabeled.shape[1:3], dtype=np.uint8)
    return np.concatenate(out)


def consistency_and_grad(student_logits, teacher_logits, need_grad=True):
    """Mean squared difference of student and teacher softmax outputs.

    The teacher side is treated as a constant; the gradient is w.r.t. the
    student logits only.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeMismatch(f"student {s.shape} vs teacher {t.shape}")
    ps, pt = softmax(s), softmax(t)
    diff = ps - pt
    loss = float(np.mean(diff * diff))
    grad = None
    if need_grad:
        g = 2.0 * diff / diff.size
        grad = ps * (g - np.sum(g * ps, axis=-1, keepdims=True))
    return loss, grad


def consistency_loss(student_logits, teacher_logits) -> float:
    return consistency_and_grad(student_logits, teacher_logits, need_grad=False)[0]


def _teacher_params(teacher):
    if teacher is None:
        return None
    return getattr(teacher, "params", teacher)


def loss_and_grad(params, labeled, pseudo, spec: LossSpec, teacher=None, need_grad=True):
    """Value and parameter gradient of the mixed objective

    ``alpha * CE(labeled) + (1 - alpha) * CE(pseudo) + w_cl * CL(pseudo)``.

    A term with zero weight skips its forward pass. ``info`` records the
    individual terms and whether the active CE terms saw no valid pixel.
    """
    spec = spec or LossSpec()
    alpha = spec.alpha
    use_cl = spec.consistency_enabled and spec.consistency_weight > 0
    if alpha > 0 and (labeled is None or len(labeled) == 0):
        raise EmptyBatch("alpha > 0 needs a labeled batch")
    if (alpha < 1 or use_cl) and (pseudo is None or len(pseudo) == 0):
        raise EmptyBatch("pseudo/unlabeled batch required")
    if use_cl and teacher is None:
        raise ValueError("consistency term enabled without a teacher")

    grads = params.zeros_like() if need_grad else None
    info = {"ce_labeled": 0.0, "ce_pseudo": 0.0, "consistency": 0.0, "empty": False}
    total = 0.0
    empties = []

    if alpha > 0:
        cache = segmodel.forward_cached(params, labeled.features)
        l, g, empty = ce_and_grad(cache.logits, labeled.labels, need_grad)
        info["ce_labeled"] = l
        empties.append(empty)
        total += alpha * l
        if need_grad:
            _accumulate(grads, segmodel.backprop(params, cache, alpha * g))

    if alpha < 1 or use_cl:
        cache = segmodel.forward_cached(params, pseudo.features)
        dlogits = np.zeros_like(cache.logits)
        if alpha < 1:
            l, g, empty = ce_and_grad(cache.logits, pseudo.labels, need_grad)
            info["ce_pseudo"] = l
            empties.append(empty)
            total += (1.0 - alpha) * l
            if need_grad:
                dlogits += (1.0 - alpha) * g
        if use_cl:
            t_logits = segmodel.forward(_teacher_params(teacher), pseudo.features)
            l, g = consistency_and_grad(cache.logits, t_logits, need_grad)
            info["consistency"] = l
            total += spec.consistency_weight * l
            if need_grad:
                dlogits += spec.consistency_weight * g
        if need_grad:
            _accumulate(grads, segmodel.backprop(params, cache, dlogits))

    info["empty"] = bool(empties) and all(empties)
    if not np.isfinite(total):
        raise DivergedLoss(f"loss became {total}")
    return total, grads, info


def mixed_loss(labeled, pseudo, params, spec: LossSpec, teacher=None) -> float:
    """Scalar value of the alpha-mixed objective (no gradient)."""
    return loss_and_grad(params, labeled, pseudo, spec, teacher, need_grad=False)[0]


def _accumulate(acc, g):
    for name in segmodel.PARAM_NAMES:
        getattr(acc, name).__iadd__(getattr(g, name))
