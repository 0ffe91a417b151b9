"""Self-training pipeline: stage-0 supervised training, refinement stages,
development-set evaluation and per-run persistence."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import segmodel
from .errors import EmptyEvaluation, ShapeMismatch
from .losses import Batch, LossSpec, PseudoLabelConfig, loss_and_grad, make_pseudo_labels
from .numkit import RngStream, stream_key
from .segmodel import ModelParams, OptimConfig, TeacherState, ema_update, sgd_step
from .synthgen import IGNORE, DatasetSplit

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ metrics


def confusion_matrix(preds, gts, num_classes):
    """``cm[gt, pred]`` pixel counts; IGNORE ground truth is skipped."""
    preds = np.asarray(preds).ravel().astype(np.int64)
    gts = np.asarray(gts).ravel().astype(np.int64)
    if preds.shape != gts.shape:
        raise ShapeMismatch("predictions and ground truth differ in size")
    keep = gts != IGNORE
    idx = num_classes * gts[keep] + preds[keep]
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def compute_miou(preds, gts, num_classes):
    """Dataset-level IoU per class and their mean over classes with a
    non-empty union. Returns ``(miou, per_class)``; absent classes are NaN
    in ``per_class``."""
    if len(preds) != len(gts):
        raise ShapeMismatch("different number of predictions and ground truths")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ShapeMismatch(f"prediction {np.shape(p)} vs gt {np.shape(g)}")
        cm += confusion_matrix(p, g, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise EmptyEvaluation("no class has a non-empty union")
    per_class = np.full(num_classes, np.nan)
    per_class[present] = tp[present] / union[present]
    return float(per_class[present].mean()), per_class


def predict_labels(params, features, chunk=64):
    out = []
    for start in range(0, len(features), chunk):
        out.append(np.argmax(segmodel.forward(params, features[start : start + chunk]), axis=-1))
    return np.concatenate(out).astype(np.uint8)


def eval_miou(params, features, labels):
    return compute_miou(predict_labels(params, features), labels, params.num_classes)[0]


def pseudo_label_stats(labels):
    """(IGNORE fraction, share of valid pixels held by the modal class)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan"), float("nan")
    valid = labels[labels != IGNORE]
    ignore_frac = 1.0 - valid.size / labels.size
    if valid.size == 0:
        return ignore_frac, float("nan")
    return ignore_frac, float(np.bincount(valid).max() / valid.size)


# ------------------------------------------------------------------ configs


@dataclass
class StageConfig:
    iters_stage0: int = 2000
    iters_per_stage: int = 500
    num_stages: int = 9
    batch_size: int = 8
    eval_split: str = "development"
    pseudo_cfg: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    loss_spec: LossSpec = field(default_factory=lambda: LossSpec(consistency_enabled=True))
    optim: OptimConfig = field(default_factory=OptimConfig)
    patch_size: int = 5
    hidden: int = 32
    teacher_decay: float = 0.99
    flip: bool = True
    resize: bool = False

    def __post_init__(self):
        if isinstance(self.pseudo_cfg, dict):
            self.pseudo_cfg = PseudoLabelConfig(**self.pseudo_cfg)
        if isinstance(self.loss_spec, dict):
            self.loss_spec = LossSpec(**self.loss_spec)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        for name in ("iters_stage0", "iters_per_stage", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_stages < 0:
            raise ValueError("num_stages must be >= 0")
        if self.eval_split not in ("development", "validation"):
            raise ValueError("eval_split must be 'development' or 'validation'")


@dataclass
class StageRecord:
    stage: int
    alpha: float | None
    devel_miou: float
    val_miou: float
    checkpoint: str | None = None
    ignore_frac: float = float("nan")
    dominant_frac: float = float("nan")
    empty_loss: bool = False
    wall_time: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d.pop("wall_time")  # kept out of manifests so they stay byte-stable
        return d


@dataclass
class RunState:
    """A trained model plus everything needed to continue its trajectory."""

    params: ModelParams
    teacher: TeacherState
    velocity: ModelParams
    alphas: tuple
    records: list
    parent: "RunState | None" = field(default=None, repr=False)

    @property
    def stage(self):
        return len(self.alphas)

    @property
    def score(self):
        return self.records[-1].devel_miou

    @property
    def path_string(self):
        return alphas_to_string(self.alphas)


def alphas_to_string(alphas):
    if all(a in (0, 1) for a in alphas):
        return "".join("L" if a == 1 else "P" for a in alphas)
    return ",".join(f"{a:g}" for a in alphas)


@dataclass
class RunResult:
    path: str
    records: list
    states: list = field(default_factory=list, repr=False)

    @property
    def best_stage(self):
        """Stage with the highest development mIoU; ties go to the earliest."""
        scores = [r.devel_miou for r in self.records]
        return int(np.argmax(scores))

    @property
    def best_devel(self):
        return self.records[self.best_stage].devel_miou

    @property
    def final_val(self):
        """Validation mIoU of the development-selected stage."""
        return self.records[self.best_stage].val_miou

    @property
    def last_val(self):
        return self.records[-1].val_miou

    def summary(self):
        return {
            "path": self.path,
            "best_stage": self.best_stage,
            "best_devel_miou": self.best_devel,
            "final_val_miou": self.final_val,
            "stages": [r.to_dict() for r in self.records],
        }


# ------------------------------------------------------------------- engine


def _sample_indices(rng, n, k):
    if n >= k:
        return np.sort(rng.generator.choice(n, size=k, replace=False))
    return rng.integers(0, n, size=k)


def _flip(feats, labels, rng):
    flips = rng.generator.random(len(feats)) < 0.5
    if flips.any():
        feats = feats.copy()
        feats[flips] = feats[flips, :, ::-1]
        if labels is not None:
            labels = labels.copy()
            labels[flips] = labels[flips, :, ::-1]
    return feats, labels


def _resize(feats, labels, rng, lo=0.5, hi=1.5):
    """Random rescale about the image centre, nearest-neighbour sampling.

    Output keeps the input size; pixels mapped from outside the source are
    zero features with IGNORE labels.
    """
    n, height, width = feats.shape[:3]
    scales = lo + (hi - lo) * rng.generator.random(n)
    feats = feats.copy()
    if labels is not None:
        labels = labels.copy()
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.arange(height), np.arange(width)
    for i, s in enumerate(scales):
        src_r = np.floor((rows - cy) / s + cy + 0.5).astype(int)
        src_c = np.floor((cols - cx) / s + cx + 0.5).astype(int)
        ok_r = (src_r >= 0) & (src_r < height)
        ok_c = (src_c >= 0) & (src_c < width)
        rr, cc = np.clip(src_r, 0, height - 1), np.clip(src_c, 0, width - 1)
        inside = ok_r[:, None] & ok_c[None, :]
        f = feats[i][rr][:, cc]
        f[~inside] = 0.0
        feats[i] = f
        if labels is not None:
            lab = labels[i][rr][:, cc]
            lab[~inside] = IGNORE
            labels[i] = lab
    return feats, labels


class Engine:
    """Runs stage trainings on one dataset split.

    Every stage draws its randomness from a stream keyed by the master seed
    and the alpha prefix that leads to it, so the same prefix always yields
    the same model no matter which search strategy asked for it. Stage 0 is
    computed once and cached.
    """

    def __init__(
        self, split: DatasetSplit, cfg: StageConfig | None = None, master_seed=0, num_classes=None, memoize=False
    ):
        self.cfg = cfg or StageConfig()
        self.master_seed = int(master_seed)
        if not split.labeled:
            raise ValueError("labeled set is empty")
        if num_classes is None:
            num_classes = (
                split.config.num_classes
                if split.config is not None
                else int(max(s.labels[s.labels != IGNORE].max() for s in split.labeled)) + 1
            )
        self.num_classes = int(num_classes)
        self._lab_x = split.features("labeled").astype(np.float64)
        self._lab_y = split.labels("labeled")
        # label-stripped view of the unlabeled pool
        self._unl_x = split.unlabeled_features().astype(np.float64) if split.unlabeled else None
        self._dev = self._eval_arrays(split, "development")
        self._val = self._eval_arrays(split, "validation")
        if self.cfg.eval_split == "validation":
            self._dev = self._val
        self._stage0 = None
        # optional cache of expanded states keyed by alpha prefix; safe
        # because a prefix fully determines its stage's randomness
        self._memo = {} if memoize else None
        self.stage_trainings = 0

    @staticmethod
    def _eval_arrays(split, part):
        if not getattr(split, part):
            return None
        return split.features(part).astype(np.float64), split.labels(part)

    def _rng(self, *key):
        return RngStream(self.master_seed, stream_key(*key))

    def _evaluate(self, params):
        dev = eval_miou(params, *self._dev) if self._dev is not None else float("nan")
        val = eval_miou(params, *self._val) if self._val is not None else float("nan")
        return dev, val

    def _train(self, params, teacher, spec, iters, rng, pseudo_y=None):
        cfg = self.cfg
        optim = replace(cfg.optim, max_iter=iters)
        velocity = params.zeros_like()
        use_unl = spec.alpha < 1 or (spec.consistency_enabled and spec.consistency_weight > 0)
        any_empty = False
        B = cfg.batch_size
        for it in range(iters):
            labeled = pseudo = None
            if spec.alpha > 0:
                idx = _sample_indices(rng, len(self._lab_x), B)
                x, y = self._lab_x[idx], self._lab_y[idx]
                if cfg.flip:
                    x, y = _flip(x, y, rng)
                if cfg.resize:
                    x, y = _resize(x, y, rng)
                labeled = Batch(x, y)
            if use_unl:
                idx = _sample_indices(rng, len(self._unl_x), B)
                x = self._unl_x[idx]
                y = pseudo_y[idx] if pseudo_y is not None else None
                if cfg.flip:
                    x, y = _flip(x, y, rng)
                if cfg.resize:
                    x, y = _resize(x, y, rng)
                pseudo = Batch(x, y)
            _, grads, info = loss_and_grad(params, labeled, pseudo, spec, teacher)
            any_empty |= info["empty"]
            params, velocity = sgd_step(params, grads, velocity, optim, it)
            if teacher is not None:
                teacher = ema_update(teacher, params)
        return params, teacher, velocity, any_empty

    def stage0(self) -> RunState:
        """Supervised training on the labeled set only (cached)."""
        if self._stage0 is None:
            t0 = time.perf_counter()
            init = ModelParams.init(
                self._lab_x.shape[-1],
                self.num_classes,
                self.cfg.patch_size,
                self.cfg.hidden,
                rng=self._rng("init"),
            )
            spec = LossSpec(alpha=1.0, consistency_enabled=False)
            params, _, velocity, _ = self._train(
                init, None, spec, self.cfg.iters_stage0, self._rng("stage0")
            )
            dev, val = self._evaluate(params)
            rec = StageRecord(0, None, dev, val, wall_time=time.perf_counter() - t0)
            log.info("stage 0: devel %.4f val %.4f", dev, val)
            teacher = TeacherState(params.copy(), self.cfg.teacher_decay)
            self._stage0 = RunState(params, teacher, velocity, (), [rec])
        return self._stage0

    # fields that stage 0 depends on
    _STAGE0_FIELDS = ("iters_stage0", "batch_size", "optim", "patch_size", "hidden", "teacher_decay", "flip", "resize")

    def share_stage0(self, other: "Engine"):
        """Reuse ``other``'s stage-0 model when it would be identical here."""
        same = self.master_seed == other.master_seed and all(
            getattr(self.cfg, f) == getattr(other.cfg, f) for f in self._STAGE0_FIELDS
        )
        if not same or self.num_classes != other.num_classes:
            raise ValueError("engines disagree on stage-0 settings")
        if not np.array_equal(self._lab_x, other._lab_x) or not np.array_equal(self._lab_y, other._lab_y):
            raise ValueError("engines hold different labeled sets")
        self._stage0 = other.stage0()
        return self

    def expand(self, state: RunState, alpha) -> RunState:
        """One refinement stage from ``state`` with the given alpha."""
        alpha = float(alpha)
        alphas = state.alphas + (alpha,)
        if self._memo is not None:
            hit = self._memo.get(alphas)
            if hit is None:
                hit = self._memo[alphas] = self._expand(state, alpha)
            return hit
        return self._expand(state, alpha)

    def _expand(self, state, alpha):
        t0 = time.perf_counter()
        alphas = state.alphas + (alpha,)
        spec = self.cfg.loss_spec.with_alpha(alpha)
        need_unl = alpha < 1 or spec.consistency_enabled
        if need_unl and self._unl_x is None:
            raise ValueError("refinement needs unlabeled data")
        pseudo_y = None
        ignore_frac = dominant_frac = float("nan")
        if self._unl_x is not None:
            pseudo_y = make_pseudo_labels(state.params, self._unl_x, self.cfg.pseudo_cfg)
            ignore_frac, dominant_frac = pseudo_label_stats(pseudo_y)
        teacher = state.teacher if spec.consistency_enabled else None
        params, teacher_out, velocity, empty = self._train(
            state.params,
            teacher,
            spec,
            self.cfg.iters_per_stage,
            self._rng("stage", alphas),
            pseudo_y,
        )
        if teacher_out is None:
            teacher_out = state.teacher
        self.stage_trainings += 1
        dev, val = self._evaluate(params)
        rec = StageRecord(
            len(alphas),
            alpha,
            dev,
            val,
            ignore_frac=ignore_frac,
            dominant_frac=dominant_frac,
            empty_loss=empty,
            wall_time=time.perf_counter() - t0,
        )
        log.debug(
            "stage %d (%s): devel %.4f val %.4f dominant %.3f",
            rec.stage,
            alphas_to_string(alphas),
            dev,
            val,
            dominant_frac,
        )
        return RunState(params, teacher_out, velocity, alphas, state.records + [rec], state)

    def run_path(self, path, start: RunState | None = None) -> RunResult:
        """Stage 0 followed by one refinement stage per entry of ``path``.

        ``path`` is an L/P string, a sequence of alphas, or a single float
        broadcast over ``cfg.num_stages`` stages (FIST).
        """
        alphas = resolve_alphas(path, self.cfg.num_stages)
        state = start if start is not None else self.stage0()
        if tuple(alphas[: state.stage]) != state.alphas:
            raise ValueError("resume state is not a prefix of the requested path")
        states = [state]
        for a in alphas[state.stage :]:
            state = self.expand(state, a)
            states.append(state)
        return RunResult(alphas_to_string(alphas), state.records, states)

    def resume(self, checkpoint_path) -> RunState:
        """Rebuild a RunState from a stage checkpoint written by :func:`write_run`."""
        params, velocity, teacher, meta = segmodel.load_checkpoint(
            checkpoint_path, expect={"num_classes": self.num_classes}
        )
        records = [StageRecord(**r) for r in meta["records"]]
        return RunState(params, teacher, velocity, tuple(meta["alphas"]), records)


def resolve_alphas(path, num_stages):
    from .search import AlphaPath

    if isinstance(path, AlphaPath):
        return [float(c) for c in path.choices]
    if isinstance(path, str):
        return [float(c) for c in AlphaPath.decode(path).choices] if path else []
    if np.isscalar(path):
        return [float(path)] * num_stages
    return [float(a) for a in path]


# -------------------------------------------------------------- persistence

CURVE_COLUMNS = ("stage", "alpha", "devel_miou", "val_miou", "ignore_frac", "dominant_frac")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_run(result: RunResult, directory, config_echo=None, config_hash=None, master_seed=None):
    """Persist a run: ``stage_<s>.ckpt`` per stage, ``curve.csv`` and
    ``manifest.json``. Wall times go to ``timing.json``."""
    os.makedirs(directory, exist_ok=True)
    for state in result.states:
        s = state.stage
        name = f"stage_{s}.ckpt"
        rec = state.records[-1]
        rec.checkpoint = name
        meta = {
            "stage": s,
            "alphas": list(state.alphas),
            "records": [r.to_dict() for r in state.records[:-1]] + [rec.to_dict()],
        }
        segmodel.save_checkpoint(
            os.path.join(directory, name), state.params, state.velocity, state.teacher, meta
        )
    with open(os.path.join(directory, "curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in result.records:
            w.writerow([_fmt(getattr(r, c)) for c in CURVE_COLUMNS])
    manifest = {
        "config": config_echo,
        "config_hash": config_hash,
        "master_seed": master_seed,
        **result.summary(),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "timing.json"), "w") as fh:
        json.dump([r.wall_time for r in result.records], fh)
    return manifest


def train_stage0(split: DatasetSplit, cfg: StageConfig, master_seed=0):
    """Functional form of :meth:`Engine.stage0`; returns ``(params, record)``."""
    state = Engine(split, cfg, master_seed).stage0()
    return state.params, state.records[0]


def refine_stage(state: RunState, alpha, engine: Engine):
    """Functional form of :meth:`Engine.expand`; returns ``(params, record, state)``."""
    new = engine.expand(state, alpha)
    return new.params, new.records[-1], new


def run_path(path, split: DatasetSplit, cfg: StageConfig, master_seed=0) -> RunResult:
    return Engine(split, cfg, master_seed).run_path(path)

