"""scikit-learn style wrappers around the training engine.

Images are (N, H, W, Ch) float arrays and targets are (N, H, W) integer label
maps where 255 marks pixels without a label.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import segmodel
from ._validation import check_images, check_label_maps, infer_n_classes
from .engine import Engine, StageConfig, compute_miou, predict_labels
from .losses import LossSpec, PseudoLabelConfig
from .numkit import softmax
from .search import SearchConfig, run_search
from .synthgen import IGNORE, DatasetSplit, Sample


def _samples(X, y, offset=0):
    return [Sample(offset + i, X[i], y[i]) for i in range(len(X))]


class _SegmenterBase(ClassifierMixin, BaseEstimator):
    def _check_X(self, X):
        check_is_fitted(self, "params_")
        return check_images(X, self.n_features_in_)

    def decision_function(self, X):
        """Per-pixel logits, shape (N, H, W, C)."""
        X = self._check_X(X)
        return np.concatenate([segmodel.forward(self.params_, X[i : i + 64]) for i in range(0, len(X), 64)])

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=-1)

    def predict(self, X):
        X = self._check_X(X)
        return predict_labels(self.params_, X).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Mean IoU of the predicted label maps (IGNORE pixels skipped)."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        X = self._check_X(X)
        y = check_label_maps(y, X, len(self.classes_))
        miou, _ = compute_miou(self.predict(X), y, len(self.classes_))
        return miou


class PatchSegmenter(_SegmenterBase):
    """Supervised patch-MLP pixel classifier.

    Parameters mirror the stage-0 training of the self-training engine.
    """

    def __init__(
        self,
        patch_size=5,
        hidden=32,
        n_iter=2000,
        batch_size=8,
        learning_rate=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        flip=True,
        resize=False,
        n_classes=None,
        random_state=0,
    ):
        self.patch_size = patch_size
        self.hidden = hidden
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.flip = flip
        self.resize = resize
        self.n_classes = n_classes
        self.random_state = random_state

    def _stage_config(self):
        return StageConfig(
            iters_stage0=self.n_iter,
            num_stages=0,
            batch_size=self.batch_size,
            optim=segmodel.OptimConfig(
                base_lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay
            ),
            patch_size=self.patch_size,
            hidden=self.hidden,
            flip=self.flip,
            resize=self.resize,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_label_maps(y, X, self.n_classes)
        n_classes = self.n_classes or infer_n_classes(y)
        split = DatasetSplit(labeled=_samples(X, y))
        engine = Engine(split, self._stage_config(), int(self.random_state or 0), num_classes=n_classes)
        self.params_ = engine.stage0().params
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[-1]
        return self


class SelfTrainingSegmenter(_SegmenterBase):
    """Iterative self-training over labeled and unlabeled images.

    Images whose label map is entirely IGNORE form the unlabeled pool. The
    ``strategy`` picks the alpha path: ``"fist"`` repeats ``alpha`` for every
    stage, ``"gist"`` and ``"rist"`` search binary paths using the development
    images passed to :meth:`fit`, and an explicit ``path`` string overrides
    all of them. The kept model is the stage with the best development mIoU,
    or the last stage when no development images are given.
    """

    def __init__(
        self,
        strategy="rist",
        alpha=0.75,
        path=None,
        n_stages=9,
        n_runs=5,
        beam_size=1,
        max_run_length=4,
        iters_stage0=2000,
        iters_per_stage=500,
        batch_size=8,
        learning_rate=0.05,
        patch_size=5,
        hidden=32,
        consistency=True,
        label_erase=True,
        temperature_scaling=True,
        temperature=0.2,
        erase_threshold=0.8,
        flip=True,
        resize=False,
        n_classes=None,
        random_state=0,
        n_jobs=1,
    ):
        self.strategy = strategy
        self.alpha = alpha
        self.path = path
        self.n_stages = n_stages
        self.n_runs = n_runs
        self.beam_size = beam_size
        self.max_run_length = max_run_length
        self.iters_stage0 = iters_stage0
        self.iters_per_stage = iters_per_stage
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patch_size = patch_size
        self.hidden = hidden
        self.consistency = consistency
        self.label_erase = label_erase
        self.temperature_scaling = temperature_scaling
        self.temperature = temperature
        self.erase_threshold = erase_threshold
        self.flip = flip
        self.resize = resize
        self.n_classes = n_classes
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _stage_config(self, n_stages):
        return StageConfig(
            iters_stage0=self.iters_stage0,
            iters_per_stage=self.iters_per_stage,
            num_stages=n_stages,
            batch_size=self.batch_size,
            pseudo_cfg=PseudoLabelConfig(
                temperature=self.temperature,
                erase_threshold=self.erase_threshold,
                erase_enabled=self.label_erase,
                ts_enabled=self.temperature_scaling,
            ),
            loss_spec=LossSpec(consistency_enabled=self.consistency),
            optim=segmodel.OptimConfig(base_lr=self.learning_rate),
            patch_size=self.patch_size,
            hidden=self.hidden,
            flip=self.flip,
            resize=self.resize,
        )

    def fit(self, X, y, X_dev=None, y_dev=None):
        X = check_images(X)
        y = check_label_maps(y, X, self.n_classes)
        dev = []
        if X_dev is not None:
            X_dev = check_images(X_dev, X.shape[-1])
            if y_dev is None:
                raise ValueError("y_dev is required with X_dev")
            dev = _samples(X_dev, check_label_maps(y_dev, X_dev, self.n_classes), offset=len(X))
        elif self.path is None and self.strategy in ("gist", "rist"):
            raise ValueError(f"strategy {self.strategy!r} needs development images")
        n_classes = self.n_classes or infer_n_classes(y, None if y_dev is None else np.asarray(y_dev))

        has_label = (y != IGNORE).reshape(len(y), -1).any(axis=1)
        if not has_label.any():
            raise ValueError("no labeled images")
        samples = _samples(X, y)
        split = DatasetSplit(
            labeled=[s for s, h in zip(samples, has_label) if h],
            unlabeled=[s for s, h in zip(samples, has_label) if not h],
            development=dev,
        )
        n_stages = len(self.path) if self.path is not None else self.n_stages
        seed = int(self.random_state or 0)
        engine = Engine(split, self._stage_config(n_stages), seed, num_classes=n_classes)

        if self.path is not None:
            result = engine.run_path(self.path)
        elif self.strategy == "fist":
            result = engine.run_path([self.alpha] * n_stages)
        elif self.strategy in ("gist", "rist"):
            scfg = SearchConfig(
                strategy=self.strategy,
                num_stages=n_stages,
                fist_alpha=self.alpha,
                rist_runs=self.n_runs,
                max_run_length=min(self.max_run_length, max(n_stages, 1)),
                beam_size=self.beam_size,
                master_seed=seed,
            )
            result = run_search(scfg, engine, jobs=self.n_jobs).winner
        else:
            raise ValueError(f"unknown strategy {self.strategy!r}")

        stage = result.best_stage if dev else len(result.records) - 1
        self.result_ = result
        self.path_ = result.path
        self.best_stage_ = stage
        self.stage_scores_ = np.array([r.devel_miou for r in result.records])
        self.params_ = result.states[stage].params
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[-1]
        return self
