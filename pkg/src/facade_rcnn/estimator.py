"""scikit-learn style wrapper around :class:`~facade_rcnn.network.FacadeRCNN`.

``X`` is a sequence of :class:`~facade_rcnn.synth.LabeledSample`; labels ride
along inside the samples, so ``y`` is accepted and ignored.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import config as run_config
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import confusion_matrix, fuse, metrics_report, miou
from .network import FacadeRCNN, ModelConfig, total_loss
from .optim import OptimState, optimizer_step
from .synth import IGNORE_INDEX, LabeledSample
from .tensor import no_grad
from .validation import check_images, check_samples, check_threshold, same_size_groups

logger = logging.getLogger(__name__)

LOSS_TERMS = ("semantic", "proposal", "detection", "cvx", "total")


class TrainingDivergedError(FloatingPointError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, epoch: int, step: int, report: Dict[str, float]):
        self.epoch, self.step, self.report = epoch, step, report
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {report}")


class FacadeParser(BaseEstimator):
    """Facade parser with transconv kernels, generalized boxes and convex loss.

    Parameters
    ----------
    n_classes : int
        Semantic classes including background.
    transconv_angles, transconv_flip, transconv_rotate, transconv_stages
        Kernel group and where it replaces plain convolutions. A single
        angle of 0 without flip or rotation is the plain network.
    alpha : float
        Weight of the convex regularizer in the total loss.
    detection : bool
        Train and use the generalized-box branch.
    convex_classes : tuple of int
        Classes with convex instances; also the detection classes.
    fuse_threshold : float
        Score above which a detection overrides the semantic labels.
    dtype : {"float32", "float64"}
        Training precision; tests use float64.
    """

    def __init__(self, n_classes=5, widths=(16, 32, 64, 64), transconv_angles=(0.0,),
                 transconv_flip=False, transconv_rotate=False, transconv_stages=(0,),
                 alpha=1.0 / 9.0, detection=True, convex_classes=(2, 4, 3),
                 convex_labels="class", convex_mode="hull", fuse_threshold=0.5,
                 epochs=10, batch_size=8, learning_rate=1e-3, weight_decay=1e-4,
                 optimizer="adam", dtype="float32", score_threshold=0.05, seed=0,
                 verbose=0):
        self.n_classes = n_classes
        self.widths = widths
        self.transconv_angles = transconv_angles
        self.transconv_flip = transconv_flip
        self.transconv_rotate = transconv_rotate
        self.transconv_stages = transconv_stages
        self.alpha = alpha
        self.detection = detection
        self.convex_classes = convex_classes
        self.convex_labels = convex_labels
        self.convex_mode = convex_mode
        self.fuse_threshold = fuse_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.dtype = dtype
        self.score_threshold = score_threshold
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------ setup
    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            n_classes=int(self.n_classes), widths=tuple(self.widths),
            transconv_angles=tuple(float(a) for a in self.transconv_angles),
            transconv_flip=bool(self.transconv_flip),
            transconv_rotate=bool(self.transconv_rotate),
            transconv_stages=tuple(int(s) for s in self.transconv_stages),
            alpha=float(self.alpha), detection=bool(self.detection),
            convex_classes=tuple(int(c) for c in self.convex_classes),
            convex_labels=self.convex_labels, convex_mode=self.convex_mode,
            seed=int(self.seed))

    def _check_params(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        check_threshold(self.fuse_threshold, "fuse_threshold")

    def _init_model(self):
        self.model_ = FacadeRCNN(self._model_config()).astype(np.dtype(self.dtype))
        self.classes_ = np.arange(self.n_classes)

    # ------------------------------------------------------------ training
    def fit(self, X, y=None, eval_set=None, log_path=None):
        """Train from scratch on ``X``; ``eval_set`` adds per-epoch test metrics."""
        self._check_params()
        samples = check_samples(X, self.n_classes)
        eval_samples = check_samples(eval_set, self.n_classes) if eval_set else None
        self._init_model()
        self.history_: List[Dict] = []
        self.n_steps_ = 0
        state = OptimState(float(self.learning_rate), float(self.weight_decay),
                           adaptive=self.optimizer == "adam")
        params = self.model_.parameters()
        rng = np.random.default_rng(self.seed)
        log = open(log_path, "w") if log_path else None
        try:
            for epoch in range(1, int(self.epochs) + 1):
                record = self._run_epoch(samples, epoch, state, params, rng)
                if eval_samples is not None:
                    record.update(self._epoch_metrics(eval_samples))
                self.history_.append(record)
                if log is not None:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                if self.verbose:
                    logger.info("epoch %d %s", epoch, record)
        finally:
            if log is not None:
                log.close()
        self.model_.eval()
        return self

    def _run_epoch(self, samples, epoch, state, params, rng) -> Dict:
        model = self.model_.train()
        order = rng.permutation(len(samples))
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        t0 = time.perf_counter()
        for start in range(0, len(order), int(self.batch_size)):
            batch = order[start:start + int(self.batch_size)]
            self.n_steps_ += 1
            step_terms = dict.fromkeys(LOSS_TERMS, 0.0)
            for group in same_size_groups(samples, batch):
                members = [samples[i] for i in group]
                images = np.stack([s.image for s in members]).astype(model.dtype)
                report = total_loss(model, model.forward(images), members, rng)
                weight = len(group) / len(batch)
                terms = report.as_dict()
                if not all(np.isfinite(v) for v in terms.values()):
                    raise TrainingDivergedError(epoch, self.n_steps_, terms)
                (report.tensor * weight).backward()
                for k in LOSS_TERMS:
                    step_terms[k] += weight * terms[k]
            optimizer_step(params, state)
            for k in LOSS_TERMS:
                sums[k] += step_terms[k] * len(batch)
        record = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()},
                  "alpha": float(self.alpha), "steps": self.n_steps_}
        logger.debug("epoch %d took %.1fs", epoch, time.perf_counter() - t0)
        return record

    def _epoch_metrics(self, samples) -> Dict:
        m = self._confusion(samples, fused=False)
        rep = metrics_report(m)
        return {"miou": rep["miou"], "accuracy": rep["accuracy"]}

    # ------------------------------------------------------------ inference
    def _batches(self, samples_or_images):
        """Yield (indices, image batch) in groups of one image size."""
        items = list(samples_or_images)
        images = [s.image if isinstance(s, LabeledSample) else s for s in items]
        shapes = [np.shape(im) for im in images]
        groups: Dict[tuple, List[int]] = {}
        for i, sh in enumerate(shapes):
            groups.setdefault(sh, []).append(i)
        bs = int(self.batch_size)
        for idx in groups.values():
            for start in range(0, len(idx), bs):
                chunk = idx[start:start + bs]
                yield chunk, check_images(np.stack([images[i] for i in chunk]),
                                          self.model_.dtype)

    def _as_items(self, X):
        if isinstance(X, LabeledSample):
            return [X]
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return [X]
        return list(X)

    def _run(self, X, with_detection: bool):
        check_is_fitted(self, "model_")
        items = self._as_items(X)
        labels: List[Optional[np.ndarray]] = [None] * len(items)
        probs: List[Optional[np.ndarray]] = [None] * len(items)
        dets: List[list] = [[] for _ in items]
        model = self.model_.eval()
        use_det = with_detection and model.config.detection
        for chunk, images in self._batches(items):
            if use_det:
                lab, det = model.predict(images, float(self.score_threshold))
            else:
                with no_grad():
                    logits = model.forward(images, with_detection=False)["semantic"].data
                lab, det = np.argmax(logits, axis=1), [[] for _ in chunk]
            for j, i in enumerate(chunk):
                labels[i], dets[i] = lab[j], det[j]
        return items, labels, dets

    def predict_semantic(self, X) -> List[np.ndarray]:
        """Arg-max labels of the segmentation branch alone."""
        return self._run(X, with_detection=False)[1]

    def predict_detections(self, X) -> List[list]:
        """Generalized boxes per image (empty lists when detection is off)."""
        return self._run(X, with_detection=True)[2]

    def predict(self, X, threshold: Optional[float] = None) -> List[np.ndarray]:
        """Fused labels: detections scoring above the threshold override pixels."""
        t = check_threshold(self.fuse_threshold if threshold is None else threshold)
        _, labels, dets = self._run(X, with_detection=True)
        return [fuse(lab, d, t).labels for lab, d in zip(labels, dets)]

    def predict_proba(self, X) -> List[np.ndarray]:
        """Per-pixel class probabilities [C, H, W] of the segmentation branch."""
        check_is_fitted(self, "model_")
        items = self._as_items(X)
        out: List[Optional[np.ndarray]] = [None] * len(items)
        model = self.model_.eval()
        for chunk, images in self._batches(items):
            with no_grad():
                logits = model.forward(images, with_detection=False)["semantic"].data
            z = logits.astype(np.float64)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            z /= z.sum(axis=1, keepdims=True)
            for j, i in enumerate(chunk):
                out[i] = z[j]
        return out

    transform = predict_proba

    # ------------------------------------------------------------ evaluation
    def _confusion(self, samples, fused: bool, threshold: Optional[float] = None):
        samples = check_samples(samples, self.n_classes)
        preds = self.predict(samples, threshold) if fused else self.predict_semantic(samples)
        m = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        for p, s in zip(preds, samples):
            m += confusion_matrix(p, s.semantic, self.n_classes, IGNORE_INDEX)
        return m

    def evaluate(self, samples, thresholds: Optional[Iterable[float]] = None,
                 class_names: Optional[Sequence[str]] = None) -> Dict:
        """Metrics of the semantic branch and of fusion at each threshold.

        One forward pass is shared by all thresholds.
        """
        samples = check_samples(samples, self.n_classes)
        thresholds = [self.fuse_threshold] if thresholds is None else list(thresholds)
        thresholds = [check_threshold(t) for t in thresholds]
        _, labels, dets = self._run(samples, with_detection=True)
        n = self.n_classes
        sem = np.zeros((n, n), dtype=np.int64)
        fused = {t: np.zeros((n, n), dtype=np.int64) for t in thresholds}
        for lab, det, s in zip(labels, dets, samples):
            sem += confusion_matrix(lab, s.semantic, n, IGNORE_INDEX)
            for t in thresholds:
                fused[t] += confusion_matrix(fuse(lab, det, t).labels, s.semantic, n,
                                             IGNORE_INDEX)
        report = {"semantic": metrics_report(sem, class_names),
                  "fused": {repr(t): metrics_report(fused[t], class_names)
                            for t in thresholds},
                  "samples": len(samples)}
        main = repr(thresholds[0])
        report["miou"] = report["fused"][main]["miou"]
        report["accuracy"] = report["fused"][main]["accuracy"]
        return report

    def score(self, X, y=None) -> float:
        """Fused mIoU at ``fuse_threshold``."""
        return miou(self._confusion(X, fused=True))

    # ------------------------------------------------------------ persistence
    def run_config(self) -> Dict:
        params = self.get_params()
        return {k: v for k, v in params.items() if k in run_config._REVERSE}

    def save(self, path) -> Path:
        """Write the checkpoint and a ``.cfg`` run-config beside it."""
        check_is_fitted(self, "model_")
        path = Path(path)
        save_checkpoint(path, self.model_.state_dict())
        path.with_suffix(".cfg").write_text(run_config.dump_config(self.run_config()))
        return path

    @classmethod
    def load(cls, path, **overrides) -> "FacadeParser":
        path = Path(path)
        cfg_path = path.with_suffix(".cfg")
        params = run_config.load_config(cfg_path) if cfg_path.is_file() else {}
        params.update(overrides)
        est = cls(**params)
        est._init_model()
        est.model_.load_state_dict(load_checkpoint(path))
        est.model_.eval()
        est.history_ = []
        return est

