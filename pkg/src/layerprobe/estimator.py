"""scikit-learn style front end for the probes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics, models
from . import numerics as nx
from . import training
from .bank import EmbeddingBank


def check_layers(X, n_layers: int | None = None) -> list[np.ndarray]:
    """Validate layer input and return a list of float64 ``(N, ...)`` arrays.

    ``X`` is one array (a single layer), a list/tuple of arrays (one per layer,
    ``(N, T, F)`` for sequence layers and ``(N, C, H, W)`` for conv layers) or
    an :class:`EmbeddingBank`.
    """
    if isinstance(X, EmbeddingBank):
        arrays = X.batch(slice(None))
    elif isinstance(X, np.ndarray):
        arrays = [X]
    elif isinstance(X, (list, tuple)):
        arrays = list(X)
    else:
        raise TypeError(f"expected an array, a list of per-layer arrays or an EmbeddingBank, got {type(X).__name__}")
    if not arrays:
        raise ValueError("at least one layer is required")
    out = []
    for i, a in enumerate(arrays):
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.ndim not in (3, 4):
            raise ValueError(f"layer {i} must be (N, T, F) or (N, C, H, W), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"layer {i} contains NaN or infinity")
        out.append(a)
    n = {a.shape[0] for a in out}
    if len(n) != 1:
        raise ValueError(f"layers disagree on the number of samples: {sorted(n)}")
    if n_layers is not None and len(out) != n_layers:
        raise ValueError(f"expected {n_layers} layers, got {len(out)}")
    return out


def _check_targets(y, n: int):
    y = np.asarray(y)
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} rows, X has {n} samples")
    if y.ndim == 2:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("multi-label targets must be a 0/1 indicator matrix")
        return "multi_label", np.arange(y.shape[1]), y.astype(np.int64)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D labels or a 2-D indicator matrix, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    return "single_label", classes, encoded


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear or attention probe over frozen per-layer embeddings.

    Parameters
    ----------
    strategy : {"all", "last"}
        Mix every layer through adapters and learned layer weights, or use the
        final layer only.
    head : {"linear", "attention"}
    epochs, warmup_epochs, peak_lr, batch_size, weight_decay, dropout, seed
        Training recipe; see :class:`layerprobe.training.TrainConfig`.

    Attributes
    ----------
    classes_ : ndarray
    task_ : str
        ``"single_label"`` for 1-D ``y``, ``"multi_label"`` for an indicator matrix.
    model_ : ProbeModel
    run_ : RunState
    layer_weights_ : ndarray or None
        Softmax-normalized layer weights (``strategy="all"`` only).
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, strategy="all", head="linear", epochs=50, warmup_epochs=5, peak_lr=1e-4, batch_size=32,
                 weight_decay=0.01, dropout=0.1, seed=0):
        self.strategy = strategy
        self.head = head
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.seed = seed

    def _config(self) -> training.TrainConfig:
        return training.TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs, peak_lr=self.peak_lr,
                                    batch_size=self.batch_size, weight_decay=self.weight_decay,
                                    dropout=self.dropout, seed=self.seed)

    def fit(self, X, y=None):
        if isinstance(X, EmbeddingBank) and y is None:
            bank = X
            self.task_ = bank.manifest.task
            self.classes_ = np.arange(bank.manifest.num_classes)
        else:
            if y is None:
                raise ValueError("y is required unless X is an EmbeddingBank")
            layers = check_layers(X)
            self.task_, self.classes_, encoded = _check_targets(y, layers[0].shape[0])
            bank = EmbeddingBank.from_arrays(layers, encoded, task=self.task_, num_classes=len(self.classes_))
        cfg = self._config()
        if self.strategy not in models.STRATEGIES:
            raise ValueError(f"strategy must be one of {models.STRATEGIES}, got {self.strategy!r}")
        if self.head not in models.HEADS:
            raise ValueError(f"head must be one of {models.HEADS}, got {self.head!r}")
        self.run_ = training.run_epochs(training.new_run(bank, self.strategy, self.head, cfg), bank)
        self.model_ = self.run_.model
        self.n_layers_in_ = bank.num_layers
        alpha = self.model_.layer_alpha()
        self.layer_weights_ = None if alpha is None else alpha
        self.loss_curve_ = [h["loss"] for h in self.run_.history]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        layers = check_layers(X, self.n_layers_in_)
        return models.forward(self.model_, layers)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        if self.task_ == "multi_label":
            return training.sigmoid(logits)
        return nx.softmax(logits, axis=-1)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        if self.task_ == "multi_label":
            return (logits > 0).astype(np.int64)
        return self.classes_[np.argmax(logits, axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Top-1 accuracy (single-label) or macro mAP (multi-label)."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        logits = self.decision_function(X)
        y = np.asarray(y)
        if self.task_ == "multi_label":
            return metrics.macro_map(logits, y).value
        index = {c: i for i, c in enumerate(self.classes_.tolist())}
        encoded = np.array([index.get(v, -1) for v in y.tolist()])
        return float(np.mean(np.argmax(logits, axis=1) == encoded))
