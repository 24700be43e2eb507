"""Scikit-learn estimator facade over the graph builder and training loop.

``MedNetClassifier`` gives the framework a ``fit`` / ``predict`` /
``predict_proba`` / ``transform`` surface with ``get_params`` round-tripping,
so it composes with scikit-learn tooling (cloning, grid search over the
training hyperparameters, pipelines that end in a classifier).
"""

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .graph import (
    MedNetConfig,
    build_mednet,
    canonical_config,
    canonical_small_config,
    slim_config,
    tiny_config,
    with_classes,
)
from .tensor import Rng
from .training import StepDecay, TrainConfig, evaluate, train
from .transfer import load_checkpoint, save_checkpoint
from .validation import check_image_batch, check_labels

CONFIG_PRESETS = {
    "auto": canonical_small_config,
    "canonical": canonical_config,
    "canonical-small": canonical_small_config,
    "slim": slim_config,
    "tiny": tiny_config,
}

EMBEDDING_NODE = "head.relu"  # post-ReLU FC1 activations


class MedNetClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier over N x H x W x C float batches.

    ``config`` picks the architecture: a preset name ("auto", "canonical",
    "canonical-small", "slim", "tiny") whose input size and class count are
    adapted to the data, or an explicit :class:`MedNetConfig` whose input
    shape must match the data exactly.  Labels may be any hashable values;
    they are encoded against the sorted unique set, exposed as ``classes_``.

    Fitted attributes: ``classes_``, ``graph_``, ``history_`` (one metrics
    record per epoch), ``input_shape_``.
    """

    def __init__(self, config="auto", epochs=10, batch_size=32, lr=0.01,
                 momentum=0.9, weight_decay=1e-4, lr_decay_every=30,
                 lr_decay_factor=0.1, val_fraction=0.2, seed=0, verbose=False):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.val_fraction = val_fraction
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------------
    def _resolve_config(self, x, num_classes):
        n, h, w, c = x.shape
        if isinstance(self.config, MedNetConfig):
            config = with_classes(self.config, num_classes)
            if (config.input_h, config.input_w, config.input_channels) != (h, w, c):
                raise ValueError(
                    f"config expects {config.input_h}x{config.input_w}x"
                    f"{config.input_channels} inputs but X is {h}x{w}x{c}")
            return config
        preset = CONFIG_PRESETS.get(self.config)
        if preset is None:
            raise ValueError(
                f"unknown config preset {self.config!r}; choose one of "
                f"{', '.join(sorted(CONFIG_PRESETS))} or pass a MedNetConfig")
        config = replace(preset(), input_h=h, input_w=w, input_channels=c,
                         num_classes=num_classes)
        config.validate()
        return config

    def _holdout(self, x, y):
        """Stratified validation holdout; falls back to the training set
        when the requested fraction rounds to nothing."""
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(
                f"val_fraction must be in [0, 1), got {self.val_fraction}")
        rng = Rng(self.seed).child(4)
        val_idx = []
        for label in range(int(y.max()) + 1):
            idx = np.flatnonzero(y == label)
            idx = idx[rng.child(label).permutation(len(idx))]
            take = int(round(self.val_fraction * len(idx)))
            take = min(take, len(idx) - 1)  # keep every class trainable
            val_idx.extend(idx[:take])
        val_idx = np.sort(np.array(val_idx, dtype=np.int64))
        train_idx = np.setdiff1d(np.arange(len(y)), val_idx)
        if len(val_idx) == 0:
            return (x, y), (x, y)
        return (x[train_idx], y[train_idx]), (x[val_idx], y[val_idx])

    # ------------------------------------------------------------------
    def fit(self, X, y):
        x = check_image_batch(X)
        y = check_labels(y, x.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(
                f"need at least 2 classes, got {len(self.classes_)}")
        encoded = encoded.astype(np.int64)
        config = self._resolve_config(x, len(self.classes_))
        graph = build_mednet(config, seed=self.seed)
        train_set, val_set = self._holdout(x, encoded)
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=min(self.batch_size, len(train_set[1])),
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_decay=StepDecay(self.lr_decay_every, self.lr_decay_factor),
            seed=self.seed,
        )
        log = print if self.verbose else None
        self.history_, self.graph_ = train(graph, train_set, val_set,
                                           train_config, log=log)
        self.input_shape_ = x.shape[1:]
        return self

    def _forward_batches(self, X, capture=None, batch_size=64):
        check_is_fitted(self, "graph_")
        x = check_image_batch(X)
        if x.shape[1:] != self.input_shape_:
            raise ValueError(f"X has shape {x.shape[1:]} per image; the "
                             f"fitted model expects {self.input_shape_}")
        self.graph_.set_mode("eval")
        outputs = []
        for start in range(0, x.shape[0], batch_size):
            batch = x[start:start + batch_size]
            if capture is None:
                _, probs = self.graph_.forward(batch)
                outputs.append(probs)
            else:
                outputs.append(self.graph_.forward(batch, capture=capture))
        return np.concatenate(outputs, axis=0)

    def predict_proba(self, X):
        """Class probabilities, columns ordered like ``classes_``."""
        return self._forward_batches(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Penultimate-layer embeddings (the post-ReLU FC1 activations)."""
        return self._forward_batches(X, capture=EMBEDDING_NODE)

    def evaluate(self, X, y, batch_size=64):
        """Loss, accuracy, and confusion matrix on encoded labels."""
        check_is_fitted(self, "graph_")
        x = check_image_batch(X)
        y = check_labels(y, x.shape[0])
        encoded = np.searchsorted(self.classes_, y)
        valid = (encoded < len(self.classes_)) & \
            (self.classes_[np.minimum(encoded, len(self.classes_) - 1)] == y)
        if not valid.all():
            raise ValueError("y contains labels unseen during fit")
        return evaluate(self.graph_, (x, encoded.astype(np.int64)),
                        batch_size=batch_size)

    # ------------------------------------------------------------------
    def save(self, path, provenance=None):
        """Write the fitted graph as a checkpoint file."""
        check_is_fitted(self, "graph_")
        prov = {"created_by": "MedNetClassifier", "seed": self.seed,
                "epochs_trained": len(self.history_)}
        prov.update(provenance or {})
        save_checkpoint(self.graph_, path, prov)

    @classmethod
    def from_checkpoint(cls, path):
        """Wrap a checkpoint as a fitted classifier.

        Checkpoints store no label names, so ``classes_`` becomes
        ``0..K-1``.
        """
        graph = load_checkpoint(path)
        est = cls(config=graph.config, seed=graph.seed)
        est.graph_ = graph
        est.classes_ = np.arange(graph.config.num_classes)
        est.history_ = []
        est.input_shape_ = (graph.config.input_h, graph.config.input_w,
                            graph.config.input_channels)
        return est
