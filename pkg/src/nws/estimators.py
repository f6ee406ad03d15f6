"""scikit-learn style front ends.

``PoolDistiller`` builds frozen pools; ``NWSClassifier`` learns one task by
searching them; ``DenseFinetuneClassifier`` is the free-weight reference.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import ImageDataset
from .distill import DistillConfig, pretrain_pools
from .errors import InvalidInputError
from .functional import softmax
from .harness import fit_dense, fit_task
from .training import TrainConfig
from .validation import check_images, check_labels, encode_labels

_TRAIN_PARAMS = ("epochs", "batch_size", "optimizer", "lr", "momentum", "weight_decay", "nesterov",
                 "milestones", "gamma", "similarity_reduction")


class _TrainMixin:
    def _train_config(self, **extra) -> TrainConfig:
        params = {k: getattr(self, k) for k in _TRAIN_PARAMS if hasattr(self, k)}
        params["milestones"] = tuple(params["milestones"] or ())
        return TrainConfig(**params, **extra)

    def _fit_data(self, X, y) -> ImageDataset:
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, positions = encode_labels(y)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return ImageDataset(X, positions)


class PoolDistiller(_TrainMixin, BaseEstimator):
    """Jointly pretrain a network and distil its layer-wise kernel pools.

    After ``fit``: ``pools_`` (frozen), ``init_model_`` (the pretrained
    network as indices) and ``history_`` (per-epoch losses).
    """

    def __init__(self, arch="desk", pool_size=64, beta=0.5, epochs=10, batch_size=32, optimizer="sgd",
                 lr=0.05, momentum=0.9, weight_decay=1e-5, nesterov=False, milestones=(), gamma=0.1,
                 similarity_reduction="sum", random_state=0):
        self.arch = arch
        self.pool_size = pool_size
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.milestones = milestones
        self.gamma = gamma
        self.similarity_reduction = similarity_reduction
        self.random_state = random_state

    def fit(self, X, y):
        data = self._fit_data(X, y)
        base = self._train_config().to_dict()
        cfg = DistillConfig(**base, beta=self.beta, pool_size=self.pool_size, seed=self.random_state)
        self.pools_, self.init_model_, self.history_ = pretrain_pools(self.arch, data, cfg)
        return self


class _TaskClassifier(_TrainMixin, ClassifierMixin, BaseEstimator):
    def decision_function(self, X):
        check_is_fitted(self, "classes_")
        return self._logits(check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class NWSClassifier(_TaskClassifier):
    """One task learned by searching frozen pools.

    ``prev_model`` seeds the temporary kernels (usually the previous task's
    model or the pretrained one). After ``fit``: ``model_`` holds the
    stored form (indices plus batch-norm state), ``network_`` the
    assembled inference network and ``history_`` the per-epoch losses.
    """

    def __init__(self, pools=None, prev_model=None, arch=None, task_id=1, temp_init="decode",
                 epochs=15, batch_size=32, optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=1e-5,
                 nesterov=False, milestones=(), gamma=0.1, similarity_reduction="sum", random_state=0):
        self.pools = pools
        self.prev_model = prev_model
        self.arch = arch
        self.task_id = task_id
        self.temp_init = temp_init
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.milestones = milestones
        self.gamma = gamma
        self.similarity_reduction = similarity_reduction
        self.random_state = random_state

    def fit(self, X, y):
        if self.pools is None:
            raise InvalidInputError("NWSClassifier needs pools")
        data = self._fit_data(X, y)
        cfg = self._train_config(temp_init=self.temp_init)
        # non-integer labels are stored by position
        ids = self.classes_ if np.issubdtype(self.classes_.dtype, np.integer) else range(len(self.classes_))
        self.model_, self.network_, self.history_ = fit_task(
            self.pools, self.prev_model, data, len(self.classes_), cfg, self.random_state,
            self.task_id, [int(c) for c in ids], self.arch)
        return self

    def _logits(self, X):
        return self.network_.predict_logits(X)


class DenseFinetuneClassifier(_TaskClassifier):
    """Free-weight reference: finetunes the network ``init_model`` decodes to."""

    def __init__(self, pools=None, init_model=None, arch=None, task_id=1, epochs=15, batch_size=32,
                 optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=1e-5, nesterov=False,
                 milestones=(), gamma=0.1, random_state=0):
        self.pools = pools
        self.init_model = init_model
        self.arch = arch
        self.task_id = task_id
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.milestones = milestones
        self.gamma = gamma
        self.random_state = random_state

    def fit(self, X, y):
        if self.pools is None or self.init_model is None:
            raise InvalidInputError("DenseFinetuneClassifier needs pools and init_model")
        data = self._fit_data(X, y)
        self.network_, self.history_ = fit_dense(self.pools, self.init_model, data, len(self.classes_),
                                                 self._train_config(), self.random_state, self.task_id,
                                                 self.arch)
        return self

    def _logits(self, X):
        return self.network_.predict_logits(X)
