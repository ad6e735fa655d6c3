"""scikit-learn compatible classifier wrapping the adapter network.

Inputs are packed cohort matrices (see :func:`hyda.cohort.pack`): one row per
subject, per-modality column blocks described by ``layout``. Predictions are
transductive: the hypergraph is built over all rows passed to ``predict``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numerics as nm
from .cohort import layout_width
from .config import RunConfig
from .errors import ConfigError, LabelError, ShapeError
from .heads import Prediction
from .model import HyDANet
from .optim import AdamW

# RunConfig fields that do not affect a single fit
_RUN_ONLY = {"folds", "modalities"}


def make_batches(order, batch_size, k):
    """Split a permutation into mini-batches; a short tail (< k) joins the previous batch."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < k:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


class HyDAClassifier(ClassifierMixin, BaseEstimator):
    """Hypergraph dynamic adapter classifier.

    Parameters mirror :class:`hyda.config.RunConfig`; ``layout`` is the tuple of
    modality descriptors describing the packed columns.
    """

    def __init__(self, layout=None, num_classes=None, k=20, C=54, C_hid=None, C_out=8, C_res=None,
                 tab_embed_dim=16, lr=1e-3, weight_decay_hg=0.01, dropout_p=0.5, batch_size=30,
                 epochs=100, focal_gamma=2.0, focal_alpha=None, seed=0, backend="hypergraph",
                 ablation="full_hyda", schedule=None, zero_fusion_init=False):
        self.layout = layout
        self.num_classes = num_classes
        self.k = k
        self.C = C
        self.C_hid = C_hid
        self.C_out = C_out
        self.C_res = C_res
        self.tab_embed_dim = tab_embed_dim
        self.lr = lr
        self.weight_decay_hg = weight_decay_hg
        self.dropout_p = dropout_p
        self.batch_size = batch_size
        self.epochs = epochs
        self.focal_gamma = focal_gamma
        self.focal_alpha = focal_alpha
        self.seed = seed
        self.backend = backend
        self.ablation = ablation
        self.schedule = schedule
        self.zero_fusion_init = zero_fusion_init

    @classmethod
    def from_config(cls, config: RunConfig, layout, num_classes=None, seed=None):
        kw = {f.name: getattr(config, f.name) for f in dataclasses.fields(config) if f.name not in _RUN_ONLY}
        if seed is not None:
            kw["seed"] = seed
        return cls(layout=tuple(layout), num_classes=num_classes, **kw)

    def run_config(self) -> RunConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(RunConfig) if f.name not in _RUN_ONLY}
        return RunConfig(**kw)

    def _validate_input(self, X, y=None):
        if self.layout is None:
            raise ConfigError("HyDAClassifier needs a modality layout")
        if y is None:
            X = check_array(X, dtype=np.float64)
        else:
            X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != layout_width(self.layout):
            raise ShapeError(f"X has {X.shape[1]} columns, layout expects {layout_width(self.layout)}")
        return X, y

    def _labels(self, y):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integer class indices")
        y = np.asarray(y, dtype=np.int64)
        if y.min() < 0 or y.max() >= self.n_classes_:
            raise LabelError(f"labels must lie in [0, {self.n_classes_})")
        return y

    def fit(self, X, y, eval_set=None):
        """Train on (X, y); with ``eval_set=(X_val, y_val)`` keep the lowest-validation-loss state."""
        X, y = self._validate_input(X, y)
        config = self.run_config()
        self.n_classes_ = int(self.num_classes or (int(np.max(y)) + 1))
        if self.n_classes_ < 2:
            raise LabelError("need at least two classes")
        self.classes_ = np.arange(self.n_classes_)
        y = self._labels(y)
        if len(X) < config.k:
            raise ConfigError(f"k={config.k} exceeds the {len(X)} training subjects")
        if eval_set is not None:
            X_val, y_val = self._validate_input(*eval_set)
            y_val = self._labels(y_val)

        rng = np.random.default_rng(self.seed)
        net = HyDANet(config, self.layout, self.n_classes_, seed=self.seed)
        opt = AdamW(net.params, lr=config.lr, decay={"hypergraph": config.weight_decay_hg})
        schedule = config.schedule
        history = {"train_loss": [], "val_loss": [], "lr": []}
        best, best_loss, best_epoch, stale = None, np.inf, -1, 0

        for epoch in range(config.epochs):
            lr = schedule.lr_at(config.lr, epoch) if schedule else config.lr
            losses, sizes = [], []
            for idx in make_batches(rng.permutation(len(X)), config.batch_size, config.k):
                net.params.zero_grad()
                out = net.forward(X[idx], training=True, rng=rng)
                loss = net.loss(out, y[idx]).total
                nm.backward(loss)
                opt.step(lr)
                losses.append(float(loss.data))
                sizes.append(len(idx))
            history["train_loss"].append(float(np.average(losses, weights=sizes)))
            history["lr"].append(lr)
            if eval_set is None:
                continue
            with nm.no_grad():
                val_loss = float(net.loss(net.forward(X_val), y_val).total.data)
            history["val_loss"].append(val_loss)
            if val_loss < best_loss:
                best, best_loss, best_epoch, stale = net.params.state_dict(), val_loss, epoch, 0
            else:
                stale += 1
                if schedule and schedule.early_stop_patience and stale >= schedule.early_stop_patience:
                    break

        if best is not None:
            net.params.load_state_dict(best)
        self.best_epoch_ = best_epoch if eval_set is not None else config.epochs - 1
        self.best_val_loss_ = best_loss if eval_set is not None else None
        self.history_ = history
        self.net_ = net
        self.optimizer_ = opt
        return self

    def predict_heads(self, X) -> Prediction:
        check_is_fitted(self, "net_")
        X, _ = self._validate_input(X)
        with nm.no_grad():
            out = self.net_.forward(X, training=False)
        get = lambda key: None if out[key] is None else out[key].data  # noqa: E731
        return Prediction(get("p_g"), get("p_d"), get("p_final"))

    def predict_proba(self, X):
        return self.predict_heads(X).p_final

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def loss(self, X, y) -> dict:
        check_is_fitted(self, "net_")
        X, y = self._validate_input(X, y)
        with nm.no_grad():
            return self.net_.loss(self.net_.forward(X), self._labels(y)).as_dict()

    def param_counts(self):
        check_is_fitted(self, "net_")
        return self.net_.param_counts()

