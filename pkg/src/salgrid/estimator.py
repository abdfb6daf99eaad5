"""scikit-learn style wrapper around the model and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics as M
from .exceptions import ConfigError
from .losses import LossWeights
from .model import ModelConfig, predict
from .trainer import SaliencyDataset, TrainConfig, kfold_split, train_loop


def check_images(X):
    """Validate a batch of images shaped (N, 3, H, W) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (n_samples, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_maps(y, X, label="y"):
    """Validate per-image maps shaped (N, H, W) against the images ``X``."""
    y = np.asarray(y, dtype=np.float64)
    expected = (X.shape[0],) + X.shape[2:]
    if y.shape != expected:
        raise ValueError(f"{label} must have shape {expected}, got {y.shape}")
    if not np.all(np.isfinite(y)) or y.min() < 0:
        raise ValueError(f"{label} must be finite and nonnegative")
    return y


class SaliencyRegressor(RegressorMixin, BaseEstimator):
    """Saliency model estimator.

    ``fit(X, y, fixations=...)`` trains on images ``X`` (N, 3, H, W),
    ground-truth density maps ``y`` (N, H, W) and binary fixation maps;
    ``predict(X)`` returns (N, H, W) maps in (0, 1). ``score`` is the mean
    CC between predictions and ``y``.

    Parameters
    ----------
    variant : str
        Ablation variant name, e.g. ``"TranSalNet_Res"`` or ``"BaseNet"``.
    validation_fraction : float
        Share of the training items held out for early stopping; when it
        rounds to zero items the training set doubles as validation set.
    model_params : dict or None
        Extra :class:`ModelConfig` fields (channel widths, heads, ...).
    """

    def __init__(self, variant="TranSalNet_Res", epochs=30, batch_size=4, patience=5,
                 learning_rate=1e-5, lr_decay=0.1, lr_step_epochs=3, lambda_nss=-1.0,
                 lambda_kld=10.0, lambda_cc=-2.0, lambda_sim=-1.0, validation_fraction=0.1,
                 model_params=None, random_state=0):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_step_epochs = lr_step_epochs
        self.lambda_nss = lambda_nss
        self.lambda_kld = lambda_kld
        self.lambda_cc = lambda_cc
        self.lambda_sim = lambda_sim
        self.validation_fraction = validation_fraction
        self.model_params = model_params
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, patience=self.patience,
            base_lr=self.learning_rate, lr_factor=self.lr_decay, lr_every=self.lr_step_epochs,
            weights=LossWeights(self.lambda_nss, self.lambda_kld, self.lambda_cc, self.lambda_sim),
            seed=int(self.random_state or 0))

    def fit(self, X, y, fixations=None):
        X = check_images(X)
        y = check_maps(y, X)
        if fixations is None:
            raise ValueError("fixations are required (binary maps shaped like y)")
        fixations = check_maps(fixations, X, "fixations")
        h, w = X.shape[2:]
        try:
            config = ModelConfig.for_variant(self.variant, input_w=w, input_h=h,
                                             **(self.model_params or {}))
        except TypeError as err:
            raise ConfigError(str(err)) from None
        data = SaliencyDataset(X, y, fixations)
        n_val = int(round(self.validation_fraction * len(data)))
        if n_val == 0:
            train, val = data, data
        else:
            order = np.random.default_rng(self._train_config().seed).permutation(len(data))
            val, train = data.subset(np.sort(order[:n_val])), data.subset(np.sort(order[n_val:]))
        result = train_loop(train, val, config, self._train_config())
        self.config_ = config
        self.params_ = result.params
        self.history_ = result.history
        self.n_epochs_ = result.state.epoch + 1
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X)
        return predict(X, self.config_, self.params_)

    def score(self, X, y, sample_weight=None):
        maps = check_maps(y, check_images(X))
        preds = self.predict(X)
        scores = np.array([M.cc(p, g) for p, g in zip(preds, maps)])
        return float(np.average(scores, weights=sample_weight))

    def evaluate(self, X, y, fixations, seed=0):
        """Full six-metric report, sAUC negatives drawn from the other images."""
        preds = self.predict(X)
        return M.evaluate_batch(list(preds), list(check_maps(y, X)),
                                list(check_maps(fixations, X, "fixations")), seed=seed)


def cross_validate(estimator, X, y, fixations, k=10, seed=0):
    """k-fold protocol: fold i tests on subset i and validates on subset i+1.

    Returns one aggregate metric dict per fold.
    """
    X = check_images(X)
    plan = kfold_split(len(X), k, seed)
    out = []
    for i in range(plan.k):
        tr, va, te = plan.assignment(i)
        est = estimator.__class__(**estimator.get_params())
        config = ModelConfig.for_variant(est.variant, input_w=X.shape[3], input_h=X.shape[2],
                                         **(est.model_params or {}))
        result = train_loop(SaliencyDataset(X[tr], y[tr], fixations[tr]),
                            SaliencyDataset(X[va], y[va], fixations[va]),
                            config, est._train_config())
        est.config_, est.params_, est.history_ = config, result.params, result.history
        out.append(est.evaluate(X[te], y[te], fixations[te], seed=seed).aggregate())
    return out
