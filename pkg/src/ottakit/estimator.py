"""scikit-learn style wrapper around source pretraining.

``DualHeadRegressor.fit`` pretrains the dual-head network on raw segments
``X`` (n, L) and blood pressures ``y`` (n, 2) in mmHg; ``predict`` returns
mmHg. The online adaptation loop itself is a stream process and is driven
through :func:`ottakit.engine.run_subject` with ``to_pretrained()``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import PretrainedModel
from .exceptions import ConfigurationError
from .model import forward_predict, forward_recon, init_params, pretrain, random_masks
from .signals import (
    BPLabel,
    NormStats,
    SignalSegment,
    StreamEvent,
    SubjectStream,
    apply_norm,
    denormalize_labels,
    fit_norm,
)


class DualHeadRegressor(RegressorMixin, BaseEstimator):
    """Masked-reconstruction + regression transformer trained by sequential SSL/SL SGD."""

    def __init__(self, d=16, h=32, E=2, epochs=100, batch_size=32, lr_ssl=1e-2, lr_sl=1e-2, mask_ratio=0.5,
                 random_state=None):
        self.d = d
        self.h = h
        self.E = E
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_ssl = lr_ssl
        self.lr_sl = lr_sl
        self.mask_ratio = mask_ratio
        self.random_state = random_state

    def _validate_geometry(self, L):
        if L % self.d:
            raise ConfigurationError(f"segment length {L} is not a multiple of d={self.d}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 2:
            raise ValueError(f"y must have two columns (sbp, dbp), got shape {y.shape}")
        self._validate_geometry(X.shape[1])
        pairs = [(SignalSegment(x, "fit", i), BPLabel(*yy)) for i, (x, yy) in enumerate(zip(X, y))]
        self.stats_ = fit_norm(pairs)
        stream = SubjectStream("fit", [], [StreamEvent(seg, lab, lab) for seg, lab in pairs])
        rng = np.random.default_rng(self.random_state)
        S = X.shape[1] // self.d
        params = init_params(self.d, self.h, S, self.E, rng=rng)
        self.history_ = []
        self.params_ = pretrain(
            params, [stream], self.stats_, epochs=self.epochs, batch_size=self.batch_size, lr_ssl=self.lr_ssl,
            lr_sl=self.lr_sl, mask_ratio=self.mask_ratio, rng=rng,
            callback=lambda ep, ssl, sl, _p: self.history_.append((ssl, sl)),
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _tokens(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        Z = apply_norm(X, self.stats_)
        return Z.reshape(X.shape[0], -1, self.d)

    def predict(self, X):
        tokens = self._tokens(X)
        z = forward_predict(self.params_, tokens)
        return denormalize_labels(z, self.stats_)

    def reconstruct(self, X, mask_ratio=None, random_state=None):
        """Masked reconstruction in normalized signal units: ``(tokens, recon, mask)``."""
        tok = self._tokens(X)
        rng = np.random.default_rng(random_state)
        mask = random_masks(rng, tok.shape[0], tok.shape[1], self.mask_ratio if mask_ratio is None else mask_ratio)
        return tok, forward_recon(self.params_, tok, mask), mask

    def to_pretrained(self) -> PretrainedModel:
        check_is_fitted(self, "params_")
        return PretrainedModel({k: v.copy() for k, v in self.params_.items()}, self.stats_)

    @classmethod
    def from_pretrained(cls, pretrained: PretrainedModel, **kwargs) -> "DualHeadRegressor":
        g = pretrained.geometry
        est = cls(d=g["d"], h=g["h"], E=g["E"], **kwargs)
        est.params_ = {k: v.copy() for k, v in pretrained.params.items()}
        est.stats_ = pretrained.stats if isinstance(pretrained.stats, NormStats) else NormStats(**pretrained.stats)
        est.n_features_in_ = g["S"] * g["d"]
        est.history_ = []
        return est
