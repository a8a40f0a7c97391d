"""scikit-learn compatible wrapper around the DFAN head."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import ClassSplit, FeatureDataset, SemanticMatrix
from .inference import CombineConfig, class_scores, czsl_predict, gzsl_predict
from .model import LOSS_TERMS, DfanParams, forward
from .tensor import no_grad
from .training import TrainConfig, train


def check_regions(X, global_features=None, D=None):
    """Validate region features (n, N, D) and the matching global vectors.

    Global vectors default to the region mean (global average pooling).
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected region features of shape (n_samples, N, D), got {X.shape}")
    if D is not None and X.shape[2] != D:
        raise ValueError(f"X has feature width {X.shape[2]}, estimator was fitted with {D}")
    if global_features is None:
        g = X.mean(axis=1)
    else:
        g = check_array(global_features, dtype=np.float32, ensure_all_finite=True)
        if g.shape != (X.shape[0], X.shape[2]):
            raise ValueError(f"global features {g.shape} do not match X {X.shape}")
    return X, g


def predict_attributes(params: DfanParams, local, global_, attention_axis="region", batch=512):
    """Local and global attribute predictions as float arrays of shape (n, M)."""
    a_l, a_g = [], []
    with no_grad():
        for s in range(0, len(local), batch):
            out = forward(params, local[s : s + batch], global_[s : s + batch], attention_axis)
            a_l.append(out.a_hat_local.data)
            a_g.append(out.a_hat_global.data)
    M = params.M
    if not a_l:
        return np.zeros((0, M), np.float32), np.zeros((0, M), np.float32)
    return np.concatenate(a_l), np.concatenate(a_g)


class DFANClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Zero-shot classifier over region features.

    ``fit`` needs the class semantic matrix and the seen/unseen split as
    side information. Predictions are semantic-matrix row indices; ``mode``
    selects generalized (all classes, calibrated by ``gamma``) or
    conventional (unseen classes only) prediction. ``transform`` returns the
    combined attribute prediction ``beta1 * a_local + beta2 * a_global``.
    """

    def __init__(
        self,
        lam=0.1,
        beta1=0.5,
        beta2=0.5,
        gamma=0.0,
        epochs=80,
        batch_size=32,
        lr=1e-3,
        weight_decay=1e-5,
        hidden1=None,
        hidden2=None,
        attention_axis="region",
        normalize_input=False,
        bias_learner=True,
        shared_predictor=False,
        loss_terms=LOSS_TERMS,
        mode="gzsl",
        random_state=0,
    ):
        self.lam = lam
        self.beta1 = beta1
        self.beta2 = beta2
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.attention_axis = attention_axis
        self.normalize_input = normalize_input
        self.bias_learner = bias_learner
        self.shared_predictor = shared_predictor
        self.loss_terms = loss_terms
        self.mode = mode
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            beta1=self.beta1,
            beta2=self.beta2,
            gamma=self.gamma,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            hidden1=self.hidden1,
            hidden2=self.hidden2,
            seed=0 if self.random_state is None else int(self.random_state),
            attention_axis=self.attention_axis,
            normalize_input=self.normalize_input,
            bias_learner=self.bias_learner,
            shared_predictor=self.shared_predictor,
            loss_terms=tuple(self.loss_terms),
        )

    def fit(self, X, y, *, semantic: SemanticMatrix, split: ClassSplit, global_features=None, log=None):
        X, g = check_regions(X, global_features)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        ds = FeatureDataset(X, g, y, role="train")
        cfg = self.train_config()
        self.params_, self.history_ = train(ds, semantic, split, cfg, log=log)
        self._set_fitted(semantic, split, X.shape[1], X.shape[2])
        return self

    @classmethod
    def from_params(cls, params: DfanParams, semantic: SemanticMatrix, split: ClassSplit, **kwargs):
        """Wrap already-trained parameters (e.g. a loaded checkpoint)."""
        est = cls(**kwargs)
        est.params_ = params
        est.history_ = []
        est._set_fitted(semantic, split, None, params.D)
        return est

    def _set_fitted(self, semantic, split, N, D):
        if semantic.n_attributes != self.params_.M:
            raise ValueError(
                f"semantic matrix has {semantic.n_attributes} attributes, head predicts {self.params_.M}"
            )
        self.semantic_ = semantic
        self.split_ = split
        self.classes_ = np.arange(semantic.n_classes)
        self.n_regions_ = N
        self.n_dims_ = D

    def _inputs(self, X, global_features):
        check_is_fitted(self, "params_")
        X, g = check_regions(X, global_features, D=self.params_.D)
        if self.normalize_input:
            ds = FeatureDataset(X, g, np.zeros(len(X), dtype=np.int64), role="test-seen").normalized()
            X, g = ds.local, ds.global_
        return X, g

    def predict_attributes(self, X, global_features=None):
        X, g = self._inputs(X, global_features)
        return predict_attributes(self.params_, X, g, self.attention_axis)

    def combine_config(self) -> CombineConfig:
        return CombineConfig(self.beta1, self.beta2, self.gamma)

    def transform(self, X, global_features=None):
        a_l, a_g = self.predict_attributes(X, global_features)
        return self.beta1 * a_l + self.beta2 * a_g

    def decision_function(self, X, global_features=None):
        a_l, a_g = self.predict_attributes(X, global_features)
        return class_scores(a_l, a_g, self.semantic_, self.combine_config())

    def predict(self, X, global_features=None):
        scores = self.decision_function(X, global_features)
        if self.mode == "czsl":
            return np.atleast_1d(czsl_predict(scores, self.split_))
        if self.mode == "gzsl":
            return np.atleast_1d(gzsl_predict(scores, self.split_, self.gamma))
        raise ValueError(f"mode must be 'gzsl' or 'czsl', got {self.mode!r}")
