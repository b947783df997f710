"""Comparison pipelines: direct ridge on taxon distributions, and ridge on PCA weights."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .regression import (
    DEFAULT_LAMBDA_GRID,
    RidgeRegressor,
    fold_predictions,
    project_to_simplex,
)


class PCADecomposition(BaseEstimator, TransformerMixin):
    """Principal components by SVD of the centered data.

    Each component is signed so that its largest-magnitude entry is positive,
    which makes fitted models reproducible across LAPACK builds.

    Attributes
    ----------
    mean_ : ndarray of shape (V,)
    components_ : ndarray of shape (K, V)
        Orthonormal rows, by decreasing explained variance.
    explained_variance_ : ndarray of shape (K,)
        Sample variance (``ddof=1``) along each component.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, Y, y=None):
        Y = check_array(Y, dtype=np.float64)
        N, V = Y.shape
        K = self.n_components
        if not 1 <= K <= min(N, V):
            raise ValueError(f"n_components must lie in [1, {min(N, V)}], got {K}")
        self.mean_ = Y.mean(axis=0)
        _, s, Vt = np.linalg.svd(Y - self.mean_, full_matrices=False)
        comps = Vt[:K]
        pivot = np.abs(comps).argmax(axis=1)
        signs = np.sign(comps[np.arange(K), pivot])
        signs[signs == 0] = 1.0
        self.components_ = comps * signs[:, None]
        self.explained_variance_ = s[:K] ** 2 / max(N - 1, 1)
        self.n_features_in_ = V
        return self

    def transform(self, Y):
        check_is_fitted(self, "components_")
        Y = check_array(Y, dtype=np.float64)
        if Y.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {Y.shape[1]}")
        return (Y - self.mean_) @ self.components_.T

    def inverse_transform(self, W):
        check_is_fitted(self, "components_")
        W = check_array(W, dtype=np.float64)
        if W.shape[1] != self.components_.shape[0]:
            raise ValueError(f"expected {self.components_.shape[0]} weights, got {W.shape[1]}")
        return W @ self.components_ + self.mean_


def pca_fit(Y, K):
    return PCADecomposition(K).fit(Y)


def pca_transform(model, Y):
    return model.transform(Y)


def pca_inverse(model, W):
    return model.inverse_transform(W)


def pca_regression_pipeline(X, Y, K, fold_plan, lambda_grid=DEFAULT_LAMBDA_GRID,
                            train_mask=None):
    """Held-out taxon distributions from ridge on the first ``K`` PCA weights.

    PCA is refit on each fold's training rows only. Back-projected
    predictions are clipped and renormalized onto the simplex.
    """
    X = check_array(X, dtype=np.float64)
    Y = check_array(Y, dtype=np.float64)
    if train_mask is None:
        train_mask = np.ones(len(X), dtype=bool)
    pred = np.full(Y.shape, np.nan)
    for fold in fold_plan:
        rows = fold.train[train_mask[fold.train]]
        pca = PCADecomposition(K).fit(Y[rows])
        reg = RidgeRegressor(lambda_grid=lambda_grid).fit(X[rows], pca.transform(Y[rows]))
        pred[fold.test] = pca.inverse_transform(reg.predict(X[fold.test]))
    if np.isnan(pred).any():
        raise ValueError("fold plan does not cover every row")
    return project_to_simplex(pred)


def direct_regression_pipeline(X, Y, fold_plan, lambda_grid=DEFAULT_LAMBDA_GRID,
                               train_mask=None):
    """Held-out taxon distributions from ridge fitted straight on ``Y``."""
    return project_to_simplex(fold_predictions(X, Y, fold_plan, lambda_grid, train_mask))
