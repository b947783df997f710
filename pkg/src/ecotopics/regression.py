"""Ridge regression from environment features to community distributions."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_targets
from .corpus import as_dates, date_ordinals, date_years

DEFAULT_LAMBDA_GRID = tuple(np.logspace(-3, 3, 13).tolist())


class SingularSystemError(np.linalg.LinAlgError):
    pass


def align(corpus_dates, env_dates):
    """Index pairs ``(i, j)`` with ``corpus_dates[i] == env_dates[j]``."""
    a = date_ordinals(corpus_dates)
    b = date_ordinals(env_dates)
    common, ia, ib = np.intersect1d(a, b, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise ValueError("count and environment data share no dates")
    return ia, ib


def _center(X, Y):
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    return X - x_mean, Y - y_mean, x_mean, y_mean


def ridge_fit(X, Y, lam):
    """Closed-form multi-output ridge with an unpenalized intercept.

    Returns ``(weights, intercept)`` with ``weights`` of shape (D, K).
    """
    X = check_features(X)
    Y = check_targets(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("ridge regression needs at least 2 training rows")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    Xc, Yc, x_mean, y_mean = _center(X, Y)
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(Xc) < X.shape[1]:
        if np.linalg.matrix_rank(Xc) < X.shape[0] - 1:
            raise SingularSystemError(
                "X'X is singular (collinear features); use a regularization strength > 0"
            )
        # fewer rows than parameters: minimum-norm interpolating solution
        W = np.linalg.pinv(Xc) @ Yc
        return W, y_mean - x_mean @ W
    W = np.linalg.solve(gram, Xc.T @ Yc)
    return W, y_mean - x_mean @ W


def loo_residuals(X, Y, lam):
    """Closed-form hold-one-out residuals ``(y_i - yhat_i) / (1 - h_ii)``.

    Rows with unit leverage get ``inf`` residuals.
    """
    X = check_features(X)
    Y = check_targets(Y)
    return _loo_from_svd(*_svd_parts(X, Y), lam)


def _svd_parts(X, Y):
    Xc, Yc, _, _ = _center(X, Y)
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    return U, s, Yc, X.shape[0]


def _loo_from_svd(U, s, Yc, n, lam):
    nonzero = s > 1e-12 * max(s.max(initial=0.0), 1.0)
    shrink = np.where(nonzero, s**2 / (s**2 + lam + ~nonzero), 0.0)
    UtY = U.T @ Yc
    fitted = U @ (shrink[:, None] * UtY)
    leverage = 1.0 / n + (U**2) @ shrink
    denom = 1.0 - leverage
    resid = Yc - fitted
    with np.errstate(divide="ignore", invalid="ignore"):
        out = resid / denom[:, None]
    out[denom <= 1e-12] = np.inf
    return out


def loocv_select_lambda(X, Y, grid=DEFAULT_LAMBDA_GRID, return_scores=False):
    """Grid value minimizing mean squared hold-one-out residual; ties go to the larger value."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if min(grid) < 0:
        raise ValueError("lambda grid values must be non-negative")
    X = check_features(X)
    Y = check_targets(Y)
    parts = _svd_parts(X, Y)
    scores = np.array([np.mean(_loo_from_svd(*parts, lam) ** 2) for lam in grid])
    finite = np.isfinite(scores)
    if not finite.any():
        raise SingularSystemError("every grid value gives unit leverage; use larger lambdas")
    lowest = scores[finite].min()
    tied = np.flatnonzero(finite & (scores <= lowest + 1e-12 * max(lowest, 1e-300)))
    best = max(tied, key=lambda i: grid[i])
    if return_scores:
        return grid[best], scores
    return grid[best]


def project_to_simplex(v):
    """Clip negatives to zero and renormalize; all-nonpositive rows become uniform."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, None)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    totals = v.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(totals > 0, v / totals, 1.0 / v.shape[1])
    return out[0] if single else out


class RidgeRegressor(BaseEstimator, RegressorMixin):
    """Multi-output ridge regression with one shared regularization strength.

    Parameters
    ----------
    lam : float or None
        Regularization strength. ``None`` selects it from ``lambda_grid`` by
        closed-form hold-one-out cross validation.
    lambda_grid : sequence of float
    feature_names : sequence of str or None
    standardization : list or None
        Feature transforms the inputs were built with, carried along for
        serialization and for standardizing raw readings.

    Attributes
    ----------
    coef_ : ndarray of shape (D, K)
    intercept_ : ndarray of shape (K,)
    lambda_ : float
    loo_scores_ : ndarray or None
    """

    def __init__(self, lam=None, lambda_grid=DEFAULT_LAMBDA_GRID, feature_names=None,
                 standardization=None):
        self.lam = lam
        self.lambda_grid = lambda_grid
        self.feature_names = feature_names
        self.standardization = standardization

    def fit(self, X, Y):
        X = check_features(X)
        Y = check_targets(Y)
        self.loo_scores_ = None
        if self.lam is None:
            self.lambda_, self.loo_scores_ = loocv_select_lambda(
                X, Y, self.lambda_grid, return_scores=True
            )
        else:
            self.lambda_ = float(self.lam)
        self.coef_, self.intercept_ = ridge_fit(X, Y, self.lambda_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_features(X, self.n_features_in_)
        return X @ self.coef_ + self.intercept_

    def predict_simplex(self, X):
        return project_to_simplex(self.predict(X))

    @property
    def n_outputs_(self):
        return self.coef_.shape[1]


def predict_taxa(reg, model, x):
    """Taxon distribution(s) predicted from standardized features via the community model."""
    phi = np.asarray(model.phi)
    x = np.asarray(x, dtype=np.float64)
    if reg.coef_.shape[1] != phi.shape[0]:
        raise ValueError(
            f"regressor predicts {reg.coef_.shape[1]} communities, model has {phi.shape[0]}"
        )
    if x.shape[-1] != reg.coef_.shape[0]:
        raise ValueError(f"expected {reg.coef_.shape[0]} features, got {x.shape[-1]}")
    theta_hat = project_to_simplex(x @ reg.coef_ + reg.intercept_)
    return theta_hat @ phi


@dataclass
class Fold:
    year: int
    test: np.ndarray
    train: np.ndarray


@dataclass
class FoldPlan:
    folds: list

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    @property
    def years(self):
        return [f.year for f in self.folds]


def year_folds(dates):
    """One fold per calendar year: that year's days are the test set."""
    years = date_years(as_dates(dates))
    distinct = np.unique(years)
    if distinct.size < 2:
        raise ValueError("leave-one-year-out needs at least 2 distinct years")
    idx = np.arange(len(years))
    return FoldPlan([Fold(int(y), idx[years == y], idx[years != y]) for y in distinct])


def fold_predictions(X, Y, fold_plan, lambda_grid=DEFAULT_LAMBDA_GRID, train_mask=None,
                     return_models=False):
    """Leave-one-year-out ridge predictions of ``Y`` from ``X``.

    For each fold, lambda is chosen by hold-one-out cross validation on the
    training days, the model is refit, and the test days are predicted.
    ``train_mask`` excludes rows from training (they are still predicted).
    Returns raw (unprojected) predictions shaped like ``Y``.
    """
    X = check_features(X)
    Y = check_targets(Y)
    if train_mask is None:
        train_mask = np.ones(len(X), dtype=bool)
    pred = np.full(Y.shape, np.nan)
    models = []
    for fold in fold_plan:
        rows = fold.train[train_mask[fold.train]]
        reg = RidgeRegressor(lambda_grid=lambda_grid).fit(X[rows], Y[rows])
        pred[fold.test] = reg.predict(X[fold.test])
        models.append(reg)
    if np.isnan(pred).any():
        raise ValueError("fold plan does not cover every row")
    return (pred, models) if return_models else pred


def run_fold_protocol(X, theta, model, fold_plan, lambda_grid=DEFAULT_LAMBDA_GRID,
                      train_mask=None, return_details=False):
    """Held-out taxon distributions predicted through the community decomposition.

    ``theta`` holds the regression targets for the aligned rows of ``X``;
    ``model`` supplies ``phi``. With ``return_details`` the projected
    community predictions and per-fold regressors are returned as well.
    """
    raw, models = fold_predictions(X, theta, fold_plan, lambda_grid, train_mask,
                                   return_models=True)
    theta_hat = project_to_simplex(raw)
    taxa = theta_hat @ np.asarray(model.phi)
    return (taxa, theta_hat, models) if return_details else taxa
