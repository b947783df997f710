import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import consecutive_dates
from ecotopics.community import CommunityModel, Hyperparameters
from ecotopics.regression import (
    DEFAULT_LAMBDA_GRID,
    RidgeRegressor,
    SingularSystemError,
    align,
    fold_predictions,
    loo_residuals,
    loocv_select_lambda,
    predict_taxa,
    project_to_simplex,
    ridge_fit,
    run_fold_protocol,
    year_folds,
)
from oracles import refit_loo_residuals


def _augmented_solve(X, Y, lam):
    """Intercept-augmented normal equations, intercept left unpenalized."""
    A = np.hstack([np.ones((len(X), 1)), X])
    R = lam * np.eye(A.shape[1])
    R[0, 0] = 0
    coef = np.linalg.solve(A.T @ A + R, A.T @ Y)
    return coef[1:], coef[0]


def _model(phi, T=1):
    phi = np.asarray(phi, dtype=float)
    K = phi.shape[0]
    return CommunityModel(np.full((T, K), 1 / K), phi, Hyperparameters(),
                          consecutive_dates(T), [f"t{v}" for v in range(phi.shape[1])])


class TestAlign:
    def test_identity(self):
        d = consecutive_dates(5)
        ia, ib = align(d, d)
        assert ia.tolist() == ib.tolist() == list(range(5))

    def test_disjoint(self):
        with pytest.raises(ValueError):
            align(consecutive_dates(3), consecutive_dates(3, "2010-01-01"))

    def test_interleaved(self):
        a = consecutive_dates(10)[[0, 2, 4, 6, 8]]
        b = consecutive_dates(10)[[1, 2, 3, 6, 7, 8, 9]]
        ia, ib = align(a, b)
        common = sorted(set(a.tolist()) & set(b.tolist()))
        assert len(common) == 3
        assert a[ia].tolist() == b[ib].tolist() == common


class TestRidgeFit:
    def test_normal_equation_oracle(self):
        rng = np.random.default_rng(0)
        X, Y = rng.normal(size=(20, 4)), rng.normal(size=(20, 3))
        W, b = ridge_fit(X, Y, 0.5)
        W_ref, b_ref = _augmented_solve(X, Y, 0.5)
        np.testing.assert_allclose(W, W_ref, atol=1e-9, rtol=0)
        np.testing.assert_allclose(b, b_ref, atol=1e-9, rtol=0)

    def test_centered_intercept_is_target_mean(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(30, 3))
        X -= X.mean(axis=0)
        Y = rng.normal(size=(30, 2))
        _, b = ridge_fit(X, Y, 2.0)
        np.testing.assert_allclose(b, Y.mean(axis=0), atol=1e-12)

    def test_infinite_shrinkage(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(15, 3)), rng.normal(size=(15, 2))
        W, b = ridge_fit(X, Y, 1e12)
        assert np.abs(W).max() < 1e-9
        np.testing.assert_allclose(X @ W + b, np.tile(Y.mean(axis=0), (15, 1)), atol=1e-9)

    def test_square_system_interpolates(self):
        rng = np.random.default_rng(3)
        X, Y = rng.normal(size=(5, 5)), rng.normal(size=(5, 2))
        W, b = ridge_fit(X, Y, 0.0)
        np.testing.assert_allclose(X @ W + b, Y, atol=1e-8)

    def test_collinear_needs_lambda(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(20, 1))
        X = np.hstack([x, 2 * x, rng.normal(size=(20, 1))])
        with pytest.raises(SingularSystemError, match="regularization"):
            ridge_fit(X, rng.normal(size=(20, 2)), 0.0)
        ridge_fit(X, rng.normal(size=(20, 2)), 0.1)

    def test_validation(self):
        with pytest.raises(ValueError):
            ridge_fit(np.ones((1, 2)), np.ones((1, 1)), 1.0)
        with pytest.raises(ValueError):
            ridge_fit(np.ones((3, 2)), np.ones((4, 1)), 1.0)
        with pytest.raises(ValueError):
            ridge_fit(np.eye(3), np.ones((3, 1)), -1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.integers(3, 25), st.integers(1, 6))
    def test_weight_shrinkage(self, seed, N, D):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(N, D)), rng.normal(size=(N, 2))
        norms = [np.linalg.norm(ridge_fit(X, Y, lam)[0]) for lam in DEFAULT_LAMBDA_GRID]
        assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(norms, norms[1:]))


class TestLoocv:
    def test_closed_form_matches_refit(self):
        rng = np.random.default_rng(5)
        X, Y = rng.normal(size=(15, 3)), rng.normal(size=(15, 2))
        for lam in (0.0, 0.3, 10.0):
            np.testing.assert_allclose(loo_residuals(X, Y, lam), refit_loo_residuals(X, Y, lam),
                                       atol=1e-8, rtol=0)

    def test_single_grid_value(self):
        X, Y = np.random.default_rng(6).normal(size=(10, 2)), np.ones((10, 1))
        assert loocv_select_lambda(X, Y, [3.7]) == 3.7

    def test_noiseless_picks_smallest(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(25, 3))
        Y = X @ rng.normal(size=(3, 2)) + 0.4
        grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0]
        lam, scores = loocv_select_lambda(X, Y, grid, return_scores=True)
        assert lam == 1e-3
        refit = [np.mean(refit_loo_residuals(X, Y, g) ** 2) for g in grid]
        assert all(a < b for a, b in zip(refit, refit[1:]))
        np.testing.assert_allclose(scores, refit, rtol=1e-6, atol=1e-20)

    def test_ties_go_to_larger_lambda(self):
        # constant targets: every lambda gives zero residual
        X = np.random.default_rng(8).normal(size=(12, 2))
        assert loocv_select_lambda(X, np.full((12, 2), 0.3), [0.01, 1.0, 100.0]) == 100.0

    def test_grid_validation(self):
        X, Y = np.eye(3), np.ones((3, 1))
        with pytest.raises(ValueError):
            loocv_select_lambda(X, Y, [])
        with pytest.raises(ValueError):
            loocv_select_lambda(X, Y, [-1.0])

    def test_estimator(self):
        rng = np.random.default_rng(9)
        X, Y = rng.normal(size=(40, 4)), rng.normal(size=(40, 3))
        reg = RidgeRegressor().fit(X, Y)
        assert reg.lambda_ == loocv_select_lambda(X, Y)
        assert reg.loo_scores_.shape == (len(DEFAULT_LAMBDA_GRID),)
        W, b = ridge_fit(X, Y, reg.lambda_)
        np.testing.assert_array_equal(reg.coef_, W)
        np.testing.assert_allclose(reg.predict(X), X @ W + b)
        assert RidgeRegressor(lam=2.0).fit(X, Y).lambda_ == 2.0
        with pytest.raises(ValueError):
            reg.predict(np.ones((2, 3)))


class TestYearFolds:
    def test_2009_to_mid_2016(self):
        dates = np.arange(np.datetime64("2009-01-01"), np.datetime64("2016-06-21"))
        plan = year_folds(dates)
        assert len(plan) == 8
        assert plan.years == list(range(2009, 2017))
        assert len(plan.folds[-1].test) == 172

    def test_complementary(self):
        dates = consecutive_dates(40, "2010-12-10")
        plan = year_folds(dates)
        assert len(plan) == 2
        for f in plan:
            assert sorted(np.concatenate([f.test, f.train])) == list(range(40))
        covered = np.concatenate([f.test for f in plan])
        assert sorted(covered) == list(range(40))

    def test_single_year(self):
        with pytest.raises(ValueError):
            year_folds(consecutive_dates(30))


class TestSimplex:
    def test_examples(self):
        np.testing.assert_array_equal(project_to_simplex([0.2, 0.8]), [0.2, 0.8])
        np.testing.assert_allclose(project_to_simplex([-0.1, 0.5, 0.6]), [0, 5 / 11, 6 / 11],
                                   atol=1e-15)
        np.testing.assert_array_equal(project_to_simplex([-1, -2]), [0.5, 0.5])

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_always_stochastic(self, v):
        p = project_to_simplex(v)
        assert (p >= 0).all() and abs(p.sum() - 1) <= 1e-12


class TestPredictTaxa:
    def _reg(self, W, b):
        reg = RidgeRegressor(lam=0.0)
        reg.coef_, reg.intercept_ = np.asarray(W, float), np.asarray(b, float)
        reg.n_features_in_ = reg.coef_.shape[0]
        return reg

    def test_single_community(self):
        phi = [[0.1, 0.6, 0.3]]
        reg = self._reg([[5.0], [-2.0]], [0.4])
        for x in ([0, 0], [3, -1], [-10, 7]):
            np.testing.assert_allclose(predict_taxa(reg, _model(phi), x), phi[0])

    def test_all_mean_inputs(self):
        phi = np.array([[0.5, 0.5], [0.9, 0.1]])
        reg = self._reg(np.ones((3, 2)), [-0.2, 0.6])
        out = predict_taxa(reg, _model(phi), np.zeros(3))
        np.testing.assert_allclose(out, project_to_simplex([-0.2, 0.6]) @ phi)

    def test_composition(self):
        rng = np.random.default_rng(10)
        phi = rng.dirichlet(np.ones(6), size=4)
        reg = self._reg(rng.normal(size=(5, 4)), rng.normal(size=4) * 0.2 + 0.25)
        for _ in range(20):
            x = rng.normal(size=5)
            raw = [sum(x[d] * reg.coef_[d, k] for d in range(5)) + reg.intercept_[k]
                   for k in range(4)]
            clipped = [max(r, 0.0) for r in raw]
            theta = ([c / sum(clipped) for c in clipped] if sum(clipped) > 0
                     else [0.25] * 4)
            expected = [sum(theta[k] * phi[k, v] for k in range(4)) for v in range(6)]
            out = predict_taxa(reg, _model(phi), x)
            np.testing.assert_allclose(out, expected, atol=1e-12)
            assert abs(out.sum() - 1) <= 1e-9

    def test_mismatch(self):
        reg = self._reg(np.ones((2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            predict_taxa(reg, _model(np.full((2, 2), 0.5)), np.zeros(2))
        with pytest.raises(ValueError):
            predict_taxa(reg, _model(np.full((3, 2), 0.5)), np.zeros(4))


def _ten_day_fixture():
    rng = np.random.default_rng(11)
    dates = np.concatenate([consecutive_dates(5, "2011-12-20"),
                            consecutive_dates(5, "2012-03-01")])
    X = rng.normal(size=(10, 2))
    theta = rng.dirichlet(np.ones(3), size=10)
    phi = rng.dirichlet(np.ones(4), size=3)
    return dates, X, theta, phi


class TestFoldProtocol:
    def test_scripted_two_fold(self):
        dates, X, theta, phi = _ten_day_fixture()
        grid = [0.01, 0.1, 1.0, 10.0]
        expected = np.empty((10, 4))
        for test in (np.arange(5), np.arange(5, 10)):
            train = np.setdiff1d(np.arange(10), test)
            errs = [np.mean(refit_loo_residuals(X[train], theta[train], g) ** 2) for g in grid]
            best = min(range(len(grid)), key=lambda i: (errs[i], -grid[i]))
            W, b = _augmented_solve(X[train], theta[train], grid[best])
            raw = X[test] @ W + b
            raw = np.clip(raw, 0, None)
            expected[test] = (raw / raw.sum(axis=1, keepdims=True)) @ phi
        out = run_fold_protocol(X, theta, _model(phi), year_folds(dates), grid)
        np.testing.assert_allclose(out, expected, atol=1e-10, rtol=0)

    def test_held_out_model_predicts_each_day(self):
        dates, X, theta, phi = _ten_day_fixture()
        plan = year_folds(dates)
        taxa, theta_hat, models = run_fold_protocol(X, theta, _model(phi), plan,
                                                    return_details=True)
        for fold, reg in zip(plan, models):
            np.testing.assert_allclose(theta_hat[fold.test],
                                       reg.predict_simplex(X[fold.test]))
            ref = RidgeRegressor().fit(X[fold.train], theta[fold.train])
            np.testing.assert_allclose(reg.coef_, ref.coef_)
        assert np.abs(taxa.sum(axis=1) - 1).max() <= 1e-9

    def test_shuffle_invariance(self):
        dates, X, theta, phi = _ten_day_fixture()
        plan = year_folds(dates)
        base = fold_predictions(X, theta, plan)
        perm = np.random.default_rng(12).permutation(10)
        inv = np.argsort(perm)
        shuffled = fold_predictions(X[perm], theta[perm], year_folds(dates[perm]))
        np.testing.assert_allclose(shuffled[inv], base, atol=1e-12)

    def test_train_mask_excludes_rows(self):
        dates, X, theta, phi = _ten_day_fixture()
        plan = year_folds(dates)
        mask = np.ones(10, dtype=bool)
        mask[[1, 7]] = False
        pred = fold_predictions(X, theta, plan, train_mask=mask)
        keep = [0, 2, 3, 4]
        ref = RidgeRegressor().fit(X[keep], theta[keep]).predict(X[5:])
        np.testing.assert_allclose(pred[5:], ref)
        assert np.isfinite(pred[[1, 7]]).all()
