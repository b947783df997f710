"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import json
import os
import time

import numpy as np
import pandas as pd
import pytest

from conftest import consecutive_dates
from ecotopics.baselines import pca_fit
from ecotopics.cli import main
from ecotopics.community import (
    Hyperparameters,
    active_communities,
    gibbs_sweep,
    initialize_sampler,
    train,
)
from ecotopics.corpus import ObservationCorpus
from ecotopics.evaluation import compare_methods, kl_divergence, synthetic_corpus
from ecotopics.regression import align, loo_residuals, predict_taxa, year_folds
from oracles import (
    best_permutation_cosines,
    collapsed_lda_posterior,
    refit_loo_residuals,
    sweep_stationary_distribution,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail
    return report


def _empirical_configs(corpus, hyper, n_samples, burn_in=1000):
    state = initialize_sampler(corpus, hyper)
    n, K = state.z.size, hyper.max_communities
    weights = K ** np.arange(n - 1, -1, -1)
    freq = np.zeros(K ** n)
    for s in range(burn_in + n_samples):
        gibbs_sweep(state, corpus, hyper)
        if s >= burn_in:
            freq[state.z @ weights] += 1
    return freq / n_samples


def test_1_sampler_oracle(verdict):
    start = time.perf_counter()
    n_samples = 100_000
    cases = []
    # no pooling: the exact collapsed joint posterior of fixed-K LDA
    counts = [[2, 1, 0], [0, 1, 1]]
    corpus = ObservationCorpus(consecutive_dates(2), counts)
    hyper = Hyperparameters(alpha=0.5, beta=0.3, gamma=0, g_radius=0, max_communities=2,
                            seed=11)
    exact, _ = collapsed_lda_posterior(counts, 2, 0.5, 0.3)
    emp = _empirical_configs(corpus, hyper, n_samples)
    cases.append(("g=0, 5 obs", 0.5 * np.abs(emp - exact).sum()))
    # pooling over neighbouring days, with a calendar gap
    counts = [[1, 1], [1, 0], [0, 1], [1, 0]]
    dates = np.array(["2010-01-01", "2010-01-02", "2010-01-03", "2010-01-06"],
                     dtype="datetime64[D]")
    corpus = ObservationCorpus(dates, counts)
    hyper = Hyperparameters(alpha=0.2, beta=0.4, gamma=0, g_radius=1, max_communities=2,
                            seed=12)
    exact, _ = sweep_stationary_distribution(counts, dates.astype(np.int64), 2, 0.2, 0.4, 1)
    emp = _empirical_configs(corpus, hyper, n_samples)
    cases.append(("g=1, 5 obs", 0.5 * np.abs(emp - exact).sum()))
    elapsed = time.perf_counter() - start
    worst = max(tv for _, tv in cases)
    detail = ", ".join(f"{name}: TV {tv:.4f}" for name, tv in cases)
    verdict(1, "sampler matches enumerated posterior", worst <= 0.02 and elapsed < 60,
            f"{detail}; {n_samples} sweeps each; {elapsed:.1f}s")


def test_2_synthetic_recovery(verdict):
    start = time.perf_counter()
    corpus, _, _, phi_true = synthetic_corpus(K_true=3, T=400, V=15, obs_per_day=300, seed=0)
    model = train(corpus, Hyperparameters(n_sweeps=200, seed=0))
    cos = best_permutation_cosines(model.phi, phi_true)
    active = active_communities(model, 0.01)
    elapsed = time.perf_counter() - start
    ok = cos.size == 3 and cos.min() > 0.9 and active in {2, 3, 4} and elapsed < 300
    verdict(2, "synthetic communities recovered", ok,
            f"cosines {np.round(cos, 4).tolist()}, active {active}, "
            f"{model.n_communities} communities, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def seed_runs():
    runs = []
    for seed in range(5):
        corpus, env, _, _ = synthetic_corpus(K_true=3, T=400, V=15, obs_per_day=300,
                                             seed=seed, n_distractors=10)
        model = train(corpus, Hyperparameters(n_sweeps=200, seed=seed))
        runs.append((corpus, env, model, compare_methods(corpus, env, model)))
    return runs


def test_3_method_ordering(verdict, seed_runs):
    held, rows = 0, []
    for seed, (_, _, _, cmp_) in enumerate(seed_runs):
        m = {k: r.overall_mean for k, r in cmp_.reports.items()}
        ok = m["community"] < m["direct"] and m["community"] <= m["pca"]
        held += ok
        rows.append(f"seed {seed}: {m['community']:.3f}/{m['direct']:.3f}/{m['pca']:.3f}")
    verdict(3, "community KL below direct and at most PCA", held >= 4,
            f"held in {held}/5; community/direct/pca mean KL " + "; ".join(rows))


def test_4_loocv_identity(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        D = int(rng.integers(1, 11))
        N = int(rng.integers(D + 3, 31)) if D + 3 <= 30 else 30
        K = int(rng.integers(1, 4))
        X, Y = rng.normal(size=(N, D)), rng.normal(size=(N, K))
        lam = float(10 ** rng.uniform(-3, 3))
        diff = np.abs(loo_residuals(X, Y, lam) - refit_loo_residuals(X, Y, lam)).max()
        worst = max(worst, diff)
    verdict(4, "closed-form LOO residuals equal refits", worst <= 1e-8,
            f"max |difference| {worst:.2e} over 100 problems")


def test_5_pca_oracle(verdict):
    rng = np.random.default_rng(7)
    worst, monotone = 0.0, True
    for _ in range(50):
        N, V = int(rng.integers(4, 31)), int(rng.integers(2, 11))
        Y = rng.normal(size=(N, V)) * rng.uniform(0.1, 3, size=V)
        K = min(N - 1, V)
        pca = pca_fit(Y, K)
        w, vecs = np.linalg.eigh(np.cov(Y, rowvar=False))
        order = np.argsort(w)[::-1][:K]
        ref = vecs[:, order].T
        ref *= np.sign(np.sum(ref * pca.components_, axis=1))[:, None]
        worst = max(worst, np.abs(pca.components_ - ref).max(),
                    np.abs(pca.explained_variance_ - w[order]).max())
        errs = [np.sum((Y - p.inverse_transform(p.transform(Y))) ** 2)
                for p in (pca_fit(Y, k) for k in range(1, K + 1))]
        monotone &= all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    verdict(5, "PCA matches covariance eigendecomposition", worst <= 1e-8 and monotone,
            f"max deviation {worst:.2e} over 50 matrices; reconstruction monotone: {monotone}")


def _stochastic_ok(m):
    m = np.atleast_2d(m)
    return bool((m >= 0).all() and np.abs(m.sum(axis=1) - 1).max() <= 1e-9)


def test_6_distribution_validity(verdict, seed_runs):
    checked, failures = 0, []

    def check(name, m):
        nonlocal checked
        checked += 1
        if not _stochastic_ok(m):
            failures.append(name)

    extra = []
    for gamma, g in ((0.0, 0), (1.0, 2), (1e-4, 7)):
        corpus, env, _, _ = synthetic_corpus(T=380, V=9, obs_per_day=40, seed=9)
        model = train(corpus, Hyperparameters(gamma=gamma, g_radius=g, n_sweeps=20))
        extra.append((corpus, env, model, compare_methods(corpus, env, model)))
    kl_ok = True
    for i, (corpus, env, model, cmp_) in enumerate(seed_runs + extra):
        check(f"run {i} theta", model.theta)
        check(f"run {i} phi", model.phi)
        check(f"run {i} fitted taxa", model.taxon_distribution())
        check(f"run {i} theta_hat", cmp_.theta_hat)
        for method, pred in cmp_.predictions.items():
            check(f"run {i} {method}", pred)
            kl = cmp_.reports[method].kl
            kl_ok &= bool((kl >= 0).all())
            kl_ok &= bool((kl_divergence(pred, pred) <= 1e-12).all())
        reg = cmp_.regressors[0]
        x = np.random.default_rng(i).normal(scale=5, size=(50, env.n_features))
        check(f"run {i} predict_taxa", predict_taxa(reg, model, x))
    ok = not failures and kl_ok
    verdict(6, "all emitted distributions valid", ok,
            f"{checked} matrices checked, failures {failures or 'none'}, KL checks {kl_ok}")


def test_7_smoothness(verdict):
    corpus, _, _, _ = synthetic_corpus(K_true=3, T=400, V=15, obs_per_day=300, seed=0)
    radii = (0, 3, 7)
    change = {g: [] for g in radii}
    for seed in range(20):
        for g in radii:
            model = train(corpus, Hyperparameters(g_radius=g, seed=seed))
            change[g].append(np.abs(np.diff(model.theta, axis=0)).sum(axis=1).mean())
    means = [float(np.mean(change[g])) for g in radii]
    ok = all(b <= a + 0.01 for a, b in zip(means, means[1:]))
    verdict(7, "day-to-day theta change non-increasing in g", ok,
            ", ".join(f"g={g}: {m:.4f}" for g, m in zip(radii, means)) + " over 20 seeds")


def _tree(directory):
    out = {}
    for base, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


def test_8_determinism(verdict, tmp_path):
    corpus, _, _, _, frame = synthetic_corpus(T=400, V=10, obs_per_day=60, seed=3,
                                              n_distractors=4, return_frame=True)
    counts = pd.DataFrame(corpus.counts, columns=corpus.taxon_names)
    counts.insert(0, "date", [str(d) for d in corpus.dates])
    counts.to_csv(tmp_path / "counts.csv", index=False)
    frame.to_csv(tmp_path / "env.csv", index=False)
    common = ["--counts", tmp_path / "counts.csv", "--seed", 17, "--sweeps", 40]
    grid = json.dumps({"gamma": [1e-4, 1e-2], "g_radius": [0, 3, 7]})
    runs = {
        "train": ["train"],
        "evaluate": ["evaluate", "--env", tmp_path / "env.csv"],
        "sweep": ["sweep", "--env", tmp_path / "env.csv", "--grid", grid],
    }
    mismatched, compared = [], 0
    for name, args in runs.items():
        trees = []
        for rep, threads in enumerate((1, 6, 6)):
            out = tmp_path / f"{name}-{rep}"
            extra = ["--threads", threads] if name == "sweep" else []
            assert main([str(a) for a in args + common + extra + ["--out", out]]) == 0
            trees.append(_tree(out))
        for other in trees[1:]:
            compared += len(trees[0])
            if trees[0] != other:
                mismatched.append(name)
    verdict(8, "byte-identical outputs across runs and thread counts", not mismatched,
            f"{compared} file comparisons, sweep at 1 and 6 threads; "
            f"mismatches: {mismatched or 'none'}")


def test_9_protocol_shape(verdict):
    rng = np.random.default_rng(5)
    problems = []
    for trial in range(25):
        start = np.datetime64("2000-01-01") + int(rng.integers(0, 3000))
        days = np.unique(start + rng.integers(0, 365 * int(rng.integers(2, 6)), size=300))
        years = days.astype("datetime64[Y]").astype(int) + 1970
        if np.unique(years).size < 2:
            continue
        plan = year_folds(days)
        if plan.years != sorted(set(years.tolist())):
            problems.append(f"trial {trial}: fold years")
        seen = np.zeros(len(days), dtype=int)
        for fold in plan:
            seen[fold.test] += 1
            union = np.union1d(fold.test, fold.train)
            if np.intersect1d(fold.test, fold.train).size or union.size != len(days):
                problems.append(f"trial {trial}: fold {fold.year} not complementary")
            if not (years[fold.test] == fold.year).all():
                problems.append(f"trial {trial}: fold {fold.year} test years")
        if not (seen == 1).all():
            problems.append(f"trial {trial}: coverage")
    all_days = np.arange(np.datetime64("2008-06-01"), np.datetime64("2016-12-31"))
    counts_days = all_days[(all_days >= np.datetime64("2009-01-01"))
                           & (all_days <= np.datetime64("2016-06-20"))]
    ia, ib = align(counts_days, all_days)
    plan = year_folds(counts_days[ia])
    sizes = {f.year: len(f.test) for f in plan}
    ok = not problems and len(plan) == 8 and sizes[2016] == 172
    verdict(9, "leave-one-year-out folds", ok,
            f"{len(plan)} folds for 2009-2016, {sizes[2016]} test days in 2016; "
            f"random fixtures: {problems or 'all complementary'}")
