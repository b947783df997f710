"""KL scoring, per-year summaries, method comparison and hyperparameter sweeps."""

import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .baselines import direct_regression_pipeline, pca_regression_pipeline
from .community import CommunityModel, Hyperparameters, active_communities, train
from .corpus import ObservationCorpus, as_dates, date_years, iso_dates
from .preprocessing import FeatureConfig, build_feature_table
from .regression import DEFAULT_LAMBDA_GRID, align, run_fold_protocol, year_folds

logger = logging.getLogger(__name__)

METHODS = ("community", "direct", "pca")
THREADS_ENV = "ECOTOPICS_THREADS"


def kl_divergence(p_est, q_true, epsilon=1e-10):
    """KL(p_est || q_true) in nats, after flooring both at ``epsilon`` and renormalizing.

    Works row-wise on 2-D input.
    """
    p = np.asarray(p_est, dtype=np.float64)
    q = np.asarray(q_true, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    p = np.maximum(p, epsilon)
    q = np.maximum(q, epsilon)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    kl = np.sum(p * np.log(p / q), axis=-1)
    # rounding can leave tiny negatives when p == q
    return np.maximum(kl, 0.0)


def boxplot_stats(values):
    """Median, quartiles (linear interpolation) and 1.5 IQR whiskers clamped to the data."""
    x = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_lo": float(max(x.min(), q1 - 1.5 * iqr)),
        "whisker_hi": float(min(x.max(), q3 + 1.5 * iqr)),
        "n_days": int(x.size),
    }


@dataclass
class EvaluationReport:
    dates: np.ndarray
    kl: np.ndarray
    per_year: dict
    overall_mean: float

    @property
    def per_day(self):
        return list(zip(iso_dates(self.dates), self.kl.tolist()))

    @property
    def overall_median(self):
        return float(np.median(self.kl))

    def to_dict(self):
        return {
            "per_day": [{"date": d, "kl_nats": k} for d, k in self.per_day],
            "per_year": {str(y): s for y, s in self.per_year.items()},
            "overall_mean": self.overall_mean,
        }


def score_predictions(predicted, observed, dates=None, epsilon=1e-10):
    """Per-day KL(predicted || observed) with per-year boxplot summaries.

    ``observed`` is an :class:`ObservationCorpus` (dates taken from it) or a
    matrix of daily distributions with ``dates`` given separately.
    """
    if isinstance(observed, ObservationCorpus):
        dates = observed.dates if dates is None else dates
        observed = observed.distributions()
    if dates is None:
        raise ValueError("dates are required")
    dates = as_dates(dates)
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.shape != observed.shape or len(dates) != len(predicted):
        raise ValueError("predictions, observations and dates must align")
    kl = kl_divergence(predicted, observed, epsilon)
    years = date_years(dates)
    per_year = {int(y): boxplot_stats(kl[years == y]) for y in np.unique(years)}
    return EvaluationReport(dates, kl, per_year, float(kl.mean()))


@dataclass
class AlignedData:
    """Count days and environment days matched on date."""

    dates: np.ndarray
    corpus_index: np.ndarray
    env_index: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    train_mask: np.ndarray
    folds: object


def align_data(corpus, env, max_missing_fraction=0.5):
    ia, ib = align(corpus.dates, env.dates)
    dates = corpus.dates[ia]
    return AlignedData(
        dates=dates,
        corpus_index=ia,
        env_index=ib,
        X=env.features[ib],
        Y=corpus.distributions()[ia],
        train_mask=env.usable_rows(max_missing_fraction)[ib],
        folds=year_folds(dates),
    )


@dataclass
class MethodComparison:
    data: AlignedData
    predictions: dict
    reports: dict
    theta: np.ndarray
    theta_hat: np.ndarray
    regressors: list
    n_components: int


def compare_methods(corpus, env, model, lambda_grid=DEFAULT_LAMBDA_GRID, n_components=None,
                    max_missing_fraction=0.5, methods=METHODS, active_threshold=0.01):
    """Run the community, direct and PCA pipelines on identical folds and score them.

    The PCA baseline uses as many components as the model has active
    communities unless ``n_components`` is given.
    """
    data = align_data(corpus, env, max_missing_fraction)
    if n_components is None:
        n_components = max(1, active_communities(model, active_threshold))
    n_components = min(n_components, data.Y.shape[1], int(data.train_mask.sum()) - 1)
    theta = np.asarray(model.theta)[data.corpus_index]
    preds, reports = {}, {}
    theta_hat, regressors = None, []
    for method in methods:
        if method == "community":
            preds[method], theta_hat, regressors = run_fold_protocol(
                data.X, theta, model, data.folds, lambda_grid, data.train_mask,
                return_details=True,
            )
        elif method == "direct":
            preds[method] = direct_regression_pipeline(
                data.X, data.Y, data.folds, lambda_grid, data.train_mask
            )
        elif method == "pca":
            preds[method] = pca_regression_pipeline(
                data.X, data.Y, n_components, data.folds, lambda_grid, data.train_mask
            )
        else:
            raise ValueError(f"unknown method {method!r}")
        reports[method] = score_predictions(preds[method], data.Y, data.dates)
    return MethodComparison(data, preds, reports, theta, theta_hat, regressors, n_components)


def derive_seed(global_seed, component):
    """Per-component 64-bit seed from a global seed and a component name."""
    key = int.from_bytes(hashlib.sha256(component.encode()).digest()[:4], "little")
    ss = np.random.SeedSequence(int(global_seed), spawn_key=(key,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SweepConfig:
    alpha: list = field(default_factory=lambda: [0.1])
    beta: list = field(default_factory=lambda: [0.05])
    gamma: list = field(default_factory=lambda: [1e-4])
    g_radius: list = field(default_factory=lambda: [3])
    n_sweeps: int = 200
    max_communities: int = 20
    seed: int = 0
    seed_policy: str = "fixed"  # "fixed": one training seed for all points; "per_point"
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    active_threshold: float = 0.01
    max_missing_fraction: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "g_radius"):
            value = getattr(self, name)
            value = [value] if np.isscalar(value) else list(value)
            if not value:
                raise ValueError(f"{name} grid is empty")
            setattr(self, name, value)
        if not self.lambda_grid:
            raise ValueError("lambda grid is empty")
        if self.seed_policy not in ("fixed", "per_point"):
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def grid_points(self):
        points = []
        combos = itertools.product(self.alpha, self.beta, self.gamma, self.g_radius)
        for i, (a, b, g, r) in enumerate(combos):
            seed = derive_seed(self.seed, "train" if self.seed_policy == "fixed" else f"train/{i}")
            points.append(Hyperparameters(alpha=a, beta=b, gamma=g, g_radius=r,
                                          max_communities=self.max_communities,
                                          n_sweeps=self.n_sweeps, seed=seed))
        return points


@dataclass
class SweepEntry:
    index: int
    hyper: Hyperparameters
    status: str
    mean_kl: float = float("nan")
    median_kl: float = float("nan")
    n_communities: int = 0
    active: int = 0
    error: str = ""

    def to_row(self):
        h = self.hyper
        return {
            "index": self.index, "alpha": h.alpha, "beta": h.beta, "gamma": h.gamma,
            "g_radius": h.g_radius, "n_sweeps": h.n_sweeps, "seed": h.seed,
            "status": self.status, "mean_kl": self.mean_kl, "median_kl": self.median_kl,
            "n_communities": self.n_communities, "active_communities": self.active,
            "error": self.error,
        }


@dataclass
class SweepResult:
    best_model: CommunityModel
    best_entry: SweepEntry
    leaderboard: list
    best_comparison: MethodComparison

    def leaderboard_frame(self):
        return pd.DataFrame([e.to_row() for e in self.leaderboard])


def thread_count(n_jobs=None):
    if n_jobs is None:
        n_jobs = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(n_jobs))


def _data_fingerprint(corpus, env, sweep):
    h = hashlib.sha256()
    for arr in (corpus.dates.astype(np.int64), corpus.counts, env.dates.astype(np.int64),
                env.features, env.missing_mask):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([list(map(float, sweep.lambda_grid)), sweep.active_threshold,
                         sweep.max_missing_fraction]).encode())
    return h.hexdigest()[:16]


def hyperparameter_sweep(corpus, env, sweep, n_jobs=None, cache_dir=None):
    """Train one model per grid point and rank them by held-out mean KL.

    Ranking is ascending in mean KL, then fewer active communities, then
    smaller ``g_radius``; failed points are listed last. With ``cache_dir``,
    finished points are stored and reused, so an interrupted sweep can be
    resumed with identical results.
    """
    from .io import model_from_dict, model_to_dict  # local: io imports evaluation types

    points = sweep.grid_points()
    fingerprint = _data_fingerprint(corpus, env, sweep)

    def cache_path(hyper):
        key = hashlib.sha256(
            json.dumps([fingerprint, hyper.to_dict()], sort_keys=True).encode()
        ).hexdigest()[:24]
        return os.path.join(cache_dir, f"point-{key}.json")

    def run(i, hyper):
        if cache_dir is not None and os.path.exists(cache_path(hyper)):
            with open(cache_path(hyper), encoding="utf-8") as fh:
                cached = json.load(fh)
            entry = SweepEntry(index=i, hyper=hyper, **cached["entry"])
            model = model_from_dict(cached["model"]) if cached["model"] else None
            return entry, model
        try:
            model = train(corpus, hyper)
            cmp_ = compare_methods(corpus, env, model, sweep.lambda_grid,
                                   max_missing_fraction=sweep.max_missing_fraction,
                                   methods=("community",))
            report = cmp_.reports["community"]
            entry = SweepEntry(i, hyper, "ok", report.overall_mean, report.overall_median,
                               model.n_communities,
                               active_communities(model, sweep.active_threshold))
        except Exception as exc:  # one bad grid point must not end the sweep
            logger.warning("grid point %d failed: %s", i, exc)
            entry, model = SweepEntry(i, hyper, "failed", error=f"{type(exc).__name__}: {exc}"), None
        if cache_dir is not None:
            os.makedirs(cache_dir, exist_ok=True)
            payload = {
                "entry": {k: getattr(entry, k) for k in
                          ("status", "mean_kl", "median_kl", "n_communities", "active", "error")},
                "model": model_to_dict(model) if model is not None else None,
            }
            tmp = cache_path(hyper) + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(payload, fh)
            os.replace(tmp, cache_path(hyper))
        return entry, model

    workers = thread_count(n_jobs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: run(*a), enumerate(points)))
    else:
        results = [run(i, h) for i, h in enumerate(points)]

    ok = [r for r in results if r[0].status == "ok"]
    failed = [r for r in results if r[0].status != "ok"]
    if not ok:
        raise RuntimeError("every grid point failed")
    ok.sort(key=lambda r: (r[0].mean_kl, r[0].active, r[0].hyper.g_radius, r[0].index))
    failed.sort(key=lambda r: r[0].index)
    best_entry, best_model = ok[0]
    best_cmp = compare_methods(corpus, env, best_model, sweep.lambda_grid,
                               max_missing_fraction=sweep.max_missing_fraction,
                               methods=("community",))
    return SweepResult(best_model, best_entry, [r[0] for r in ok + failed], best_cmp)


def synthetic_corpus(K_true=3, T=400, V=15, obs_per_day=300, season_period=365.25, seed=0,
                     n_distractors=10, amplitude=3.0, phi_concentration=0.1,
                     start="2009-01-01", return_frame=False):
    """Seasonal synthetic data with known communities.

    Community ``k``'s log-weight on a day is ``amplitude * cos(2 pi doy / period - 2 pi k / K)``;
    day mixtures are the softmax of these. Community taxon distributions
    come from a sparse symmetric Dirichlet. The environment frame has
    ``n_distractors`` pure-noise columns; the seasonal signal enters through
    the day-of-year columns appended by :func:`build_feature_table`.

    Returns ``(corpus, env_table, theta_true, phi_true)`` and, with
    ``return_frame``, the raw environment DataFrame as a fifth element.
    """
    rng = np.random.default_rng(seed)
    dates = np.datetime64(start, "D") + np.arange(T)
    doy = (dates - dates.astype("datetime64[Y]").astype("datetime64[D]")).astype(np.float64)
    phi = rng.dirichlet(np.full(V, phi_concentration), size=K_true)
    phi = np.maximum(phi, 0.0)
    phi /= phi.sum(axis=1, keepdims=True)
    phase = 2 * np.pi * np.arange(K_true) / K_true
    logits = amplitude * np.cos(2 * np.pi * doy[:, None] / season_period - phase[None, :])
    theta = np.exp(logits - logits.max(axis=1, keepdims=True))
    theta /= theta.sum(axis=1, keepdims=True)
    probs = theta @ phi
    probs /= probs.sum(axis=1, keepdims=True)
    counts = np.vstack([rng.multinomial(obs_per_day, p) for p in probs])
    names = [f"taxon_{v:02d}" for v in range(V)]
    corpus = ObservationCorpus(dates, counts, names)

    frame = pd.DataFrame({"date": pd.to_datetime(dates)})
    for j in range(n_distractors):
        frame[f"noise_{j:02d}"] = rng.normal(size=T)
    env = build_feature_table(frame, FeatureConfig())
    if return_frame:
        return corpus, env, theta, phi, frame
    return corpus, env, theta, phi
