"""Temporally smoothed non-parametric topic model over daily taxon counts.

Each individual observation on day ``t`` carries a latent community label.
Labels are resampled by collapsed Gibbs sampling, with the per-day community
counts pooled over a window of ``g_radius`` calendar days on either side so
that neighbouring days share community mixtures. New communities are opened
with weight proportional to ``gamma`` until ``max_communities`` is reached.
"""

from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import InvariantViolation, check_positive
from .corpus import ObservationCorpus, as_dates, date_ordinals

__all__ = [
    "Hyperparameters",
    "SamplerState",
    "CommunityModel",
    "CommunityTopicModel",
    "initialize_sampler",
    "neighborhood_counts",
    "conditional_distribution",
    "gibbs_sweep",
    "estimate_theta",
    "estimate_phi",
    "ml_taxon_distribution",
    "train",
    "active_communities",
    "log_likelihood",
]


@dataclass(frozen=True)
class Hyperparameters:
    alpha: float = 0.1
    beta: float = 0.05
    gamma: float = 1e-4
    g_radius: int = 3
    max_communities: int = 20
    n_sweeps: int = 200
    seed: int = 0

    def __post_init__(self):
        check_positive("alpha", self.alpha)
        check_positive("beta", self.beta)
        check_positive("gamma", self.gamma, allow_zero=True)
        if int(self.g_radius) != self.g_radius or self.g_radius < 0:
            raise ValueError(f"g_radius must be a non-negative integer, got {self.g_radius!r}")
        if int(self.max_communities) != self.max_communities or self.max_communities < 1:
            raise ValueError(f"max_communities must be >= 1, got {self.max_communities!r}")
        if int(self.n_sweeps) != self.n_sweeps or self.n_sweeps < 1:
            raise ValueError(f"n_sweeps must be >= 1, got {self.n_sweeps!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        # normalise numeric types so equality and JSON output are stable
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("g_radius", "max_communities", "n_sweeps", "seed"):
            object.__setattr__(self, name, int(getattr(self, name)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SamplerState:
    """Collapsed Gibbs sampler state.

    Observations are stored flat, ordered day-major, then taxon, then
    replicate. Count arrays are allocated for ``max_communities`` columns;
    only the first ``k_active`` are in use.
    """

    obs_day: np.ndarray
    obs_taxon: np.ndarray
    z: np.ndarray
    n_tk: np.ndarray
    n_kv: np.ndarray
    n_k: np.ndarray
    k_active: int
    # pooled[t] caches neighborhood_counts(state, t, g_radius)
    pooled: np.ndarray
    window_ptr: np.ndarray
    window_idx: np.ndarray
    rng: np.random.Generator = field(repr=False)

    @property
    def n_days(self):
        return self.n_tk.shape[0]

    @property
    def n_taxa(self):
        return self.n_kv.shape[1]

    @property
    def assignments(self):
        """Per-day lists of community labels."""
        bounds = np.searchsorted(self.obs_day, np.arange(self.n_days + 1))
        return [self.z[bounds[t]:bounds[t + 1]].tolist() for t in range(self.n_days)]

    def check_consistency(self):
        """Verify the count identities against a direct tally of ``z``."""
        T, V, Kmax = self.n_days, self.n_taxa, self.n_k.shape[0]
        n_tk = np.zeros((T, Kmax), dtype=np.int64)
        n_kv = np.zeros((Kmax, V), dtype=np.int64)
        np.add.at(n_tk, (self.obs_day, self.z), 1)
        np.add.at(n_kv, (self.z, self.obs_taxon), 1)
        if not (
            np.array_equal(n_tk, self.n_tk)
            and np.array_equal(n_kv, self.n_kv)
            and np.array_equal(n_kv.sum(axis=1), self.n_k)
            and np.array_equal(n_tk.sum(axis=0), self.n_k)
        ):
            raise InvariantViolation("count matrices disagree with assignments")
        if (self.z >= self.k_active).any() or self.k_active > Kmax:
            raise InvariantViolation("assignment outside the active communities")
        pooled = _pool(self.n_tk, self.window_ptr, self.window_idx)
        if not np.array_equal(pooled, self.pooled):
            raise InvariantViolation("pooled neighbourhood counts are stale")


@dataclass
class CommunityModel:
    """Point estimates of a trained community model.

    ``theta`` is the T x K day-community matrix and ``phi`` the K x V
    community-taxon matrix; ``theta @ phi`` gives the fitted daily taxon
    distributions.
    """

    theta: np.ndarray
    phi: np.ndarray
    hyper: Hyperparameters
    dates: np.ndarray
    taxon_names: list
    day_totals: np.ndarray = None
    loglik_trace: np.ndarray = None
    k_active_trace: np.ndarray = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.dates = as_dates(self.dates)
        self.taxon_names = list(self.taxon_names)
        if self.theta.ndim != 2 or self.phi.ndim != 2:
            raise ValueError("theta and phi must be 2-D")
        if self.theta.shape[1] != self.phi.shape[0]:
            raise ValueError(
                f"theta has {self.theta.shape[1]} communities but phi has {self.phi.shape[0]}"
            )
        if self.day_totals is not None:
            self.day_totals = np.asarray(self.day_totals, dtype=np.int64)

    @property
    def n_communities(self):
        return self.phi.shape[0]

    def taxon_distribution(self):
        return ml_taxon_distribution(self)


def _day_windows(dates, g_radius):
    """CSR lists of days within ``g_radius`` calendar days of each day."""
    d = date_ordinals(dates)
    lo = np.searchsorted(d, d - g_radius, side="left")
    hi = np.searchsorted(d, d + g_radius, side="right")
    ptr = np.zeros(len(d) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(hi - lo)
    idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]).astype(np.int64)
    return ptr, idx


def _pool(n_tk, ptr, idx):
    pooled = np.zeros_like(n_tk)
    for t in range(n_tk.shape[0]):
        pooled[t] = n_tk[idx[ptr[t]:ptr[t + 1]]].sum(axis=0)
    return pooled


def initialize_sampler(corpus, hyper, k_init=None):
    """Assign every observation a uniformly random community.

    Labels are drawn from ``{0, ..., k_init - 1}`` with
    ``k_init = min(2, max_communities)`` unless given explicitly.
    """
    if corpus.n_days == 0 or corpus.n_observations == 0:
        raise ValueError("cannot initialize a sampler on an empty corpus")
    if k_init is None:
        k_init = min(2, hyper.max_communities)
    if not 1 <= k_init <= hyper.max_communities:
        raise ValueError(f"k_init must lie in [1, {hyper.max_communities}], got {k_init}")

    T, V = corpus.counts.shape
    Kmax = hyper.max_communities
    flat = corpus.counts.ravel()
    cells = np.repeat(np.arange(T * V), flat)
    obs_day = (cells // V).astype(np.int64)
    obs_taxon = (cells % V).astype(np.int64)

    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    z = rng.integers(0, k_init, size=len(cells)).astype(np.int64)

    n_tk = np.zeros((T, Kmax), dtype=np.int64)
    n_kv = np.zeros((Kmax, V), dtype=np.int64)
    np.add.at(n_tk, (obs_day, z), 1)
    np.add.at(n_kv, (z, obs_taxon), 1)
    ptr, idx = _day_windows(corpus.dates, hyper.g_radius)
    return SamplerState(
        obs_day=obs_day,
        obs_taxon=obs_taxon,
        z=z,
        n_tk=n_tk,
        n_kv=n_kv,
        n_k=n_kv.sum(axis=1),
        k_active=int(k_init),
        pooled=_pool(n_tk, ptr, idx),
        window_ptr=ptr,
        window_idx=idx,
        rng=rng,
    )


def neighborhood_counts(state, t, g_radius=None, dates=None):
    """Community counts pooled over days within ``g_radius`` calendar days of ``t``.

    Without ``g_radius``/``dates`` the window the state was built with is used.
    Computed directly from ``n_tk`` (not the sampler's cache).
    """
    if not 0 <= t < state.n_days:
        raise IndexError(f"day index {t} out of range")
    if g_radius is None:
        days = state.window_idx[state.window_ptr[t]:state.window_ptr[t + 1]]
    else:
        if dates is None:
            raise ValueError("dates are required when g_radius is given")
        d = date_ordinals(dates)
        days = np.flatnonzero(np.abs(d - d[t]) <= g_radius)
    return state.n_tk[days, : state.k_active].sum(axis=0)


def conditional_distribution(state, t, v, hyper):
    """Collapsed conditional over communities for one observation of taxon ``v`` on day ``t``.

    The observation must already have been removed from every count
    structure. The last entry is the "open a new community" option; it is
    omitted when ``gamma == 0`` or the cap has been reached.
    """
    K = state.k_active
    V = state.n_taxa
    m = neighborhood_counts(state, t)
    n_kv = state.n_kv[:K, v]
    n_k = state.n_k[:K]
    if (m < 0).any() or (n_kv < 0).any() or (n_k < 0).any():
        raise InvariantViolation(f"negative count at day {t}, taxon {v}")
    w = (m + hyper.alpha) * (n_kv + hyper.beta) / (n_k + V * hyper.beta)
    if hyper.gamma > 0 and K < hyper.max_communities:
        w = np.append(w, hyper.gamma / V)
    return w / w.sum()


@numba.njit(cache=True, nogil=True)
def _sweep_kernel(obs_day, obs_taxon, z, n_tk, n_kv, n_k, pooled, win_ptr, win_idx,
                  k_active, alpha, beta, gamma, max_k, u):
    V = n_kv.shape[1]
    vbeta = V * beta
    new_weight = gamma / V
    cum = np.empty(max_k + 1)
    for i in range(z.shape[0]):
        t = obs_day[i]
        v = obs_taxon[i]
        k = z[i]
        n_tk[t, k] -= 1
        n_kv[k, v] -= 1
        n_k[k] -= 1
        for j in range(win_ptr[t], win_ptr[t + 1]):
            pooled[win_idx[j], k] -= 1
        if n_tk[t, k] < 0 or n_kv[k, v] < 0 or n_k[k] < 0 or pooled[t, k] < 0:
            return -1 - i

        total = 0.0
        for kk in range(k_active):
            total += (pooled[t, kk] + alpha) * (n_kv[kk, v] + beta) / (n_k[kk] + vbeta)
            cum[kk] = total
        n_opts = k_active
        if gamma > 0.0 and k_active < max_k:
            total += new_weight
            cum[k_active] = total
            n_opts += 1

        r = u[i] * total
        k = n_opts - 1
        for kk in range(n_opts):
            if r < cum[kk]:
                k = kk
                break
        if k == k_active:
            k_active += 1

        z[i] = k
        n_tk[t, k] += 1
        n_kv[k, v] += 1
        n_k[k] += 1
        for j in range(win_ptr[t], win_ptr[t + 1]):
            pooled[win_idx[j], k] += 1
    return k_active


def gibbs_sweep(state, corpus=None, hyper=None):
    """Resample every observation once, in storage order. Mutates and returns ``state``."""
    if hyper is None:
        raise ValueError("hyper is required")
    u = state.rng.random(state.z.shape[0])
    k = _sweep_kernel(
        state.obs_day, state.obs_taxon, state.z, state.n_tk, state.n_kv, state.n_k,
        state.pooled, state.window_ptr, state.window_idx, state.k_active,
        hyper.alpha, hyper.beta, hyper.gamma, hyper.max_communities, u,
    )
    if k < 0:
        i = -1 - k
        raise InvariantViolation(
            f"negative count while resampling observation {i} "
            f"(day {state.obs_day[i]}, taxon {state.obs_taxon[i]})"
        )
    state.k_active = int(k)
    return state


def estimate_theta(state, hyper, columns=None):
    """Smoothed day-community proportions ``(n_tk + alpha) / (N_t + K alpha)``."""
    n = state.n_tk[:, : state.k_active] if columns is None else state.n_tk[:, columns]
    K = n.shape[1]
    return (n + hyper.alpha) / (n.sum(axis=1, keepdims=True) + K * hyper.alpha)


def estimate_phi(state, hyper, columns=None):
    """Smoothed community-taxon proportions ``(n_kv + beta) / (n_k + V beta)``."""
    n = state.n_kv[: state.k_active] if columns is None else state.n_kv[columns]
    V = n.shape[1]
    return (n + hyper.beta) / (n.sum(axis=1, keepdims=True) + V * hyper.beta)


def ml_taxon_distribution(model):
    """Fitted daily taxon distributions ``theta @ phi``."""
    theta, phi = np.asarray(model.theta), np.asarray(model.phi)
    if theta.ndim != 2 or phi.ndim != 2 or theta.shape[1] != phi.shape[0]:
        raise ValueError(f"cannot multiply theta {theta.shape} by phi {phi.shape}")
    return theta @ phi


def log_likelihood(counts, theta, phi):
    """Multinomial log-likelihood of ``counts`` under ``theta @ phi``, in nats."""
    p = theta @ phi
    nz = counts > 0
    return float(np.sum(counts[nz] * np.log(p[nz])))


def train(corpus, hyper, k_init=None, callback=None):
    """Fit a community model by ``hyper.n_sweeps`` collapsed Gibbs sweeps.

    Communities left empty at the end are dropped from ``theta`` and ``phi``.
    ``callback(sweep, state)``, if given, runs after every sweep.
    """
    if not isinstance(hyper, Hyperparameters):
        hyper = Hyperparameters(**hyper)
    state = initialize_sampler(corpus, hyper, k_init=k_init)
    loglik = np.empty(hyper.n_sweeps)
    k_trace = np.empty(hyper.n_sweeps, dtype=np.int64)
    for s in range(hyper.n_sweeps):
        gibbs_sweep(state, corpus, hyper)
        loglik[s] = log_likelihood(
            corpus.counts, estimate_theta(state, hyper), estimate_phi(state, hyper)
        )
        k_trace[s] = state.k_active
        if callback is not None:
            callback(s, state)

    keep = np.flatnonzero(state.n_k[: state.k_active] > 0)
    return CommunityModel(
        theta=estimate_theta(state, hyper, columns=keep),
        phi=estimate_phi(state, hyper, columns=keep),
        hyper=hyper,
        dates=corpus.dates.copy(),
        taxon_names=list(corpus.taxon_names),
        day_totals=corpus.day_totals.copy(),
        loglik_trace=loglik,
        k_active_trace=k_trace,
    )


def community_mass(model):
    """Share of all observations attributed to each community."""
    weights = model.day_totals if model.day_totals is not None else np.ones(len(model.theta))
    mass = weights @ model.theta
    return mass / weights.sum()


def active_communities(model, threshold=0.01):
    """Number of communities carrying more than ``threshold`` of the observation mass."""
    if not 0 <= threshold < 1:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    return int(np.sum(community_mass(model) > threshold))


class CommunityTopicModel(BaseEstimator):
    """Scikit-learn style wrapper around :func:`train`.

    Parameters
    ----------
    alpha : float
        Dirichlet prior on each day's community mixture.
    beta : float
        Dirichlet prior on each community's taxon distribution.
    gamma : float
        Weight for opening a new community; 0 disables growth.
    g_radius : int
        Half-width, in calendar days, of the window whose community counts
        are pooled when resampling a day's observations.
    max_communities : int
        Hard cap on the number of communities.
    n_sweeps : int
        Number of Gibbs sweeps.
    random_state : int
        Seed for the sampler.
    k_init : int or None
        Communities used at initialization; ``None`` means ``min(2, max_communities)``.

    Attributes
    ----------
    model_ : CommunityModel
    theta_ : ndarray of shape (T, K)
    components_ : ndarray of shape (K, V)
        Community-taxon distributions (``phi``).
    n_communities_ : int
    loglik_trace_ : ndarray of shape (n_sweeps,)
    """

    def __init__(self, alpha=0.1, beta=0.05, gamma=1e-4, g_radius=3, max_communities=20,
                 n_sweeps=200, random_state=0, k_init=None):
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.g_radius = g_radius
        self.max_communities = max_communities
        self.n_sweeps = n_sweeps
        self.random_state = random_state
        self.k_init = k_init

    def _hyper(self):
        return Hyperparameters(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, g_radius=self.g_radius,
            max_communities=self.max_communities, n_sweeps=self.n_sweeps,
            seed=self.random_state,
        )

    def fit(self, X, y=None, dates=None):
        """Fit on an :class:`ObservationCorpus` or a T x V count matrix.

        Count matrices are treated as consecutive days unless ``dates`` is given.
        """
        if not isinstance(X, ObservationCorpus):
            X = np.asarray(X)
            if dates is None:
                dates = np.datetime64("2000-01-01") + np.arange(X.shape[0])
            X = ObservationCorpus(dates, X)
        model = train(X, self._hyper(), k_init=self.k_init)
        self.model_ = model
        self.theta_ = model.theta
        self.components_ = model.phi
        self.n_communities_ = model.n_communities
        self.n_features_in_ = model.phi.shape[1]
        self.loglik_trace_ = model.loglik_trace
        return self

    def fit_transform(self, X, y=None, dates=None):
        return self.fit(X, dates=dates).theta_

    def reconstruct(self):
        """Fitted daily taxon distributions for the training days."""
        check_is_fitted(self, "model_")
        return ml_taxon_distribution(self.model_)

    def active_communities(self, threshold=0.01):
        check_is_fitted(self, "model_")
        return active_communities(self.model_, threshold)
