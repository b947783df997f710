"""Daily taxon-count corpus container."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_counts


def as_dates(dates):
    """Coerce a sequence of dates (strings, ``datetime.date``, numpy) to ``datetime64[D]``."""
    return np.asarray(dates, dtype="datetime64[D]")


def date_ordinals(dates):
    return as_dates(dates).astype(np.int64)


def date_years(dates):
    return as_dates(dates).astype("datetime64[Y]").astype(np.int64) + 1970


def iso_dates(dates):
    return [str(d) for d in as_dates(dates)]


@dataclass
class ObservationCorpus:
    """Per-day bags of taxon observations in aggregated (count-matrix) form.

    Attributes
    ----------
    dates : ndarray of datetime64[D], shape (T,)
        Strictly increasing calendar dates. Missing days are simply absent.
    counts : ndarray of int64, shape (T, V)
        ``counts[t, v]`` is the number of observations of taxon ``v`` on day ``t``.
    taxon_names : list of str, length V
    """

    dates: np.ndarray
    counts: np.ndarray
    taxon_names: list = field(default_factory=list)

    def __post_init__(self):
        self.dates = as_dates(self.dates)
        self.counts = check_counts(self.counts)
        T, V = self.counts.shape
        if not self.taxon_names:
            self.taxon_names = [f"taxon_{v}" for v in range(V)]
        self.taxon_names = [str(n) for n in self.taxon_names]
        if self.dates.shape != (T,):
            raise ValueError(f"got {self.dates.shape[0]} dates for {T} count rows")
        if len(self.taxon_names) != V:
            raise ValueError(f"got {len(self.taxon_names)} taxon names for {V} columns")
        if T and np.any(np.diff(self.dates.astype(np.int64)) <= 0):
            raise ValueError("dates must be strictly increasing")
        if T and (self.counts.sum(axis=1) < 1).any():
            raise ValueError("every day must carry at least one observation")

    @property
    def n_days(self):
        return self.counts.shape[0]

    @property
    def n_taxa(self):
        return self.counts.shape[1]

    @property
    def day_totals(self):
        return self.counts.sum(axis=1)

    @property
    def n_observations(self):
        return int(self.counts.sum())

    def distributions(self):
        """Row-normalized daily taxon distributions, shape (T, V)."""
        return self.counts / self.day_totals[:, None]

    def subset(self, index):
        index = np.asarray(index)
        return ObservationCorpus(self.dates[index], self.counts[index], list(self.taxon_names))
