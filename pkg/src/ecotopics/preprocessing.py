"""CSV ingestion, outlier rejection, standardization and cyclic encoding."""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import ObservationCorpus, as_dates

logger = logging.getLogger(__name__)

DAY_OF_YEAR = "day_of_year"
DAY_OF_YEAR_PERIOD = 365.25


class ZeroVarianceError(ValueError):
    """A feature has no spread over its unmasked values and cannot be standardized."""

    def __init__(self, name=None):
        self.name = name
        super().__init__(f"feature {name!r} has zero variance" if name else "zero variance")


def _parse_date(value, line):
    try:
        return np.datetime64(pd.Timestamp(str(value).strip()).date(), "D")
    except (ValueError, TypeError) as exc:
        raise ValueError(f"line {line}: cannot parse date {value!r}") from exc


def _parse_count(value, line):
    text = str(value).strip()
    try:
        x = float(text) if text else 0.0
    except ValueError as exc:
        raise ValueError(f"line {line}: cannot parse count {value!r}") from exc
    if not np.isfinite(x) or x != int(x):
        raise ValueError(f"line {line}: count must be an integer, got {value!r}")
    if x < 0:
        raise ValueError(f"line {line}: negative count {value!r}")
    return int(x)


def ingest_counts_csv(path):
    """Read daily taxon counts from long (``date,taxon,count``) or wide CSV.

    Long-form rows sharing a (date, taxon) are summed. Sub-daily timestamps
    are aggregated to their calendar day. Days whose total is zero are
    dropped with a warning.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    cols = [c.strip() for c in df.columns]
    df.columns = cols
    if not cols or cols[0] != "date":
        raise ValueError(f"{path}: first column must be 'date', got {cols[:1]}")
    # line numbers are 1-based and count the header
    lines = np.arange(len(df)) + 2

    if cols == ["date", "taxon", "count"]:
        dates = [_parse_date(d, ln) for d, ln in zip(df["date"], lines)]
        counts = [_parse_count(c, ln) for c, ln in zip(df["count"], lines)]
        taxa = [t.strip() for t in df["taxon"]]
        long = pd.DataFrame({"date": dates, "taxon": taxa, "count": counts})
        wide = long.pivot_table(index="date", columns="taxon", values="count",
                                aggfunc="sum", fill_value=0)
        taxon_names = list(wide.columns)
        day_index = wide.index.values
        matrix = wide.to_numpy(dtype=np.int64)
    else:
        taxon_names = cols[1:]
        if len(set(taxon_names)) != len(taxon_names):
            raise ValueError(f"{path}: duplicate taxon columns")
        dates = [_parse_date(d, ln) for d, ln in zip(df["date"], lines)]
        rows = np.array(
            [[_parse_count(df.iat[i, j + 1], lines[i]) for j in range(len(taxon_names))]
             for i in range(len(df))],
            dtype=np.int64,
        ).reshape(len(df), len(taxon_names))
        dates = np.asarray(dates, dtype="datetime64[D]")
        seen = {}
        for d, ln in zip(dates, lines):
            if d in seen:
                raise ValueError(
                    f"line {ln}: duplicate date {d} in wide form (first seen on line {seen[d]})"
                )
            seen[d] = ln
        order = np.argsort(dates, kind="stable")
        day_index = dates[order]
        matrix = rows[order]

    totals = matrix.sum(axis=1)
    empty = totals == 0
    if empty.any():
        logger.warning("dropping %d day(s) with no observations: %s", int(empty.sum()),
                       ", ".join(str(d) for d in as_dates(day_index)[empty][:10]))
    return ObservationCorpus(as_dates(day_index)[~empty], matrix[~empty], taxon_names)


def mad_outlier_mask(series, c=5.0):
    """Flag values further than ``c`` median absolute deviations from the median.

    NaN entries are treated as missing and never flagged. When the MAD is
    zero every present value different from the median is flagged.
    """
    x = np.asarray(series, dtype=np.float64)
    present = ~np.isnan(x)
    if not present.any():
        raise ValueError("series has no present values")
    if c <= 0:
        raise ValueError(f"MAD multiplier must be positive, got {c}")
    med = np.median(x[present])
    dev = np.abs(x - med)
    mad = np.median(dev[present])
    with np.errstate(invalid="ignore"):
        flagged = dev > c * mad if mad > 0 else dev != 0
    return flagged & present


@dataclass
class StandardizationParams:
    mean: float
    stddev: float
    mad_cutoff: float = 5.0


def standardize(series, mask=None, name=None, mad_cutoff=5.0):
    """Center and scale by population moments over the unmasked values.

    Masked (and NaN) entries are returned as exactly 0.0.
    """
    x = np.asarray(series, dtype=np.float64)
    masked = np.isnan(x) if mask is None else (np.asarray(mask, dtype=bool) | np.isnan(x))
    vals = x[~masked]
    if vals.size < 2:
        raise ValueError(f"feature {name!r} needs at least 2 unmasked values")
    mean = vals.mean()
    std = vals.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise ZeroVarianceError(name)
    out = np.where(masked, 0.0, (x - mean) / std)
    return out, StandardizationParams(float(mean), float(std), float(mad_cutoff))


def encode_cyclic(value, period):
    """Map a cyclic quantity onto the unit circle as ``(cos, sin)``."""
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    angle = 2.0 * np.pi * np.asarray(value, dtype=np.float64) / period
    return np.cos(angle), np.sin(angle)


class MaskedStandardScaler(BaseEstimator, TransformerMixin):
    """Column-wise standardization that treats NaN as missing.

    Missing cells are imputed with 0.0 (the column mean) after scaling.
    Constant columns raise :class:`ZeroVarianceError` unless
    ``drop_constant=True``, in which case they are dropped from the output.
    """

    def __init__(self, drop_constant=False):
        self.drop_constant = drop_constant

    def fit(self, X, y=None):
        X, names = self._frame(X)
        means, scales, keep = [], [], []
        for j in range(X.shape[1]):
            try:
                _, p = standardize(X[:, j], name=names[j])
            except ZeroVarianceError:
                if not self.drop_constant:
                    raise
                logger.warning("dropping constant feature %r", names[j])
                continue
            keep.append(j)
            means.append(p.mean)
            scales.append(p.stddev)
        self.feature_names_in_ = np.asarray(names, dtype=object)
        self.n_features_in_ = X.shape[1]
        self.kept_ = np.asarray(keep, dtype=np.int64)
        self.mean_ = np.asarray(means)
        self.scale_ = np.asarray(scales)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X, _ = self._frame(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        X = X[:, self.kept_]
        missing = np.isnan(X)
        return np.where(missing, 0.0, (X - self.mean_) / self.scale_)

    def inverse_transform(self, Z):
        check_is_fitted(self, "mean_")
        return np.asarray(Z, dtype=np.float64) * self.scale_ + self.mean_

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "mean_")
        return self.feature_names_in_[self.kept_]

    @staticmethod
    def _frame(X):
        if isinstance(X, pd.DataFrame):
            return X.to_numpy(dtype=np.float64), [str(c) for c in X.columns]
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("expected a 2-D array")
        return X, [f"x{j}" for j in range(X.shape[1])]


@dataclass
class FeatureConfig:
    """Which environment columns to use and how.

    ``cyclic`` maps column name to period. ``drop`` lists columns to ignore.
    """

    mad_cutoff: float = 5.0
    cyclic: dict = field(default_factory=dict)
    drop: list = field(default_factory=list)
    add_day_of_year: bool = True

    @classmethod
    def from_dict(cls, d):
        cyclic = d.get("cyclic", {})
        if isinstance(cyclic, list):
            cyclic = {item["column"]: float(item["period"]) for item in cyclic}
        return cls(
            mad_cutoff=float(d.get("mad_cutoff", 5.0)),
            cyclic={str(k): float(v) for k, v in cyclic.items()},
            drop=[str(c) for c in d.get("drop", [])],
            add_day_of_year=bool(d.get("add_day_of_year", True)),
        )

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "mad_cutoff": self.mad_cutoff,
            "cyclic": [{"column": k, "period": v} for k, v in self.cyclic.items()],
            "drop": list(self.drop),
            "add_day_of_year": self.add_day_of_year,
        }


@dataclass
class FeatureTransform:
    """How one output column is derived from a raw reading."""

    name: str
    source: str
    kind: str  # "linear", "cos" or "sin"
    period: float
    mean: float
    stddev: float
    mad_cutoff: float

    def apply(self, raw):
        raw = float(raw)
        if self.kind == "cos":
            raw = encode_cyclic(raw, self.period)[0]
        elif self.kind == "sin":
            raw = encode_cyclic(raw, self.period)[1]
        return (raw - self.mean) / self.stddev


@dataclass
class EnvironmentTable:
    """Daily standardized environment features with a missing-value mask."""

    dates: np.ndarray
    features: np.ndarray
    missing_mask: np.ndarray
    feature_names: list
    standardization: list

    def __post_init__(self):
        self.dates = as_dates(self.dates)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)

    @property
    def n_features(self):
        return self.features.shape[1]

    def usable_rows(self, max_missing_fraction=0.5):
        """Rows with at most ``max_missing_fraction`` of their features masked."""
        return self.missing_mask.mean(axis=1) <= max_missing_fraction

    def params_dict(self):
        return [asdict(t) for t in self.standardization]

    def subset(self, index):
        return EnvironmentTable(self.dates[index], self.features[index],
                                self.missing_mask[index], list(self.feature_names),
                                list(self.standardization))


def transform_readings(transforms, readings):
    """Standardize a dict of raw readings with stored column transforms.

    ``readings`` is keyed by raw source column. A ``date`` entry supplies
    the day of year when it is not given directly. Absent readings are
    imputed as the feature mean (0.0).
    """
    readings = dict(readings)
    known = {t.source for t in transforms}
    if "date" in readings and DAY_OF_YEAR in known and DAY_OF_YEAR not in readings:
        readings[DAY_OF_YEAR] = _day_of_year(as_dates([readings["date"]]))[0]
    readings.pop("date", None)
    unknown = sorted(set(readings) - known)
    if unknown:
        raise KeyError(
            f"unknown feature(s) {unknown}; expected some of {sorted(known)} (or 'date')"
        )
    x = np.zeros(len(transforms))
    for j, t in enumerate(transforms):
        value = readings.get(t.source)
        if value is None or (isinstance(value, float) and np.isnan(value)):
            continue
        x[j] = t.apply(value)
    return x


def _day_of_year(dates):
    dates = as_dates(dates)
    start = dates.astype("datetime64[Y]").astype("datetime64[D]")
    # January 1st is day 0
    return (dates - start).astype(np.float64)


def _read_environment(env):
    if isinstance(env, pd.DataFrame):
        df = env.copy()
    else:
        df = pd.read_csv(env, na_values=["NaN", "nan", ""], keep_default_na=True)
    df.columns = [str(c).strip() for c in df.columns]
    if "date" not in df.columns:
        raise ValueError("environment data needs a 'date' column")
    stamps = pd.to_datetime(df["date"], errors="coerce", format="ISO8601")
    if stamps.isna().any():
        line = int(np.flatnonzero(stamps.isna().to_numpy())[0]) + 2
        raise ValueError(f"line {line}: cannot parse date {df['date'].iloc[line - 2]!r}")
    df["date"] = stamps.dt.normalize()
    values = df.drop(columns="date").apply(pd.to_numeric, errors="coerce")
    values["date"] = df["date"]
    return values


def build_feature_table(env, config=None):
    """Daily average, MAD-mask, cyclic-encode and standardize environment data.

    ``env`` is a CSV path or a DataFrame with a ``date`` column. The output
    has one row per calendar day from the first to the last date; days with
    no readings are present with every cell masked.
    """
    if config is None:
        config = FeatureConfig()
    elif isinstance(config, dict):
        config = FeatureConfig.from_dict(config)
    df = _read_environment(env)
    raw_cols = [c for c in df.columns if c != "date"]
    for col in list(config.cyclic) + list(config.drop):
        if col not in raw_cols and not (col == DAY_OF_YEAR and config.add_day_of_year):
            raise ValueError(f"feature config names unknown column {col!r}")
    raw_cols = [c for c in raw_cols if c not in config.drop]

    daily = df.groupby("date")[raw_cols].mean()
    full = pd.date_range(daily.index.min(), daily.index.max(), freq="D")
    gap = ~full.isin(daily.index)
    daily = daily.reindex(full)
    dates = full.values.astype("datetime64[D]")

    columns = []  # (name, source, kind, period, values)
    for col in raw_cols:
        x = daily[col].to_numpy(dtype=np.float64)
        if np.isnan(x).all():
            logger.warning("dropping feature %r: no readings", col)
            continue
        x = np.where(mad_outlier_mask(x, config.mad_cutoff), np.nan, x)
        if col in config.cyclic:
            period = config.cyclic[col]
            cos, sin = encode_cyclic(x, period)
            columns.append((f"{col}_cos", col, "cos", period, cos))
            columns.append((f"{col}_sin", col, "sin", period, sin))
        else:
            columns.append((col, col, "linear", 0.0, x))
    if config.add_day_of_year and DAY_OF_YEAR not in raw_cols:
        # gap days stay fully masked, day of year included
        doy = np.where(gap, np.nan, _day_of_year(dates))
        cos, sin = encode_cyclic(doy, DAY_OF_YEAR_PERIOD)
        columns.append((f"{DAY_OF_YEAR}_cos", DAY_OF_YEAR, "cos", DAY_OF_YEAR_PERIOD, cos))
        columns.append((f"{DAY_OF_YEAR}_sin", DAY_OF_YEAR, "sin", DAY_OF_YEAR_PERIOD, sin))

    names, feats, masks, transforms = [], [], [], []
    for name, source, kind, period, values in columns:
        missing = np.isnan(values)
        try:
            z, p = standardize(values, missing, name=name, mad_cutoff=config.mad_cutoff)
        except ZeroVarianceError:
            logger.warning("dropping feature %r: zero variance", name)
            continue
        names.append(name)
        feats.append(z)
        masks.append(missing)
        transforms.append(FeatureTransform(name, source, kind, period, p.mean, p.stddev,
                                           config.mad_cutoff))
    if not names:
        raise ValueError("no usable environment features")
    return EnvironmentTable(dates, np.column_stack(feats), np.column_stack(masks),
                            names, transforms)
