"""JSON/CSV serialization with atomic writes."""

import io as _io
import json
import os
import tempfile

import numpy as np

from .baselines import PCADecomposition
from .community import CommunityModel, Hyperparameters
from .corpus import as_dates, iso_dates
from .preprocessing import FeatureTransform
from .regression import RidgeRegressor

FORMAT_VERSION = 1


def _floats(a):
    # repr of a Python float round-trips exactly (17 significant digits max)
    return np.asarray(a, dtype=np.float64).tolist()


def _check_version(d, kind):
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {kind} format_version {d.get('format_version')!r}")


def model_to_dict(model):
    d = {
        "format_version": FORMAT_VERSION,
        "taxon_names": list(model.taxon_names),
        "dates": iso_dates(model.dates),
        "theta": _floats(model.theta),
        "phi": _floats(model.phi),
        "hyper": model.hyper.to_dict(),
    }
    if model.day_totals is not None:
        d["day_totals"] = np.asarray(model.day_totals).tolist()
    return d


def model_from_dict(d):
    _check_version(d, "model")
    theta = np.asarray(d["theta"], dtype=np.float64)
    phi = np.asarray(d["phi"], dtype=np.float64)
    if theta.ndim != 2 or phi.ndim != 2 or theta.shape[1] != phi.shape[0]:
        raise ValueError("model JSON has inconsistent theta/phi shapes")
    if theta.shape[0] != len(d["dates"]) or phi.shape[1] != len(d["taxon_names"]):
        raise ValueError("model JSON dimensions disagree with dates/taxon_names")
    for name, m in (("theta", theta), ("phi", phi)):
        if (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError(f"model JSON {name} rows are not distributions")
    return CommunityModel(
        theta=theta,
        phi=phi,
        hyper=Hyperparameters.from_dict(d["hyper"]),
        dates=as_dates(d["dates"]),
        taxon_names=d["taxon_names"],
        day_totals=d.get("day_totals"),
    )


def regressor_to_dict(reg):
    d = {
        "format_version": FORMAT_VERSION,
        "weights": _floats(reg.coef_),
        "intercept": _floats(reg.intercept_),
        "lambda": float(reg.lambda_),
        "feature_names": list(reg.feature_names) if reg.feature_names is not None else None,
    }
    if reg.standardization is not None:
        d["standardization"] = [
            t.__dict__ if isinstance(t, FeatureTransform) else dict(t)
            for t in reg.standardization
        ]
    return d


def regressor_from_dict(d):
    _check_version(d, "regressor")
    std = d.get("standardization")
    reg = RidgeRegressor(
        lam=d["lambda"],
        feature_names=d.get("feature_names"),
        standardization=[FeatureTransform(**t) for t in std] if std else None,
    )
    reg.coef_ = np.asarray(d["weights"], dtype=np.float64).reshape(len(d["weights"]), -1)
    reg.intercept_ = np.asarray(d["intercept"], dtype=np.float64)
    reg.lambda_ = float(d["lambda"])
    reg.loo_scores_ = None
    reg.n_features_in_ = reg.coef_.shape[0]
    if reg.coef_.shape[1] != reg.intercept_.shape[0]:
        raise ValueError("regressor JSON weights and intercept disagree")
    return reg


def pca_to_dict(pca):
    return {
        "format_version": FORMAT_VERSION,
        "mean": _floats(pca.mean_),
        "components": _floats(pca.components_),
        "explained_variance": _floats(pca.explained_variance_),
    }


def pca_from_dict(d):
    _check_version(d, "PCA")
    pca = PCADecomposition(n_components=len(d["components"]))
    pca.mean_ = np.asarray(d["mean"], dtype=np.float64)
    pca.components_ = np.asarray(d["components"], dtype=np.float64)
    pca.explained_variance_ = np.asarray(d["explained_variance"], dtype=np.float64)
    pca.n_features_in_ = pca.mean_.shape[0]
    return pca


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, frame):
    buf = _io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    atomic_write_text(path, buf.getvalue())


def save_model(path, model):
    write_json(path, model_to_dict(model))


def load_model(path):
    return model_from_dict(read_json(path))


def save_regressor(path, reg):
    write_json(path, regressor_to_dict(reg))


def load_regressor(path):
    return regressor_from_dict(read_json(path))
