"""Sparse, temporally smooth community decompositions of daily taxon counts."""

from .baselines import PCADecomposition, direct_regression_pipeline, pca_regression_pipeline
from .community import (
    CommunityModel,
    CommunityTopicModel,
    Hyperparameters,
    active_communities,
    ml_taxon_distribution,
    train,
)
from .corpus import ObservationCorpus
from .evaluation import (
    EvaluationReport,
    SweepConfig,
    compare_methods,
    hyperparameter_sweep,
    kl_divergence,
    score_predictions,
    synthetic_corpus,
)
from .preprocessing import (
    EnvironmentTable,
    FeatureConfig,
    MaskedStandardScaler,
    build_feature_table,
    ingest_counts_csv,
)
from .regression import RidgeRegressor, predict_taxa, run_fold_protocol, year_folds

__version__ = "0.1.0"
