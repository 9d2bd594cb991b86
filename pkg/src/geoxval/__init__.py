"""Bayesian cross-validation of geostatistical models with uncertain splits."""

__version__ = "0.1.0"

from .discrepancy import DiscrepancyKind, mahalanobis, mse
from .errors import (
    AdaptationError,
    CapacityError,
    ChainFailure,
    DegenerateWeightsError,
    DesignError,
    DomainError,
    DuplicateSiteError,
    GeoXvalError,
    NotPDError,
    ParseError,
    SchemaError,
    ShapeError,
    SplitError,
)
from .estimators import (
    EstimatorOutput,
    WeightSet,
    log_importance_weight,
    mc_estimate,
    run_mc,
    run_sir,
    sir_estimate,
    stratified_mc_estimate,
    stratified_sir_estimate,
    weight_diagnostics,
)
from .geodata import GeoDataset, Location, covariance_matrix, exp_correlation, pairwise_distances, read_dataset, write_dataset
from .mcmc import ChainConfig, PosteriorSample, PowerPosterior, PriorConfig, TrainingPosterior, log_power_posterior, log_prior, run_chain, trigamma
from .models import ModelKind, ModelParams, conditional_moments, log_likelihood, predictive_sample
from .scenarios import ScenarioConfig, build_scenario, simulate_scenario
from .splits import SplitBatch, SplitVector, StratifiedDesign, sample_split_batch, sample_stratified_split, sample_uniform_split, split_log_prior
