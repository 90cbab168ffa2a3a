//! Exposure-aware recommendation and feedback-loop simulation.
//!
//! The pipeline: load MovieLens ratings ([`dataset`]), estimate who has seen
//! what ([`exposure`]), train factor models that penalize skewed exposure
//! ([`recommender`]), serve slates ([`policy`]), score them ([`metrics`]) and
//! iterate the whole thing as a closed loop ([`simloop`]).

pub mod dataset;
pub mod dense;
pub mod error;
pub mod exposure;
pub mod metrics;
pub mod policy;
pub mod recommender;
pub mod seed;
pub mod simloop;
pub mod stats;

pub use dataset::{
    complete_semisynthetic, load_movielens, split, temporal_split, CompleteMatrix, MovieLensFormat, RatingMatrix,
    SplitMode, TemporalSplit,
};
pub use error::{Error, Result};
pub use exposure::{
    evaluate_exposure_auc, fit_poisson_exposure, AucReport, ExposureMatrix, ExposureModel, PoissonConfig,
    PoissonFactors,
};
pub use metrics::MetricContext;
pub use policy::RecommendationSlate;
pub use recommender::{train, FactorModel, TrainingConfig, Variant};
pub use simloop::{
    run_experiment, ExperimentData, ExperimentResult, Metric, SimVariant, SimulationConfig, TraceRow,
};
