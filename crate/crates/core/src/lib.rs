//! Federated-learning simulator for click-prediction models with tiered
//! clients: Dirichlet tier mapping, tier-aware optimizations and the MDAC
//! fairness metric.

pub mod compression;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod flengine;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tiering;

pub use compression::{PruneSpec, QuantScheme, QuantSpec, Rounding};
pub use dataset::{
    ClientDataset, ClientId, Dataset, FeatureSchema, Interaction, LoadOptions, SparseField,
    SplitPolicy,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, Mapping};
pub use flengine::{
    aggregate, plan_epoch, run_client, train, train_from, ClientUpdate, Coverage, HyperParams,
    OptimizationConfig, RoundLog, ServerOptimizer, ServerState, TierPerformanceModel, Variant,
};
pub use metrics::{auc, fairness, per_tier_auc, FairnessReport, TierAuc};
pub use model::{Dlrm, ModelConfig, SubModelSpec};
pub use synth::{synthesize, SynthParams};
pub use tensor::{GradientTensors, Matrix, ModelParams, ParamTensors};
pub use tiering::{
    dirichlet_tier_map, heterogeneity_report, random_tier_map, HeterogeneityReport, PerTier, Tier,
    TierAssignment,
};
