//! EvoIQA core: full-reference image-quality features, asymmetric
//! generalized-Gaussian statistics, a stack-based symbolic regressor, the
//! published evolved metrics, and the evaluation harness around them.

pub mod aggd;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gp;
pub mod image;
pub mod metrics;

pub use aggd::{feature_names, featurize, AggdDescriptor, FeatureVector, FEATURE_COUNT};
pub use data::{
    extract_and_cache, load_evolution_config, load_manifest, load_tid2013, FeatureCache,
    PairRecord,
};
pub use error::{Error, Result};
pub use eval::{
    reference_partition, run_experiment, srocc, write_report, EvalReport, LabeledFeatures,
    RunResult, SroccResult,
};
pub use features::{extract_all, MapSet};
pub use gp::{
    evolve, run_evolution, select_final, EvolutionConfig, FitnessKind, OperatorSet, Program,
};
pub use image::{ColorImage, ImagePlane};
pub use metrics::{
    bind_features, evoiqa_full, evoiqa_subset, haarpsi_score, EvoFullInputs, EvoSubsetInputs,
};
