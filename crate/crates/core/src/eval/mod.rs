//! Losses, completion metrics and the training and ablation harness.

mod ablation;
mod experiment;
mod metrics;

pub use ablation::{AblationConfig, AblationLabel, GuidanceSource};
pub use experiment::{
    ablation_table, derive_seed, evaluate, masked_cross_entropy, prepare_split, pretrain, run_ablation,
    run_experiment, split_scenes, train_end_to_end, train_model, AblationRow, ExperimentOutcome, ForwardVars, Model,
    LrDecay, NetworkConfig, Phase, PreparedScene, TrainLog, TrainSchedule,
};
pub use metrics::{sc_counts, sc_metrics, ssc_counts, ssc_metrics, Counts, EvalMask, MetricsReport};
