//! Data-free continual learning by pseudo-rehearsal with question-type
//! balancing, plus a synthetic continual-VQA benchmark.
//!
//! Pipeline per task: frozen per-task generation heads synthesize past-task
//! question-answer pairs on current images ([`generation`]), the raw pool is
//! re-sampled to match each past task's real question-type distribution
//! ([`balancing`]), and the learner trains on the union ([`learner`]).
//! [`harness`] drives whole experiments and writes reports.

pub mod balancing;
pub mod data;
pub mod embedding;
pub mod error;
pub mod generation;
pub mod harness;
pub mod kmeans;
pub mod learner;
pub mod metrics;
pub mod seed;
pub mod softmax;
pub mod world;

pub use balancing::{
    allocate_quotas, assemble_balanced_buffer, assemble_naive_buffer, fit_classifier_partition,
    fit_clustering_partition, type_distribution, BufferStage, MetaStats, PartitionFn, PartitionKind,
    RehearsalBuffer, TaskPartitions, TypeDistribution,
};
pub use data::{
    load_task_stream, validate_sample, ImageView, ManifestSource, Origin, Sample, Split, TaskDataset, TaskSource,
    TaskSplits, TaskStream,
};
pub use embedding::{load_external_embeddings, Embedder};
pub use error::{Error, Result};
pub use generation::{
    build_pseudo_dataset, fit_generation_head, sharpen, split_question_answer, GenerationHead, ImagePolicy,
    PseudoDataset, QaGenerator,
};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport};
pub use kmeans::{kmeans, KMeans};
pub use learner::{joint_task_step, Learner, LearnerConfig, Strategy, TrainingPlan};
pub use metrics::{average_forgetting, average_performance, total_variation, AccuracyMatrix, MetricsReport};
pub use world::{build_world, WorldSpec};
