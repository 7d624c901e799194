//! The continually trained VQA model and its training plan.
//!
//! The reference learner is a single softmax layer over the concatenation of
//! image features, the hashed question embedding and a bias input. Its answer
//! vocabulary grows as tasks introduce new answers. Inference never sees a
//! task identifier.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balancing::{PartitionKind, RehearsalBuffer};
use crate::data::{Origin, Sample, TaskDataset};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::generation::{fit_generation_head, split_question_answer, GenerationHead};
use crate::seed::{self, StreamRng};
use crate::softmax::LinearSoftmax;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_STEP_SIZE: f64 = 0.05;
pub const DEFAULT_EPOCHS_PER_TASK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SeqFt,
    RehearsalReal,
    GabClassifier,
    GabClustering,
    GabNoBalance,
    GabConditioning,
    GabSelf,
    GabPastimages,
    GabDynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::SeqFt,
        Strategy::RehearsalReal,
        Strategy::GabClassifier,
        Strategy::GabClustering,
        Strategy::GabNoBalance,
        Strategy::GabConditioning,
        Strategy::GabSelf,
        Strategy::GabPastimages,
        Strategy::GabDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SeqFt => "seq_ft",
            Strategy::RehearsalReal => "rehearsal_real",
            Strategy::GabClassifier => "gab_classifier",
            Strategy::GabClustering => "gab_clustering",
            Strategy::GabNoBalance => "gab_no_balance",
            Strategy::GabConditioning => "gab_conditioning",
            Strategy::GabSelf => "gab_self",
            Strategy::GabPastimages => "gab_pastimages",
            Strategy::GabDynamic => "gab_dynamic",
        }
    }

    /// Strategies that replay generated rather than stored data.
    pub fn is_generative(self) -> bool {
        !matches!(self, Strategy::SeqFt | Strategy::RehearsalReal)
    }

    /// Partition used for balancing or, for `gab_no_balance`, bookkeeping.
    pub fn partition_kind(self) -> Option<PartitionKind> {
        match self {
            Strategy::GabClustering | Strategy::GabNoBalance => Some(PartitionKind::Clustering),
            Strategy::GabClassifier | Strategy::GabConditioning | Strategy::GabSelf | Strategy::GabPastimages => {
                Some(PartitionKind::Classifier)
            }
            Strategy::SeqFt | Strategy::RehearsalReal | Strategy::GabDynamic => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    /// Size of the raw generated pool.
    #[serde(rename = "M")]
    pub m: usize,
    /// Size of the replay buffer actually trained on.
    #[serde(rename = "M_hat")]
    pub m_hat: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(rename = "K_clusters", default)]
    pub k_clusters: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task_order: Vec<String>,
}

fn default_tau() -> f64 {
    crate::generation::DEFAULT_TAU
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.m < self.m_hat {
            return Err(Error::Config(format!("M ({}) must be at least M_hat ({})", self.m, self.m_hat)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.strategy.partition_kind() == Some(PartitionKind::Clustering) && !matches!(self.k_clusters, Some(k) if k >= 1) {
            return Err(Error::Config(format!("strategy {} requires K_clusters >= 1", self.strategy)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
}

fn default_step_size() -> f64 {
    DEFAULT_STEP_SIZE
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS_PER_TASK
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            step_size: DEFAULT_STEP_SIZE,
            epochs_per_task: DEFAULT_EPOCHS_PER_TASK,
        }
    }
}

/// Generation heads of past tasks, queried once per current-task step.
pub struct DynamicReplay<'a> {
    pub heads: Vec<&'a GenerationHead>,
    pub rng: StreamRng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
    pub dynamic_samples: usize,
}

#[derive(Debug, Clone)]
pub struct Learner {
    embedder: Embedder,
    feature_dim: usize,
    model: LinearSoftmax,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    config: LearnerConfig,
    seed: u64,
}

impl Learner {
    pub fn new(feature_dim: usize, config: LearnerConfig, seed: u64) -> Self {
        let embedder = Embedder::default();
        let input_dim = feature_dim + embedder.dim() + 1;
        Learner {
            embedder,
            feature_dim,
            model: LinearSoftmax::new(input_dim, 0),
            vocab: Vec::new(),
            vocab_index: HashMap::new(),
            config,
            seed,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn config(&self) -> LearnerConfig {
        self.config
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        self.model.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// Joint input: image features, question embedding, bias.
    pub fn joint_features(&self, image: &[f64], question: &str) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.model.input_dim());
        let norm = image.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        z.extend(image.iter().map(|v| v * scale));
        z.resize(self.feature_dim, 0.0);
        match self.embedder.embed(question) {
            Ok(e) => z.extend(e),
            Err(_) => z.resize(self.feature_dim + self.embedder.dim(), 0.0),
        }
        z.push(1.0);
        z
    }

    fn answer_id(&mut self, answer: &str) -> usize {
        if let Some(&i) = self.vocab_index.get(answer) {
            return i;
        }
        let i = self.vocab.len();
        self.vocab.push(answer.to_string());
        self.vocab_index.insert(answer.to_string(), i);
        self.model.push_class();
        i
    }

    /// Argmax answer; ties go to the earliest vocabulary entry.
    pub fn predict(&self, image: &[f64], question: &str) -> String {
        if self.vocab.is_empty() {
            return String::new();
        }
        self.vocab[self.model.predict(&self.joint_features(image, question))].clone()
    }

    /// Exact-match accuracy; 0 for an empty dataset.
    pub fn evaluate(&self, dataset: &TaskDataset) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let hits = dataset
            .samples
            .iter()
            .filter(|s| self.predict(&s.image_features, &s.question) == s.answer)
            .count();
        hits as f64 / dataset.len() as f64
    }

    /// Trains on `current ∪ buffer` with uniform per-sample weighting.
    pub fn train_task(&mut self, current: &TaskDataset, buffer: &RehearsalBuffer, val: Option<&TaskDataset>) -> TrainReport {
        self.train_with(current, &buffer.entries, val, None)
    }

    /// Seeded-shuffle SGD over the union for `epochs_per_task` epochs, keeping
    /// the weights of the best epoch on `val` when given.
    ///
    /// With `dynamic`, every step on a current-task sample is followed by one
    /// step on a freshly generated sample per past head, on the same image.
    pub fn train_with(
        &mut self,
        current: &TaskDataset,
        buffer: &[Sample],
        val: Option<&TaskDataset>,
        mut dynamic: Option<&mut DynamicReplay<'_>>,
    ) -> TrainReport {
        let union: Vec<&Sample> = current.samples.iter().chain(buffer).collect();
        let targets: Vec<usize> = union.iter().map(|s| self.answer_id(&s.answer)).collect();
        let inputs: Vec<Vec<f64>> = union
            .iter()
            .map(|s| self.joint_features(&s.image_features, &s.question))
            .collect();
        let n_current = current.len();

        let mut best: Option<(f64, usize, LinearSoftmax)> = None;
        let mut dynamic_samples = 0;
        let mut order: Vec<usize> = (0..union.len()).collect();
        for epoch in 0..self.config.epochs_per_task {
            let mut rng = seed::stream(self.seed, "sgd", &[&current.task_id, &epoch.to_string()]);
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for &i in &order {
                self.model.sgd_step(&inputs[i], targets[i], self.config.step_size);
                if i < n_current {
                    if let Some(replay) = dynamic.as_deref_mut() {
                        dynamic_samples += self.replay_step(&union[i].image_features, replay);
                    }
                }
            }
            if let Some(val) = val {
                let acc = self.evaluate(val);
                if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                    best = Some((acc, epoch, self.model.clone()));
                }
            }
        }

        match best {
            Some((acc, epoch, model)) => {
                // rows appended after the best epoch stay zero
                let mut restored = model;
                while restored.classes() < self.model.classes() {
                    restored.push_class();
                }
                self.model = restored;
                TrainReport {
                    best_epoch: epoch,
                    val_accuracy: Some(acc),
                    dynamic_samples,
                }
            }
            None => TrainReport {
                best_epoch: self.config.epochs_per_task.saturating_sub(1),
                val_accuracy: None,
                dynamic_samples,
            },
        }
    }

    fn replay_step(&mut self, image: &[f64], replay: &mut DynamicReplay<'_>) -> usize {
        let mut n = 0;
        for head in &replay.heads {
            let text = head.generate_qa(image, &mut replay.rng);
            if let Ok((question, answer)) = split_question_answer(&text) {
                let target = self.answer_id(&answer);
                let z = self.joint_features(image, &question);
                self.model.sgd_step(&z, target, self.config.step_size);
                n += 1;
            }
        }
        n
    }

    pub fn to_checkpoint(&self, task: &str, plan: &TrainingPlan) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            task: task.to_string(),
            seed: self.seed,
            feature_dim: self.feature_dim,
            embedder_ref: self.embedder.config_id().to_string(),
            learner: self.config,
            vocab: self.vocab.clone(),
            weights: self.model.rows().to_vec(),
            plan: plan.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("unsupported checkpoint version {}", ckpt.format_version),
            ));
        }
        let mut learner = Learner::new(ckpt.feature_dim, ckpt.learner, ckpt.seed);
        if learner.embedder.config_id() != ckpt.embedder_ref {
            return Err(Error::EmbedderMismatch {
                expected: ckpt.embedder_ref.clone(),
                found: learner.embedder.config_id().to_string(),
            });
        }
        if ckpt.weights.len() != ckpt.vocab.len() {
            return Err(Error::schema("weights", "row count differs from vocabulary size"));
        }
        for (answer, row) in ckpt.vocab.iter().zip(&ckpt.weights) {
            if row.len() != learner.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: learner.input_dim(),
                    found: row.len(),
                });
            }
            learner.answer_id(answer);
        }
        learner.model = LinearSoftmax::from_rows(learner.input_dim(), ckpt.weights.clone())
            .expect("row widths checked above");
        Ok(learner)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub embedder_ref: String,
    pub learner: LearnerConfig,
    pub vocab: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub plan: TrainingPlan,
}

/// One task of joint optimization: the VQA head on `current ∪ buffer` and the
/// task's own generation head on `current`. The two share no parameters, so
/// running them back to back optimizes the summed objective exactly.
pub fn joint_task_step(
    learner: &mut Learner,
    current: &TaskDataset,
    buffer: &RehearsalBuffer,
    val: Option<&TaskDataset>,
    dynamic: Option<&mut DynamicReplay<'_>>,
    tau: f64,
    bucket_width: usize,
) -> Result<(TrainReport, GenerationHead)> {
    let report = learner.train_with(current, &buffer.entries, val, dynamic);
    let head = fit_generation_head(current, tau, bucket_width)?;
    Ok((report, head))
}

/// A real sample with the given fields, used by tests and fixtures.
pub fn real_sample(task: &str, image: Vec<f64>, question: &str, answer: &str) -> Sample {
    Sample {
        image_id: String::new(),
        image_features: image,
        question: question.to_string(),
        answer: answer.to_string(),
        task_id: task.to_string(),
        qtype: None,
        origin: Origin::Real,
    }
}
