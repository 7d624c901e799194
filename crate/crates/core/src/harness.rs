//! Experiment orchestration: configs, the per-task pipeline and reports.
//!
//! Per seed and per task `t`: build the replay buffer for tasks `0..t`
//! (strategy specific), train the learner and fit the task's generation
//! head, fit the task's partition function and record its meta-statistics,
//! then evaluate on every task seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::balancing::{
    allocate_quotas, assemble_balanced_buffer, assemble_naive_buffer, fit_classifier_partition,
    fit_clustering_partition, type_distribution, BufferStage, MetaStats, PartitionFn, PartitionKind,
    RehearsalBuffer, TaskPartitions, TypeDistribution,
};
use crate::data::{ImageView, ManifestSource, Sample, Split, TaskDataset, TaskSource};
use crate::embedding::{load_external_embeddings, Embedder};
use crate::error::{Error, Result};
use crate::generation::{
    build_pseudo_dataset, self_label_answers, GenerationHead, ImagePolicy, PseudoDataset, QaGenerator,
    DEFAULT_BUCKET_WIDTH,
};
use crate::learner::{joint_task_step, DynamicReplay, Learner, LearnerConfig, Strategy, TrainReport, TrainingPlan};
use crate::metrics::{total_variation, AccuracyMatrix, MetricsReport};
use crate::seed::{self, StreamRng};
use crate::world::{World, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic world to build; exclusive with `stream`.
    #[serde(default)]
    pub world: Option<WorldSpec>,
    /// Path to a `stream.json` manifest; exclusive with `world`.
    #[serde(default)]
    pub stream: Option<PathBuf>,
    /// Optional external question embeddings used for partitioning.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    pub plan: TrainingPlan,
    #[serde(default)]
    pub learner: LearnerConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
    /// Attribute bucket width for generation heads; defaults to the world's.
    #[serde(default)]
    pub bucket_width: Option<usize>,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file ends in `.json`. Relative `stream`
    /// and `embeddings` paths are resolved against the config's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, is_json)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.stream, &mut cfg.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, is_json: bool) -> Result<Self> {
        let mut cfg: ExperimentConfig = if is_json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        if cfg.seeds.is_empty() {
            cfg.seeds = vec![cfg.plan.seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.world, &self.stream) {
            (Some(w), None) => w.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("exactly one of `world` and `stream` is required".into())),
        }
        self.plan.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be unique".into()));
        }
        if self.learner.epochs_per_task == 0 || self.learner.step_size.is_nan() || self.learner.step_size <= 0.0 {
            return Err(Error::Config("learner needs positive epochs_per_task and step_size".into()));
        }
        if self.bucket_width == Some(0) {
            return Err(Error::Config("bucket_width must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Result<Self> {
        self.plan.strategy = strategy;
        if strategy.partition_kind() == Some(PartitionKind::Clustering) && self.plan.k_clusters.is_none() {
            self.plan.k_clusters = Some(DEFAULT_K_CLUSTERS);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn effective_bucket_width(&self) -> usize {
        self.bucket_width
            .or(self.world.as_ref().map(|w| w.buckets_per_attribute))
            .unwrap_or(DEFAULT_BUCKET_WIDTH)
    }

    fn wants(&self, f: ReportFormat) -> bool {
        self.report_formats.contains(&f)
    }

    /// Task data as configured, in the plan's task order.
    pub fn open_source(&self) -> Result<Box<dyn TaskSource>> {
        let order = (!self.plan.task_order.is_empty()).then_some(self.plan.task_order.as_slice());
        match (&self.world, &self.stream) {
            (Some(spec), _) => {
                let stream = World::new(spec.clone())?.stream()?;
                Ok(Box::new(match order {
                    Some(o) => stream.reordered(o)?,
                    None => stream,
                }))
            }
            (None, Some(path)) => Ok(Box::new(ManifestSource::open(path, order)?)),
            (None, None) => Err(Error::Config("no task data configured".into())),
        }
    }

    pub fn partition_embedder(&self) -> Result<Embedder> {
        match &self.embeddings {
            Some(p) => load_external_embeddings(p),
            None => Ok(Embedder::default()),
        }
    }
}

pub const DEFAULT_K_CLUSTERS: usize = 4;

/// Fits the partition function of one task on its real training questions.
pub fn fit_partition(
    kind: PartitionKind,
    train: &TaskDataset,
    embedder: &Embedder,
    k_clusters: Option<usize>,
    seed: u64,
) -> Result<PartitionFn> {
    match kind {
        PartitionKind::Classifier => fit_classifier_partition(train, embedder, seed),
        PartitionKind::Clustering => {
            let questions: Vec<&str> = train.samples.iter().map(|s| s.question.as_str()).collect();
            let k = k_clusters.unwrap_or(DEFAULT_K_CLUSTERS);
            fit_clustering_partition(&train.task_id, &questions, embedder, k, seed)
        }
    }
}

/// Buffer bookkeeping for one task of the sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub step: usize,
    pub task: String,
    pub pool_size_per_task: usize,
    pub m_hat: usize,
    pub raw: Option<BTreeMap<String, Vec<usize>>>,
    pub balanced: BTreeMap<String, Vec<usize>>,
    pub buffer_size: usize,
    pub failure_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
    pub dynamic_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionRow {
    pub step_task: String,
    pub task: String,
    pub type_index: usize,
    pub real_share: f64,
    pub generated_share: Option<f64>,
    pub balanced_share: f64,
}

/// Per-(task, type) shares of real data, the raw generated pool and the
/// final buffer. Tasks absent from a buffer get zero shares.
pub fn emit_distribution_report(
    step_task: &str,
    raw: Option<&RehearsalBuffer>,
    balanced: &RehearsalBuffer,
    real: &BTreeMap<String, TypeDistribution>,
    past: &[String],
) -> Vec<DistributionRow> {
    let mut rows = Vec::new();
    for task in past {
        let Some(dist) = real.get(task) else { continue };
        let generated = raw.map(|r| r.type_shares(task).unwrap_or_else(|| vec![0.0; dist.k()]));
        let kept = balanced.type_shares(task).unwrap_or_else(|| vec![0.0; dist.k()]);
        for k in 0..dist.k() {
            rows.push(DistributionRow {
                step_task: step_task.to_string(),
                task: task.clone(),
                type_index: k,
                real_share: dist.probs[k],
                generated_share: generated.as_ref().map(|g| g.get(k).copied().unwrap_or(0.0)),
                balanced_share: kept.get(k).copied().unwrap_or(0.0),
            });
        }
    }
    rows
}

pub fn distribution_csv(rows: &[DistributionRow]) -> String {
    let mut out = String::from("step_task,task,type,real_share,generated_share,balanced_share\n");
    for r in rows {
        let generated = r.generated_share.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step_task, r.task, r.type_index, r.real_share, generated, r.balanced_share
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub stages: Vec<StageStats>,
    pub distribution: Vec<DistributionRow>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub seeds: Vec<SeedReport>,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    pub fn mean_ap(&self) -> f64 {
        self.seeds.iter().map(|s| s.metrics.ap).sum::<f64>() / self.seeds.len() as f64
    }

    /// Mean AF over seeds, `None` for single-task streams.
    pub fn mean_af(&self) -> Option<f64> {
        let afs: Option<Vec<f64>> = self.seeds.iter().map(|s| s.metrics.af).collect();
        afs.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    strategy: Strategy,
    seeds: Vec<u64>,
    per_seed: BTreeMap<String, &'a MetricsReport>,
    mean_ap: f64,
    mean_af: Option<f64>,
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

struct RunLog {
    path: PathBuf,
    text: String,
}

impl RunLog {
    fn new(path: PathBuf) -> Self {
        RunLog { path, text: String::new() }
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let _ = writeln!(self.text, "[{}.{:03}] {}", now.as_secs(), now.subsec_millis(), msg.as_ref());
        info!("{}", msg.as_ref());
    }

    fn flush(&self) -> Result<()> {
        write_atomic(&self.path, self.text.as_bytes())
    }
}

/// Runs every configured seed and writes all reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let source = config.open_source()?;
    run_experiment_with_source(config, source.as_ref())
}

/// Like [`run_experiment`], with task data drawn from `source`.
pub fn run_experiment_with_source(config: &ExperimentConfig, source: &dyn TaskSource) -> Result<ExperimentReport> {
    config.validate()?;
    let embedder = config.partition_embedder()?;
    let multi = config.seeds.len() > 1;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = if multi {
            config.output_dir.join(format!("seed_{seed}"))
        } else {
            config.output_dir.clone()
        };
        seeds.push(run_seed(config, source, &embedder, seed, &dir)?);
    }
    let report = ExperimentReport {
        strategy: config.plan.strategy,
        seeds,
        output_dir: config.output_dir.clone(),
    };
    if multi && config.wants(ReportFormat::Json) {
        let summary = Summary {
            strategy: report.strategy,
            seeds: config.seeds.clone(),
            per_seed: report.seeds.iter().map(|s| (s.seed.to_string(), &s.metrics)).collect(),
            mean_ap: report.mean_ap(),
            mean_af: report.mean_af(),
        };
        write_json(&config.output_dir.join("summary.json"), &summary)?;
    }
    Ok(report)
}

/// Mutable state of one seeded run.
struct SeedRun<'a> {
    embedder: &'a Embedder,
    seed: u64,
    plan: TrainingPlan,
    bucket_width: usize,
    learner: Learner,
    heads: Vec<GenerationHead>,
    partitions: BTreeMap<String, PartitionFn>,
    dists: BTreeMap<String, TypeDistribution>,
    real_memory: BTreeMap<String, Vec<Sample>>,
    past_images: BTreeMap<String, ImageView>,
}

struct Buffers {
    raw: Option<RehearsalBuffer>,
    balanced: RehearsalBuffer,
    pool_size: usize,
    m_hat: usize,
    failure_counts: BTreeMap<String, usize>,
}

impl SeedRun<'_> {
    fn generation_rng(&self, task: &str, head: &str) -> StreamRng {
        seed::stream(self.seed, "generate", &[task, head])
    }

    fn past_ids(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.task_id.clone()).collect()
    }

    fn build_buffers(&self, current: &TaskDataset) -> Result<Buffers> {
        let past = self.heads.len();
        let strategy = self.plan.strategy;
        let mut out = Buffers {
            raw: None,
            balanced: RehearsalBuffer::empty(BufferStage::Balanced),
            pool_size: 0,
            m_hat: 0,
            failure_counts: BTreeMap::new(),
        };
        if past == 0 || matches!(strategy, Strategy::SeqFt | Strategy::GabDynamic) {
            return Ok(out);
        }
        out.pool_size = self.plan.m / past;
        out.m_hat = self.plan.m_hat / past;
        let task = current.task_id.as_str();
        let mut balance_rng = seed::stream(self.seed, "balance", &[task]);

        if strategy == Strategy::RehearsalReal {
            let mut buffer = RehearsalBuffer::empty(BufferStage::Balanced);
            buffer.capacity = out.m_hat * past;
            for id in self.past_ids() {
                let memory = &self.real_memory[&id];
                let n = out.m_hat.min(memory.len());
                for i in index::sample(&mut balance_rng, memory.len(), n) {
                    buffer.entries.push(memory[i].clone());
                }
                buffer.per_task_per_type_counts.insert(id, vec![n]);
            }
            out.balanced = buffer;
            return Ok(out);
        }

        let partitions = TaskPartitions {
            embedder: self.embedder,
            fns: &self.partitions,
        };
        let current_images = current.image_view();

        if strategy == Strategy::GabConditioning {
            let mut pools = Vec::with_capacity(past);
            for head in &self.heads {
                let dist = &self.dists[&head.task_id];
                let labels = &self.partitions[&head.task_id]
                    .classifier
                    .as_ref()
                    .expect("conditioning uses the classifier partition")
                    .labels;
                let mut rng = self.generation_rng(task, &head.task_id);
                let mut pool = PseudoDataset::empty(&head.task_id, task);
                for (label, quota) in labels.iter().zip(allocate_quotas(dist, out.m_hat)) {
                    let forced = Conditioned { head, label };
                    let part = build_pseudo_dataset(&forced, &current_images, quota, ImagePolicy::CurrentTask, &mut rng)?;
                    pool.failure_count += part.failure_count;
                    pool.samples.extend(part.samples);
                }
                out.failure_counts.insert(head.task_id.clone(), pool.failure_count);
                pools.push(pool);
            }
            let mut buffer = RehearsalBuffer::raw(&pools, &partitions)?;
            buffer.stage = BufferStage::Balanced;
            buffer.capacity = out.m_hat * past;
            out.balanced = buffer;
            return Ok(out);
        }

        let mut pools = Vec::with_capacity(past);
        for head in &self.heads {
            let mut rng = self.generation_rng(task, &head.task_id);
            let mut pool = if strategy == Strategy::GabPastimages {
                let images = &self.past_images[&head.task_id];
                build_pseudo_dataset(head, images, out.pool_size, ImagePolicy::PastImages, &mut rng)?
            } else {
                build_pseudo_dataset(head, &current_images, out.pool_size, ImagePolicy::CurrentTask, &mut rng)?
            };
            if strategy == Strategy::GabSelf {
                pool = self_label_answers(&self.learner, &pool);
            }
            out.failure_counts.insert(head.task_id.clone(), pool.failure_count);
            pools.push(pool);
        }
        out.raw = Some(RehearsalBuffer::raw(&pools, &partitions)?);
        out.balanced = if strategy == Strategy::GabNoBalance {
            assemble_naive_buffer(&pools, Some(&partitions), out.m_hat, &mut balance_rng)?
        } else {
            assemble_balanced_buffer(&pools, &partitions, &self.dists, out.m_hat, &mut balance_rng)?
        };
        Ok(out)
    }

    fn finish_task(&mut self, train: &TaskDataset) -> Result<()> {
        let id = train.task_id.clone();
        if let Some(kind) = self.plan.strategy.partition_kind() {
            let f = fit_partition(kind, train, self.embedder, self.plan.k_clusters, self.seed)?;
            let dist = type_distribution(train, &f, self.embedder)?;
            self.partitions.insert(id.clone(), f);
            self.dists.insert(id.clone(), dist);
        }
        match self.plan.strategy {
            Strategy::RehearsalReal => {
                let mut rng = seed::stream(self.seed, "memory", &[&id]);
                let n = self.plan.m_hat.min(train.len());
                let mut picked = index::sample(&mut rng, train.len(), n).into_vec();
                picked.sort_unstable();
                self.real_memory.insert(id, picked.into_iter().map(|i| train.samples[i].clone()).collect());
            }
            Strategy::GabPastimages => {
                self.past_images.insert(id, train.image_view());
            }
            _ => {}
        }
        Ok(())
    }
}

/// A head forced to produce one question type.
struct Conditioned<'a> {
    head: &'a GenerationHead,
    label: &'a str,
}

impl QaGenerator for Conditioned<'_> {
    fn source_task(&self) -> &str {
        &self.head.task_id
    }

    fn generate(&self, image: &[f64], rng: &mut StreamRng) -> String {
        // an unknown label yields text without '?', counted as a failure
        self.head.generate_conditioned(image, self.label, rng).unwrap_or_default()
    }
}

struct SeedOutputs {
    dir: PathBuf,
    csv: bool,
    json: bool,
}

impl SeedOutputs {
    fn write_matrix(&self, matrix: &AccuracyMatrix) -> Result<()> {
        if self.csv {
            write_atomic(&self.dir.join("accuracy_matrix.csv"), matrix.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

fn run_seed(
    config: &ExperimentConfig,
    source: &dyn TaskSource,
    embedder: &Embedder,
    seed: u64,
    dir: &Path,
) -> Result<SeedReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let outputs = SeedOutputs {
        dir: dir.to_path_buf(),
        csv: config.wants(ReportFormat::Csv),
        json: config.wants(ReportFormat::Json),
    };
    let mut log = RunLog::new(dir.join("run_log.txt"));
    let order = source.task_ids();
    let mut plan = config.plan.clone();
    plan.seed = seed;
    plan.task_order = order.clone();
    log.line(format!(
        "seed {seed}: strategy {} on {} tasks, M={} M_hat={} tau={} epochs={} step={}",
        plan.strategy,
        order.len(),
        plan.m,
        plan.m_hat,
        plan.tau,
        config.learner.epochs_per_task,
        config.learner.step_size
    ));

    let mut matrix = AccuracyMatrix::new(order.clone());
    let result = run_tasks(config, source, embedder, seed, &plan, &outputs, &mut matrix, &mut log);
    let (stages, distribution, tv) = match result {
        Ok(r) => r,
        Err((task, e)) => {
            log.line(format!("aborted at task {task}: {e}"));
            outputs.write_matrix(&matrix)?;
            log.flush()?;
            return Err(Error::Run {
                seed,
                task,
                source: Box::new(e),
            });
        }
    };

    let metrics = MetricsReport::from_matrix(&matrix, tv)?;
    outputs.write_matrix(&matrix)?;
    if outputs.csv {
        write_atomic(&dir.join("distribution_report.csv"), distribution_csv(&distribution).as_bytes())?;
    }
    if outputs.json {
        write_json(&dir.join("metrics.json"), &metrics)?;
        write_json(
            &dir.join("buffer_stats.json"),
            &serde_json::json!({ "strategy": plan.strategy, "seed": seed, "stages": stages }),
        )?;
    }
    log.line(format!(
        "done: AP={:.4} AF={}",
        metrics.ap,
        metrics.af.map(|a| format!("{a:.4}")).unwrap_or_else(|| "undefined".into())
    ));
    log.flush()?;
    Ok(SeedReport {
        seed,
        matrix,
        metrics,
        stages,
        distribution,
        output_dir: dir.to_path_buf(),
    })
}

type TaskResult<T> = std::result::Result<T, (String, Error)>;
type RunOutputs = (Vec<StageStats>, Vec<DistributionRow>, BTreeMap<String, f64>);

#[allow(clippy::too_many_arguments)]
fn run_tasks(
    config: &ExperimentConfig,
    source: &dyn TaskSource,
    embedder: &Embedder,
    seed: u64,
    plan: &TrainingPlan,
    outputs: &SeedOutputs,
    matrix: &mut AccuracyMatrix,
    log: &mut RunLog,
) -> TaskResult<RunOutputs> {
    let order = source.task_ids();
    let ctx = |task: &str| {
        let task = task.to_string();
        move |e: Error| (task, e)
    };

    // test splits are read once, before any task is trained
    let mut tests = Vec::with_capacity(order.len());
    for id in &order {
        tests.push(source.load(id, Split::Test).map_err(ctx(id))?);
    }

    let mut run = SeedRun {
        embedder,
        seed,
        plan: plan.clone(),
        bucket_width: config.effective_bucket_width(),
        learner: Learner::new(source.feature_dim(), config.learner, seed),
        heads: Vec::new(),
        partitions: BTreeMap::new(),
        dists: BTreeMap::new(),
        real_memory: BTreeMap::new(),
        past_images: BTreeMap::new(),
    };
    let mut stages = Vec::new();
    let mut distribution = Vec::new();
    let mut tv = BTreeMap::new();

    for (t, id) in order.iter().enumerate() {
        let mut step = || -> Result<()> {
            let train = source.load(id, Split::Train)?;
            let val = source.load(id, Split::Val)?;
            let buffers = run.build_buffers(&train)?;
            let past_ids = run.past_ids();

            let mut dynamic = (run.plan.strategy == Strategy::GabDynamic && !run.heads.is_empty()).then(|| {
                DynamicReplay {
                    heads: run.heads.iter().collect(),
                    rng: seed::stream(seed, "dynamic", &[id]),
                }
            });
            let (report, head): (TrainReport, GenerationHead) = joint_task_step(
                &mut run.learner,
                &train,
                &buffers.balanced,
                Some(&val),
                dynamic.as_mut(),
                run.plan.tau,
                run.bucket_width,
            )?;
            drop(dynamic);
            run.heads.push(head);
            run.finish_task(&train)?;

            for (j, test) in tests.iter().enumerate().take(t + 1) {
                matrix.set(t, j, run.learner.evaluate(test))?;
            }
            let row: Vec<String> = (0..=t)
                .map(|j| format!("{:.4}", matrix.get(t, j).unwrap_or(f64::NAN)))
                .collect();
            log.line(format!(
                "task {t} ({id}): buffer {} (m_hat {}), best epoch {}, row [{}]",
                buffers.balanced.len(),
                buffers.m_hat,
                report.best_epoch,
                row.join(", ")
            ));
            for w in &buffers.balanced.warnings {
                log.line(format!("warning: {w}"));
            }

            if !past_ids.is_empty() {
                distribution.extend(emit_distribution_report(
                    id,
                    buffers.raw.as_ref(),
                    &buffers.balanced,
                    &run.dists,
                    &past_ids,
                ));
            }
            if t + 1 == order.len() {
                for s in &past_ids {
                    if let (Some(dist), Some(shares)) = (run.dists.get(s), buffers.balanced.type_shares(s)) {
                        tv.insert(s.clone(), total_variation(&dist.probs, &shares)?);
                    }
                }
            }
            stages.push(StageStats {
                step: t,
                task: id.clone(),
                pool_size_per_task: buffers.pool_size,
                m_hat: buffers.m_hat,
                raw: buffers.raw.as_ref().map(|r| r.per_task_per_type_counts.clone()),
                balanced: buffers.balanced.per_task_per_type_counts.clone(),
                buffer_size: buffers.balanced.len(),
                failure_counts: buffers.failure_counts.clone(),
                warnings: buffers.balanced.warnings.clone(),
                best_epoch: report.best_epoch,
                val_accuracy: report.val_accuracy,
                dynamic_samples: report.dynamic_samples,
            });

            if outputs.json {
                if let (Some(f), Some(d)) = (run.partitions.get(id), run.dists.get(id)) {
                    write_json(&outputs.dir.join("meta_stats").join(format!("{id}.json")), &MetaStats::new(f, d))?;
                }
            }
            if config.checkpoints {
                let ckpt = run.learner.to_checkpoint(id, &run.plan);
                write_json(&outputs.dir.join("checkpoints").join(format!("task_{t:02}_{id}.json")), &ckpt)?;
                write_json(
                    &outputs.dir.join("checkpoints").join(format!("head_{id}.json")),
                    run.heads.last().expect("pushed above"),
                )?;
            }
            Ok(())
        };
        step().map_err(ctx(id))?;
        outputs.write_matrix(matrix).map_err(ctx(id))?;
    }
    Ok((stages, distribution, tv))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[plan]
strategy = "gab_clustering"
M = 200
M_hat = 50
K_clusters = 3

[world]
num_tasks = 2
types_per_task = [2, 2]
type_priors = [[0.551, 0.449], [0.5, 0.5]]
templates_per_type = 2
attribute_dim = 16
samples_per_task = { train = 100, val = 20, test = 20 }
conflict_degree = 0.5
seed = 3
"#;

    #[test]
    fn parses_toml_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, false).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.report_formats, vec![ReportFormat::Csv, ReportFormat::Json]);
        assert_eq!(cfg.learner, LearnerConfig::default());
        assert_eq!(cfg.effective_bucket_width(), 4);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&json, true).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_k = MINIMAL.replace("K_clusters = 3", "");
        assert!(matches!(ExperimentConfig::parse(&no_k, false), Err(Error::Config(_))));
        let typo = MINIMAL.replace("M_hat", "M_hats");
        assert!(ExperimentConfig::parse(&typo, false).is_err());
        let both = format!("stream = \"s.json\"\n{MINIMAL}");
        assert!(ExperimentConfig::parse(&both, false).is_err());
        let big = MINIMAL.replace("M_hat = 50", "M_hat = 500");
        assert!(ExperimentConfig::parse(&big, false).is_err());
    }

    #[test]
    fn distribution_rows_for_empty_buffer_are_zero() {
        let mut real = BTreeMap::new();
        real.insert("a".to_string(), TypeDistribution::from_counts("a", vec![3, 1]).unwrap());
        let rows = emit_distribution_report(
            "b",
            None,
            &RehearsalBuffer::empty(BufferStage::Balanced),
            &real,
            &["a".to_string()],
        );
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.balanced_share == 0.0 && r.generated_share.is_none()));
        assert_eq!(
            distribution_csv(&rows).lines().nth(1).unwrap(),
            "b,a,0,0.75,,0"
        );
    }
}
