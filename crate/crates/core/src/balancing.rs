//! Question-type partitioning and distribution-matched replay buffers.
//!
//! Each past task keeps a fitted partition function and the type distribution
//! of its real questions. Those meta-statistics are all that survives of the
//! task's data; the generated pool is re-sampled so every type `k` of task `s`
//! receives `ceil(p_s^k * m_hat)` entries.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskDataset};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::generation::PseudoDataset;
use crate::kmeans::{self, kmeans};
use crate::seed::{self, StreamRng};
use crate::softmax::LinearSoftmax;

pub const CLASSIFIER_EPOCHS: usize = 50;
pub const CLASSIFIER_STEP_SIZE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    pub task_id: String,
    pub probs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl TypeDistribution {
    pub fn from_counts(task_id: impl Into<String>, counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(Error::schema("counts", "type distribution needs a positive total"));
        }
        Ok(TypeDistribution {
            task_id: task_id.into(),
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            counts,
        })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Classifier,
    Clustering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeClassifier {
    /// Type labels, index-aligned with the model's classes.
    pub labels: Vec<String>,
    /// Input is the question embedding followed by a constant 1.
    pub model: LinearSoftmax,
}

/// A fitted map from question text to a type index in `0..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFn {
    pub task_id: String,
    pub kind: PartitionKind,
    pub classifier: Option<TypeClassifier>,
    pub centroids: Option<Vec<Vec<f64>>>,
    pub embedder_ref: String,
}

fn with_bias(mut v: Vec<f64>) -> Vec<f64> {
    v.push(1.0);
    v
}

/// Trains a type classifier on the meta labels of a task's questions.
pub fn fit_classifier_partition(dataset: &TaskDataset, embedder: &Embedder, seed: u64) -> Result<PartitionFn> {
    let mut labels = BTreeSet::new();
    for s in &dataset.samples {
        let label = s.qtype.as_ref().ok_or_else(|| Error::MissingMetaInfo(s.image_id.clone()))?;
        labels.insert(label.clone());
    }
    let labels: Vec<String> = labels.into_iter().collect();
    if labels.is_empty() {
        return Err(Error::schema("samples", "cannot fit a classifier on an empty dataset"));
    }

    let mut xs = Vec::with_capacity(dataset.len());
    let mut ys = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        xs.push(with_bias(embedder.embed(&s.question)?));
        ys.push(labels.binary_search(s.qtype.as_ref().expect("checked above")).expect("collected label"));
    }

    let mut model = LinearSoftmax::new(embedder.dim() + 1, labels.len());
    if labels.len() > 1 {
        let mut rng = seed::stream(seed, "type-classifier", &[&dataset.task_id]);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..CLASSIFIER_EPOCHS {
            shuffle(&mut order, &mut rng);
            for &i in &order {
                model.sgd_step(&xs[i], ys[i], CLASSIFIER_STEP_SIZE);
            }
        }
    }

    Ok(PartitionFn {
        task_id: dataset.task_id.clone(),
        kind: PartitionKind::Classifier,
        classifier: Some(TypeClassifier { labels, model }),
        centroids: None,
        embedder_ref: embedder.config_id().to_string(),
    })
}

/// Clusters a task's questions into `k` types with k-means on their embeddings.
pub fn fit_clustering_partition(
    task_id: &str,
    questions: &[&str],
    embedder: &Embedder,
    k: usize,
    seed: u64,
) -> Result<PartitionFn> {
    if k == 0 || questions.len() < k {
        return Err(Error::InsufficientData {
            have: questions.len(),
            need: k.max(1),
        });
    }
    let points = questions
        .iter()
        .map(|q| embedder.embed(q))
        .collect::<Result<Vec<_>>>()?;
    let distinct: BTreeSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData {
            have: distinct.len(),
            need: k,
        });
    }
    let fit = kmeans(&points, k, seed, kmeans::DEFAULT_MAX_ITERS)?;
    Ok(PartitionFn {
        task_id: task_id.to_string(),
        kind: PartitionKind::Clustering,
        classifier: None,
        centroids: Some(fit.centroids),
        embedder_ref: embedder.config_id().to_string(),
    })
}

impl PartitionFn {
    pub fn k(&self) -> usize {
        match (&self.classifier, &self.centroids) {
            (Some(c), _) => c.labels.len(),
            (None, Some(c)) => c.len(),
            (None, None) => 0,
        }
    }

    /// Type index of one question: classifier argmax or nearest centroid,
    /// ties toward the lowest index.
    pub fn partition(&self, question: &str, embedder: &Embedder) -> Result<usize> {
        if embedder.config_id() != self.embedder_ref {
            return Err(Error::EmbedderMismatch {
                expected: self.embedder_ref.clone(),
                found: embedder.config_id().to_string(),
            });
        }
        let e = embedder.embed(question)?;
        match (self.kind, &self.classifier, &self.centroids) {
            (PartitionKind::Classifier, Some(c), _) => Ok(c.model.predict(&with_bias(e))),
            (PartitionKind::Clustering, _, Some(c)) => Ok(kmeans::nearest(c, &e)),
            _ => Err(Error::schema("partition", "partition function lacks its fitted parameters")),
        }
    }

    pub fn labels(&self, questions: &[&str], embedder: &Embedder) -> Result<Vec<usize>> {
        questions.iter().map(|q| self.partition(q, embedder)).collect()
    }
}

/// Type distribution of a dataset under a partition function.
pub fn type_distribution(dataset: &TaskDataset, partition: &PartitionFn, embedder: &Embedder) -> Result<TypeDistribution> {
    let mut counts = vec![0usize; partition.k()];
    for s in &dataset.samples {
        counts[partition.partition(&s.question, embedder)?] += 1;
    }
    TypeDistribution::from_counts(dataset.task_id.clone(), counts)
}

/// `ceil(p_k * m_hat)` per type, in exact integer arithmetic on the counts.
pub fn allocate_quotas(dist: &TypeDistribution, m_hat: usize) -> Vec<usize> {
    let total = dist.total() as u128;
    dist.counts
        .iter()
        .map(|&c| (c as u128 * m_hat as u128).div_ceil(total) as usize)
        .collect()
}

/// Caps targets at availability and hands any shortfall to the remaining
/// types of the same task in proportion to their probabilities.
fn redistribute(quotas: &[usize], available: &[usize], probs: &[f64]) -> Vec<usize> {
    let mut target: Vec<usize> = quotas.iter().zip(available).map(|(&q, &a)| q.min(a)).collect();
    let mut deficit: usize = quotas.iter().sum::<usize>() - target.iter().sum::<usize>();
    while deficit > 0 {
        let open: Vec<usize> = (0..target.len()).filter(|&k| available[k] > target[k]).collect();
        if open.is_empty() {
            break;
        }
        let mut weights: Vec<f64> = open.iter().map(|&k| probs[k]).collect();
        if weights.iter().all(|&w| w <= 0.0) {
            weights = vec![1.0; open.len()];
        }
        let shares = apportion(deficit, &weights);
        let mut moved = 0;
        for (&k, share) in open.iter().zip(shares) {
            let add = share.min(available[k] - target[k]);
            target[k] += add;
            moved += add;
        }
        deficit -= moved;
        if moved == 0 {
            break;
        }
    }
    target
}

/// Largest-remainder split of `total` by `weights`; ties go to the lowest index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut shares: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total.saturating_sub(shares.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[k] += 1;
        left -= 1;
    }
    shares
}

fn shuffle<T>(items: &mut [T], rng: &mut StreamRng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferStage {
    Raw,
    Balanced,
}

/// Replay samples with per-task, per-type bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    pub stage: BufferStage,
    pub entries: Vec<Sample>,
    /// Task id to counts per type index.
    pub per_task_per_type_counts: BTreeMap<String, Vec<usize>>,
    pub capacity: usize,
    pub warnings: Vec<String>,
}

impl RehearsalBuffer {
    pub fn empty(stage: BufferStage) -> Self {
        RehearsalBuffer {
            stage,
            entries: Vec::new(),
            per_task_per_type_counts: BTreeMap::new(),
            capacity: 0,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_count(&self, task: &str) -> usize {
        self.per_task_per_type_counts.get(task).map(|c| c.iter().sum()).unwrap_or(0)
    }

    /// Fraction of the task's entries falling into each type.
    pub fn type_shares(&self, task: &str) -> Option<Vec<f64>> {
        let counts = self.per_task_per_type_counts.get(task)?;
        let total: usize = counts.iter().sum();
        Some(
            counts
                .iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect(),
        )
    }

    /// The whole generated pools, unfiltered, as a raw-stage buffer.
    pub fn raw(pools: &[PseudoDataset], partitions: &TaskPartitions<'_>) -> Result<Self> {
        let mut buffer = RehearsalBuffer::empty(BufferStage::Raw);
        for pool in pools {
            let labels = partitions.label_pool(pool)?;
            let mut counts = vec![0; partitions.k(&pool.source_task)?];
            labels.iter().for_each(|&l| counts[l] += 1);
            buffer.per_task_per_type_counts.insert(pool.source_task.clone(), counts);
            buffer.entries.extend(pool.samples.iter().cloned());
        }
        buffer.capacity = buffer.entries.len();
        Ok(buffer)
    }
}

/// Partition functions of past tasks together with the embedder they use.
#[derive(Debug, Clone, Copy)]
pub struct TaskPartitions<'a> {
    pub embedder: &'a Embedder,
    pub fns: &'a BTreeMap<String, PartitionFn>,
}

impl TaskPartitions<'_> {
    fn get(&self, task: &str) -> Result<&PartitionFn> {
        self.fns.get(task).ok_or_else(|| Error::MissingTask(task.to_string()))
    }

    pub fn k(&self, task: &str) -> Result<usize> {
        Ok(self.get(task)?.k())
    }

    pub fn label_pool(&self, pool: &PseudoDataset) -> Result<Vec<usize>> {
        let f = self.get(&pool.source_task)?;
        pool.samples.iter().map(|s| f.partition(&s.question, self.embedder)).collect()
    }
}

fn sample_indices(from: &[usize], amount: usize, rng: &mut StreamRng) -> Vec<usize> {
    index::sample(rng, from.len(), amount)
        .into_iter()
        .map(|i| from[i])
        .collect()
}

/// Draws a type-balanced buffer of about `m_hat` entries per past task.
///
/// `dists` must come from each task's real data; the pools are the only
/// samples consulted.
pub fn assemble_balanced_buffer(
    pools: &[PseudoDataset],
    partitions: &TaskPartitions<'_>,
    dists: &BTreeMap<String, TypeDistribution>,
    m_hat: usize,
    rng: &mut StreamRng,
) -> Result<RehearsalBuffer> {
    let mut buffer = RehearsalBuffer::empty(BufferStage::Balanced);
    buffer.capacity = m_hat * pools.len();
    if m_hat == 0 {
        return Ok(buffer);
    }
    for pool in pools {
        let task = &pool.source_task;
        if pool.is_empty() {
            return Err(Error::EmptyPool(task.clone()));
        }
        let dist = dists.get(task).ok_or_else(|| Error::MissingTask(task.clone()))?;
        let k = partitions.k(task)?;
        if dist.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: dist.k(),
            });
        }
        let mut slices = vec![Vec::new(); k];
        for (i, label) in partitions.label_pool(pool)?.into_iter().enumerate() {
            slices[label].push(i);
        }
        let quotas = allocate_quotas(dist, m_hat);
        let available: Vec<usize> = slices.iter().map(Vec::len).collect();
        let targets = redistribute(&quotas, &available, &dist.probs);
        if targets != quotas {
            let msg = format!(
                "task {task}: pool slices {available:?} cannot meet quotas {quotas:?}; drew {targets:?}"
            );
            warn!("{msg}");
            buffer.warnings.push(msg);
        }
        for (slice, &n) in slices.iter().zip(&targets) {
            for i in sample_indices(slice, n, rng) {
                buffer.entries.push(pool.samples[i].clone());
            }
        }
        buffer.per_task_per_type_counts.insert(task.clone(), targets);
    }
    Ok(buffer)
}

/// Uniform per-task sampling of `m_hat` entries, ignoring question types.
///
/// `labels` only feeds the bookkeeping; without it all entries of a task are
/// counted under type 0.
pub fn assemble_naive_buffer(
    pools: &[PseudoDataset],
    labels: Option<&TaskPartitions<'_>>,
    m_hat: usize,
    rng: &mut StreamRng,
) -> Result<RehearsalBuffer> {
    let mut buffer = RehearsalBuffer::empty(BufferStage::Balanced);
    buffer.capacity = m_hat * pools.len();
    if m_hat == 0 {
        return Ok(buffer);
    }
    for pool in pools {
        let task = &pool.source_task;
        if pool.is_empty() {
            return Err(Error::EmptyPool(task.clone()));
        }
        let n = m_hat.min(pool.len());
        if n < m_hat {
            let msg = format!("task {task}: pool holds {} entries, wanted {m_hat}", pool.len());
            warn!("{msg}");
            buffer.warnings.push(msg);
        }
        let all: Vec<usize> = (0..pool.len()).collect();
        let picked = sample_indices(&all, n, rng);
        let counts = match labels {
            Some(p) => {
                let f = p.get(task)?;
                let mut counts = vec![0; f.k()];
                for &i in &picked {
                    counts[f.partition(&pool.samples[i].question, p.embedder)?] += 1;
                }
                counts
            }
            None => vec![n],
        };
        buffer.entries.extend(picked.iter().map(|&i| pool.samples[i].clone()));
        buffer.per_task_per_type_counts.insert(task.clone(), counts);
    }
    Ok(buffer)
}

/// Persisted per-task meta-statistics (`meta_stats.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStats {
    pub task: String,
    pub kind: PartitionKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub probs: Vec<f64>,
    pub counts: Vec<usize>,
    pub centroids: Option<Vec<Vec<f64>>>,
    pub classifier: Option<TypeClassifier>,
    pub embedder_ref: String,
}

impl MetaStats {
    pub fn new(partition: &PartitionFn, dist: &TypeDistribution) -> Self {
        MetaStats {
            task: partition.task_id.clone(),
            kind: partition.kind,
            k: partition.k(),
            probs: dist.probs.clone(),
            counts: dist.counts.clone(),
            centroids: partition.centroids.clone(),
            classifier: partition.classifier.clone(),
            embedder_ref: partition.embedder_ref.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(PartitionFn, TypeDistribution)> {
        let dist = TypeDistribution::from_counts(self.task.clone(), self.counts)?;
        let partition = PartitionFn {
            task_id: self.task,
            kind: self.kind,
            classifier: self.classifier,
            centroids: self.centroids,
            embedder_ref: self.embedder_ref,
        };
        if partition.k() != self.k || dist.k() != self.k {
            return Err(Error::schema("K", "does not match the stored parameters"));
        }
        Ok((partition, dist))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, Split};

    fn dist(counts: &[usize]) -> TypeDistribution {
        TypeDistribution::from_counts("s", counts.to_vec()).unwrap()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(allocate_quotas(&dist(&[551, 449]), 2500), vec![1378, 1123]);
        assert_eq!(allocate_quotas(&dist(&[7]), 5000), vec![5000]);
        assert_eq!(allocate_quotas(&dist(&[3, 3]), 10), vec![5, 5]);
        // 3/10 would overshoot to 4 under floating-point ceil
        assert_eq!(allocate_quotas(&dist(&[3, 7]), 10), vec![3, 7]);
    }

    #[test]
    fn redistribution_stays_within_task() {
        assert_eq!(redistribute(&[50, 50], &[500, 0], &[0.5, 0.5]), vec![100, 0]);
        assert_eq!(redistribute(&[50, 30, 20], &[500, 10, 500], &[0.5, 0.3, 0.2]), vec![64, 10, 26]);
        // total availability below quota: everything is taken
        assert_eq!(redistribute(&[5, 5], &[2, 3], &[0.5, 0.5]), vec![2, 3]);
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 2.0]), vec![0, 7]);
    }

    fn labelled(task: &str, questions: &[(&str, &str)]) -> TaskDataset {
        let samples = questions
            .iter()
            .enumerate()
            .map(|(i, (q, t))| Sample {
                image_id: format!("{task}{i}"),
                image_features: vec![],
                question: q.to_string(),
                answer: "a".into(),
                task_id: task.into(),
                qtype: Some(t.to_string()),
                origin: Origin::Real,
            })
            .collect();
        TaskDataset::new(task, Split::Train, samples).unwrap()
    }

    #[test]
    fn classifier_partition_learns_separable_vocabularies() {
        let e = Embedder::default();
        let mut rows = Vec::new();
        for obj in ["cup", "dog", "car", "tree", "lamp"] {
            rows.push((format!("what colour is the {obj}?"), "colour"));
            rows.push((format!("how many {obj} are there?"), "count"));
        }
        let q: Vec<(&str, &str)> = rows.iter().map(|(a, b)| (a.as_str(), *b)).collect();
        let ds = labelled("s", &q);
        let f = fit_classifier_partition(&ds, &e, 0).unwrap();
        assert_eq!(f.k(), 2);
        for (question, label) in &q {
            let want = if *label == "colour" { 0 } else { 1 };
            assert_eq!(f.partition(question, &e).unwrap(), want);
        }
        let d = type_distribution(&ds, &f, &e).unwrap();
        assert_eq!(d.counts, vec![5, 5]);
    }

    #[test]
    fn classifier_needs_meta_labels_and_handles_one_type() {
        let e = Embedder::default();
        let mut ds = labelled("s", &[("is it red?", "a"), ("is it blue?", "a")]);
        let f = fit_classifier_partition(&ds, &e, 0).unwrap();
        assert_eq!(f.k(), 1);
        assert_eq!(f.partition("anything at all?", &e).unwrap(), 0);
        assert_eq!(type_distribution(&ds, &f, &e).unwrap().probs, vec![1.0]);
        ds.samples[1].qtype = None;
        assert!(matches!(fit_classifier_partition(&ds, &e, 0), Err(Error::MissingMetaInfo(_))));
    }

    #[test]
    fn partition_rejects_foreign_embedder() {
        let e = Embedder::default();
        let ds = labelled("s", &[("is it red?", "a"), ("how big?", "b")]);
        let f = fit_clustering_partition("s", &["is it red?", "how big?"], &e, 2, 0).unwrap();
        let other = Embedder::hashed(64, [1]).unwrap();
        assert!(matches!(f.partition("is it red?", &other), Err(Error::EmbedderMismatch { .. })));
        assert!(type_distribution(&ds, &f, &e).is_ok());
    }

    #[test]
    fn clustering_needs_enough_distinct_questions() {
        let e = Embedder::default();
        assert!(matches!(
            fit_clustering_partition("s", &["a?"], &e, 2, 0),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            fit_clustering_partition("s", &["a?", "a?", "a?"], &e, 2, 0),
            Err(Error::InsufficientData { have: 1, need: 2 })
        ));
    }

    #[test]
    fn meta_stats_round_trip() {
        let e = Embedder::default();
        let ds = labelled("s", &[("is it red?", "a"), ("how big?", "b"), ("is it green?", "a")]);
        let f = fit_clustering_partition("s", &["is it red?", "how big?", "is it green?"], &e, 2, 0).unwrap();
        let d = type_distribution(&ds, &f, &e).unwrap();
        let json = serde_json::to_string(&MetaStats::new(&f, &d)).unwrap();
        assert!(json.contains("\"K\":2"));
        let (f2, d2) = serde_json::from_str::<MetaStats>(&json).unwrap().into_parts().unwrap();
        assert_eq!(f, f2);
        assert_eq!(d, d2);
    }
}
