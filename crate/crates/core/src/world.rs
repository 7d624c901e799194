//! Seedable synthetic continual-VQA streams with known ground truth.
//!
//! Images are vectors of `attribute_dim / buckets_per_attribute` attribute
//! blocks; a present attribute is a one-hot bucket inside its block, plus
//! Gaussian noise everywhere. Every question type of every task queries one
//! attribute and answers with a type-specific word for the attribute's
//! bucket. Tasks reuse attributes of earlier tasks (controlled by
//! `conflict_degree`), so the same feature directions map to different
//! answers in different tasks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Origin, Sample, Split, TaskDataset, TaskSplits, TaskStream};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

const DEFAULT_TASK_NAMES: [&str; 5] = ["objects", "attributes", "relations", "logical", "knowledge"];
const NOUN_POOL_SIZE: usize = 12;
const NOUNS_PER_TASK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SampleCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_tasks: usize,
    pub types_per_task: Vec<usize>,
    pub type_priors: Vec<Vec<f64>>,
    pub templates_per_type: usize,
    pub attribute_dim: usize,
    pub samples_per_task: SampleCounts,
    /// Fraction of each later task's types that query attributes already
    /// used by earlier tasks.
    pub conflict_degree: f64,
    pub seed: u64,
    #[serde(default = "default_buckets")]
    pub buckets_per_attribute: usize,
    /// Probability that a non-queried attribute is present in an image.
    #[serde(default = "default_presence")]
    pub attribute_presence: f64,
    /// Standard deviation of the additive Gaussian feature noise.
    #[serde(default = "default_noise")]
    pub feature_noise: f64,
    #[serde(default)]
    pub task_names: Option<Vec<String>>,
}

fn default_buckets() -> usize {
    4
}

fn default_presence() -> f64 {
    0.8
}

fn default_noise() -> f64 {
    0.05
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_tasks: 5,
            types_per_task: vec![2, 3, 4, 2, 3],
            type_priors: vec![
                vec![0.551, 0.449],
                vec![0.36, 0.33, 0.31],
                vec![0.27, 0.26, 0.24, 0.23],
                vec![0.53, 0.47],
                vec![0.35, 0.33, 0.32],
            ],
            templates_per_type: 3,
            attribute_dim: 32,
            samples_per_task: SampleCounts {
                train: 2000,
                val: 400,
                test: 400,
            },
            conflict_degree: 0.5,
            seed: 0,
            buckets_per_attribute: default_buckets(),
            attribute_presence: default_presence(),
            feature_noise: default_noise(),
            task_names: None,
        }
    }
}

impl WorldSpec {
    pub fn num_attributes(&self) -> usize {
        self.attribute_dim / self.buckets_per_attribute.max(1)
    }

    pub fn task_ids(&self) -> Vec<String> {
        match &self.task_names {
            Some(names) => names.clone(),
            None if self.num_tasks <= DEFAULT_TASK_NAMES.len() => {
                DEFAULT_TASK_NAMES[..self.num_tasks].iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.num_tasks).map(|i| format!("task{i}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("world: {msg}")));
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive".into());
        }
        if self.types_per_task.len() != self.num_tasks || self.type_priors.len() != self.num_tasks {
            return bad("types_per_task and type_priors need one entry per task".into());
        }
        if self.buckets_per_attribute < 2 || !self.attribute_dim.is_multiple_of(self.buckets_per_attribute) {
            return bad("attribute_dim must be a multiple of buckets_per_attribute (>= 2)".into());
        }
        for (t, (&k, p)) in self.types_per_task.iter().zip(&self.type_priors).enumerate() {
            if k == 0 || p.len() != k {
                return bad(format!("task {t}: prior length must equal its positive type count"));
            }
            if k > self.num_attributes() {
                return bad(format!("task {t}: {k} types but only {} attributes", self.num_attributes()));
            }
            if p.iter().any(|&x| x.is_nan() || x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("task {t}: prior is not a distribution"));
            }
        }
        if self.templates_per_type == 0 {
            return bad("templates_per_type must be positive".into());
        }
        let c = self.samples_per_task;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.conflict_degree) {
            return bad("conflict_degree must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.attribute_presence) {
            return bad("attribute_presence must lie in [0, 1]".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be non-negative".into());
        }
        let ids = self.task_ids();
        if ids.len() != self.num_tasks || ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return bad("task_names must be unique with one per task".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldType {
    pub label: String,
    pub attribute: usize,
    /// Question patterns, each followed by a noun and `?`.
    pub templates: Vec<String>,
    /// Answer for each bucket of `attribute`.
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTask {
    pub id: String,
    pub types: Vec<WorldType>,
    pub nouns: Vec<String>,
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub tasks: Vec<WorldTask>,
}

struct Lexicon {
    rng: StreamRng,
    used: BTreeSet<String>,
}

impl Lexicon {
    fn word(&mut self) -> String {
        const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
        const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
        loop {
            let mut w = String::new();
            for _ in 0..3 {
                w.push_str(ONSETS[self.rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[self.rng.random_range(0..VOWELS.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Assigns one attribute to every (task, type), distinct within a task.
fn assign_attributes(spec: &WorldSpec) -> Vec<Vec<usize>> {
    let n_attr = spec.num_attributes();
    let mut rng = seed::stream(spec.seed, "world-attributes", &[]);
    let mut usage = vec![0usize; n_attr];
    let mut out = Vec::with_capacity(spec.num_tasks);
    for (t, &k) in spec.types_per_task.iter().enumerate() {
        let n_reuse = if t == 0 { 0 } else { (spec.conflict_degree * k as f64).round() as usize };
        let mut chosen: Vec<usize> = Vec::with_capacity(k);

        let mut used_before: Vec<usize> = (0..n_attr).filter(|&a| usage[a] > 0).collect();
        used_before.shuffle(&mut rng);
        chosen.extend(used_before.into_iter().take(n_reuse));

        while chosen.len() < k {
            let mut free: Vec<usize> = (0..n_attr).filter(|a| !chosen.contains(a)).collect();
            free.shuffle(&mut rng);
            // stable sort keeps the shuffled order among equally used attributes
            free.sort_by_key(|&a| usage[a]);
            chosen.push(free[0]);
        }
        chosen.shuffle(&mut rng);
        for &a in &chosen {
            usage[a] += 1;
        }
        out.push(chosen);
    }
    out
}

/// Splits `n` into per-type counts proportional to `priors` by largest
/// remainder; ties go to the lower type index.
pub fn stratified_counts(priors: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let attributes = assign_attributes(&spec);
        let mut lex = Lexicon {
            rng: seed::stream(spec.seed, "world-lexicon", &[]),
            used: BTreeSet::new(),
        };
        let noun_pool: Vec<String> = (0..NOUN_POOL_SIZE).map(|_| lex.word()).collect();
        let mut tasks = Vec::with_capacity(spec.num_tasks);
        for (t, id) in spec.task_ids().into_iter().enumerate() {
            let mut nouns = noun_pool.clone();
            nouns.shuffle(&mut lex.rng);
            nouns.truncate(NOUNS_PER_TASK);
            nouns.sort();
            let types = attributes[t]
                .iter()
                .enumerate()
                .map(|(k, &attribute)| {
                    let head = lex.word();
                    let templates = (0..spec.templates_per_type)
                        .map(|_| format!("what {head} {}", lex.word()))
                        .collect();
                    let answers = (0..spec.buckets_per_attribute).map(|_| lex.word()).collect();
                    WorldType {
                        label: format!("{id}-q{k}"),
                        attribute,
                        templates,
                        answers,
                    }
                })
                .collect();
            tasks.push(WorldTask {
                id,
                types,
                nouns,
                priors: spec.type_priors[t].clone(),
            });
        }
        Ok(World { spec, tasks })
    }

    /// Ground-truth answer of a type for an image, if its attribute is present.
    pub fn answer(&self, task: usize, type_index: usize, features: &[f64]) -> Option<&str> {
        let ty = &self.tasks[task].types[type_index];
        let b = crate::generation::bucket_of(features, ty.attribute, self.spec.buckets_per_attribute)?;
        Some(&ty.answers[b])
    }

    fn samples(&self, task: usize, split: Split) -> Vec<Sample> {
        let spec = &self.spec;
        let wt = &self.tasks[task];
        let n = spec.samples_per_task.get(split);
        let width = spec.buckets_per_attribute;
        let mut rng = seed::stream(spec.seed, "world-samples", &[&wt.id, split.as_str()]);
        let noise = Normal::new(0.0, spec.feature_noise).expect("validated noise");

        let mut type_seq: Vec<usize> = stratified_counts(&wt.priors, n)
            .into_iter()
            .enumerate()
            .flat_map(|(k, c)| std::iter::repeat_n(k, c))
            .collect();
        type_seq.shuffle(&mut rng);

        type_seq
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let ty = &wt.types[k];
                let mut features = vec![0.0; spec.attribute_dim];
                let mut queried_bucket = 0;
                for a in 0..spec.num_attributes() {
                    let present = a == ty.attribute || rng.random::<f64>() < spec.attribute_presence;
                    let bucket = rng.random_range(0..width);
                    if present {
                        features[a * width + bucket] = 1.0;
                    }
                    if a == ty.attribute {
                        queried_bucket = bucket;
                    }
                }
                if spec.feature_noise > 0.0 {
                    for f in &mut features {
                        *f += noise.sample(&mut rng);
                    }
                }
                let template = &ty.templates[rng.random_range(0..ty.templates.len())];
                let noun = &wt.nouns[rng.random_range(0..wt.nouns.len())];
                Sample {
                    image_id: format!("{}-{}-{i:05}", wt.id, split.as_str()),
                    image_features: features,
                    question: format!("{template} {noun}?"),
                    answer: ty.answers[queried_bucket].clone(),
                    task_id: wt.id.clone(),
                    qtype: Some(ty.label.clone()),
                    origin: Origin::Real,
                }
            })
            .collect()
    }

    pub fn stream(&self) -> Result<TaskStream> {
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for (t, wt) in self.tasks.iter().enumerate() {
            let ds = |split| TaskDataset::new(wt.id.clone(), split, self.samples(t, split));
            tasks.push(TaskSplits {
                id: wt.id.clone(),
                train: ds(Split::Train)?,
                val: ds(Split::Val)?,
                test: ds(Split::Test)?,
            });
        }
        TaskStream::new(self.spec.attribute_dim, tasks)
    }
}

pub fn build_world(spec: &WorldSpec) -> Result<TaskStream> {
    World::new(spec.clone())?.stream()
}
