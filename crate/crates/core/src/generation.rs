//! Per-task question-answer generators and pseudo-dataset construction.
//!
//! A [`GenerationHead`] is fitted on one task's training data and then frozen.
//! Later tasks use it to pose that task's questions about *their own* images;
//! the generated text is cut into question and answer at the first `?`.
//!
//! The head is a counting model: a question is a template plus a final slot
//! word, templates belong to question types, and the answer is looked up from
//! the image's bucket in the feature block that best predicted the template's
//! answers during fitting. Type sampling probabilities are the empirical type
//! frequencies sharpened by a temperature `tau`; `tau < 1` reproduces the
//! over-production of frequent question types seen in trained generators.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageView, Origin, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::seed::StreamRng;
use crate::softmax::softmax;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BUCKET_WIDTH: usize = 4;
/// Generation attempts allowed per requested sample.
pub const RETRY_FACTOR: usize = 10;
/// Minimum activation for a feature block to count as present in an image.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// `p_k^(1/tau) / sum_j p_j^(1/tau)`, evaluated in log space.
pub fn sharpen(p: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "tau must be positive");
    let scaled: Vec<f64> = p.iter().map(|&x| x.ln() / tau).collect();
    softmax(&scaled)
}

/// Splits a question into its template pattern and trailing slot word.
fn parse_template(question: &str) -> Option<(String, String)> {
    let body = question.trim().strip_suffix('?')?;
    if body.contains('?') {
        return None;
    }
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let (slot, pattern) = tokens.split_last()?;
    if pattern.is_empty() {
        return None;
    }
    Some((pattern.join(" "), slot.to_string()))
}

/// Bucket (argmax position) of one feature block, or `None` when the block is
/// inactive in this image.
pub fn bucket_of(features: &[f64], block: usize, width: usize) -> Option<usize> {
    let start = block * width;
    let end = (start + width).min(features.len());
    if start >= end {
        return None;
    }
    let slice = &features[start..end];
    let mut best = 0;
    for (i, &v) in slice.iter().enumerate() {
        if v > slice[best] {
            best = i;
        }
    }
    (slice[best] >= PRESENCE_THRESHOLD).then_some(best)
}

fn draw(weights: &[f64], rng: &mut StreamRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub pattern: String,
    pub type_index: usize,
    /// Occurrence count within its type.
    pub weight: f64,
    /// Slot fillers with occurrence counts.
    pub slots: Vec<(String, f64)>,
    /// Feature block whose bucket determines the answer.
    pub answer_block: usize,
    /// Most frequent answer for each bucket of `answer_block`.
    pub answer_by_bucket: BTreeMap<usize, String>,
    /// Most frequent answer of the template overall.
    pub fallback_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationHead {
    pub task_id: String,
    pub feature_dim: usize,
    pub bucket_width: usize,
    pub sharpening_tau: f64,
    /// Distinct type labels in sorted order.
    pub type_labels: Vec<String>,
    /// Empirical log-frequencies of the types.
    pub type_logits: Vec<f64>,
    pub templates: Vec<TemplateEntry>,
}

/// Fits a generation head on one task's training split.
///
/// Questions without a `qtype` label form their own type, keyed by template.
pub fn fit_generation_head(dataset: &TaskDataset, tau: f64, bucket_width: usize) -> Result<GenerationHead> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if bucket_width == 0 {
        return Err(Error::Config("bucket width must be positive".into()));
    }
    let feature_dim = dataset
        .samples
        .first()
        .map(|s| s.image_features.len())
        .ok_or_else(|| Error::schema("samples", "cannot fit a head on an empty dataset"))?;
    let n_blocks = feature_dim.div_ceil(bucket_width);

    struct Acc<'a> {
        label: String,
        samples: Vec<(&'a Sample, String)>,
    }
    let mut by_pattern: BTreeMap<String, Acc> = BTreeMap::new();
    for s in &dataset.samples {
        let (pattern, slot) =
            parse_template(&s.question).ok_or_else(|| Error::UnmatchedTemplate(s.question.clone()))?;
        let label = s.qtype.clone().unwrap_or_else(|| pattern.clone());
        let acc = by_pattern.entry(pattern.clone()).or_insert_with(|| Acc {
            label: label.clone(),
            samples: Vec::new(),
        });
        if acc.label != label {
            return Err(Error::AmbiguousTemplate {
                template: pattern,
                first: acc.label.clone(),
                second: label,
            });
        }
        acc.samples.push((s, slot));
    }

    let type_labels: Vec<String> = by_pattern
        .values()
        .map(|a| a.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut type_counts = vec![0.0; type_labels.len()];

    let mut templates = Vec::with_capacity(by_pattern.len());
    for (pattern, acc) in &by_pattern {
        let type_index = type_labels.binary_search(&acc.label).expect("label collected above");
        type_counts[type_index] += acc.samples.len() as f64;

        let mut slots: BTreeMap<&str, f64> = BTreeMap::new();
        let mut overall: BTreeMap<&str, usize> = BTreeMap::new();
        for (s, slot) in &acc.samples {
            *slots.entry(slot.as_str()).or_default() += 1.0;
            *overall.entry(s.answer.as_str()).or_default() += 1;
        }

        let mut best_block = 0;
        let mut best_score = 0usize;
        let mut best_table: BTreeMap<Option<usize>, BTreeMap<&str, usize>> = BTreeMap::new();
        for block in 0..n_blocks {
            let mut table: BTreeMap<Option<usize>, BTreeMap<&str, usize>> = BTreeMap::new();
            for (s, _) in &acc.samples {
                let b = bucket_of(&s.image_features, block, bucket_width);
                *table.entry(b).or_default().entry(s.answer.as_str()).or_default() += 1;
            }
            let score: usize = table.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
            if block == 0 || score > best_score {
                best_block = block;
                best_score = score;
                best_table = table;
            }
        }

        templates.push(TemplateEntry {
            pattern: pattern.clone(),
            type_index,
            weight: acc.samples.len() as f64,
            slots: slots.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            answer_block: best_block,
            answer_by_bucket: best_table
                .into_iter()
                .filter_map(|(b, counts)| b.map(|b| (b, mode(&counts))))
                .collect(),
            fallback_answer: mode(&overall),
        });
    }

    let total: f64 = type_counts.iter().sum();
    Ok(GenerationHead {
        task_id: dataset.task_id.clone(),
        feature_dim,
        bucket_width,
        sharpening_tau: tau,
        type_labels,
        type_logits: type_counts.iter().map(|c| (c / total).ln()).collect(),
        templates,
    })
}

/// Most frequent key; ties go to the lexicographically smallest.
fn mode(counts: &BTreeMap<&str, usize>) -> String {
    let mut best: Option<(&str, usize)> = None;
    for (&k, &c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k.to_string()).unwrap_or_default()
}

impl GenerationHead {
    /// Empirical type frequencies of the fitting data.
    pub fn empirical_distribution(&self) -> Vec<f64> {
        self.type_logits.iter().map(|l| l.exp()).collect()
    }

    /// Probabilities with which `generate_qa` draws each type.
    pub fn sampling_distribution(&self) -> Vec<f64> {
        sharpen(&self.empirical_distribution(), self.sharpening_tau)
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.type_labels.iter().position(|l| l == label)
    }

    /// Type of a question produced by this head's templates, if any.
    pub fn type_of_question(&self, question: &str) -> Option<usize> {
        let (pattern, _) = parse_template(question)?;
        self.templates
            .iter()
            .find(|t| t.pattern == pattern)
            .map(|t| t.type_index)
    }

    fn instantiate(&self, type_index: usize, image: &[f64], rng: &mut StreamRng) -> String {
        let candidates: Vec<&TemplateEntry> =
            self.templates.iter().filter(|t| t.type_index == type_index).collect();
        let weights: Vec<f64> = candidates.iter().map(|t| t.weight).collect();
        let template = candidates[draw(&weights, rng)];
        let slot_weights: Vec<f64> = template.slots.iter().map(|(_, w)| *w).collect();
        let slot = &template.slots[draw(&slot_weights, rng)].0;
        let answer = bucket_of(image, template.answer_block, self.bucket_width)
            .and_then(|b| template.answer_by_bucket.get(&b))
            .unwrap_or(&template.fallback_answer);
        format!("{} {}? {}", template.pattern, slot, answer)
    }

    /// Generates one concatenated `question? answer` string for an image.
    pub fn generate_qa(&self, image: &[f64], rng: &mut StreamRng) -> String {
        debug_assert_eq!(image.len(), self.feature_dim);
        let k = draw(&self.sampling_distribution(), rng);
        self.instantiate(k, image, rng)
    }

    /// Generates a question of a forced type regardless of the image content.
    pub fn generate_conditioned(&self, image: &[f64], forced_type: &str, rng: &mut StreamRng) -> Result<String> {
        let k = self
            .type_index(forced_type)
            .ok_or_else(|| Error::UnknownType(forced_type.to_string()))?;
        Ok(self.instantiate(k, image, rng))
    }
}

/// Anything that maps an image to generated `question? answer` text.
pub trait QaGenerator {
    fn source_task(&self) -> &str;
    fn generate(&self, image: &[f64], rng: &mut StreamRng) -> String;
}

impl QaGenerator for GenerationHead {
    fn source_task(&self) -> &str {
        &self.task_id
    }

    fn generate(&self, image: &[f64], rng: &mut StreamRng) -> String {
        self.generate_qa(image, rng)
    }
}

/// Cuts generated text at the first `?`: the question keeps the mark, the
/// trimmed remainder is the answer.
pub fn split_question_answer(text: &str) -> Result<(String, String)> {
    let idx = text
        .find('?')
        .ok_or_else(|| Error::GenerationFailure(format!("no '?' in `{text}`")))?;
    let question = text[..=idx].trim();
    let answer = text[idx + 1..].trim();
    if question.len() <= 1 {
        return Err(Error::GenerationFailure(format!("empty question in `{text}`")));
    }
    if answer.is_empty() {
        return Err(Error::GenerationFailure(format!("empty answer in `{text}`")));
    }
    Ok((question.to_string(), answer.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    /// Task whose questions are imitated.
    pub source_task: String,
    /// Task that supplied the images.
    pub image_task: String,
    pub samples: Vec<Sample>,
    pub failure_count: usize,
}

impl PseudoDataset {
    pub fn empty(source_task: &str, image_task: &str) -> Self {
        PseudoDataset {
            source_task: source_task.to_string(),
            image_task: image_task.to_string(),
            samples: Vec::new(),
            failure_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Whether a generator may be run on images of its own task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePolicy {
    CurrentTask,
    PastImages,
}

fn shuffled(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Generates `count` pseudo-samples of `generator`'s task on `images`.
///
/// Images are visited in shuffled passes. Outputs that fail to split are
/// counted and retried on the next image, within `RETRY_FACTOR * count`
/// attempts.
pub fn build_pseudo_dataset<G: QaGenerator + ?Sized>(
    generator: &G,
    images: &ImageView,
    count: usize,
    policy: ImagePolicy,
    rng: &mut StreamRng,
) -> Result<PseudoDataset> {
    let source = generator.source_task();
    if policy == ImagePolicy::CurrentTask && source == images.task_id() {
        return Err(Error::Config(format!(
            "generator for `{source}` may not replay on its own images"
        )));
    }
    let mut out = PseudoDataset::empty(source, images.task_id());
    if count == 0 {
        return Ok(out);
    }
    let budget = RETRY_FACTOR * count;
    let mut attempts = 0;
    let mut order = Vec::new();
    let mut cursor = 0;
    while out.samples.len() < count && attempts < budget && !images.is_empty() {
        if cursor == order.len() {
            order = shuffled(images.len(), rng);
            cursor = 0;
        }
        let (image_id, features) = images.get(order[cursor]);
        cursor += 1;
        attempts += 1;
        match split_question_answer(&generator.generate(features, rng)) {
            Ok((question, answer)) => out.samples.push(Sample {
                image_id: image_id.to_string(),
                image_features: features.to_vec(),
                question,
                answer,
                task_id: source.to_string(),
                qtype: None,
                origin: Origin::Generated,
            }),
            Err(_) => out.failure_count += 1,
        }
    }
    if out.samples.len() < count {
        return Err(Error::GenerationExhausted {
            requested: count,
            produced: out.samples.len(),
            attempts,
        });
    }
    Ok(out)
}

/// Replaces every generated answer with the learner's own prediction.
pub fn self_label_answers(learner: &Learner, pseudo: &PseudoDataset) -> PseudoDataset {
    let mut out = pseudo.clone();
    for s in &mut out.samples {
        s.answer = learner.predict(&s.image_features, &s.question);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSidecar {
    pub failure_count: usize,
    pub tau: f64,
    pub source_task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_task: Option<String>,
}

pub fn sidecar_path(pool: &Path) -> PathBuf {
    let stem = pool.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    pool.with_file_name(format!("{stem}.sidecar.json"))
}

/// Writes a generated pool as sample JSONL plus its sidecar.
pub fn write_pool(path: &Path, pool: &PseudoDataset, tau: f64) -> Result<()> {
    crate::data::write_samples_jsonl(path, &pool.samples)?;
    let sidecar = PoolSidecar {
        failure_count: pool.failure_count,
        tau,
        source_task: pool.source_task.clone(),
        image_task: Some(pool.image_task.clone()),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a pool written by [`write_pool`] or by an external generator.
pub fn read_pool(path: &Path, feature_dim: usize) -> Result<(PseudoDataset, PoolSidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: PoolSidecar =
        serde_json::from_str(&text).map_err(|e| Error::schema("sidecar", e.to_string()))?;
    let samples = crate::data::read_samples_jsonl(path, feature_dim)?;
    for s in &samples {
        if s.origin != Origin::Generated {
            return Err(Error::schema("origin", format!("pool row `{}` is not generated", s.image_id)));
        }
        if s.task_id != sidecar.source_task {
            return Err(Error::schema("task", format!("pool row `{}` belongs to `{}`", s.image_id, s.task_id)));
        }
    }
    let pool = PseudoDataset {
        source_task: sidecar.source_task.clone(),
        image_task: sidecar.image_task.clone().unwrap_or_default(),
        samples,
        failure_count: sidecar.failure_count,
    };
    Ok((pool, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::seed;

    fn sample(question: &str, answer: &str, qtype: &str, features: Vec<f64>) -> Sample {
        Sample {
            image_id: "i".into(),
            image_features: features,
            question: question.into(),
            answer: answer.into(),
            task_id: "t".into(),
            qtype: Some(qtype.into()),
            origin: Origin::Real,
        }
    }

    /// Two types, one template each; the answer follows block 1's bucket.
    fn toy_dataset(n0: usize, n1: usize) -> TaskDataset {
        let mut samples = Vec::new();
        for i in 0..n0 + n1 {
            let bucket = i % 2;
            let mut f = vec![0.0; 4];
            f[2 + bucket] = 1.0;
            f[i % 2] = 1.0 - (i % 3 == 0) as u8 as f64;
            let (q, a, t) = if i < n0 {
                ("what kind of pet is this?", ["cat", "dog"][bucket], "what kind")
            } else {
                ("what type of pet is this?", ["tabby", "poodle"][bucket], "what type")
            };
            samples.push(sample(q, a, t, f));
        }
        TaskDataset::new("t", Split::Train, samples).unwrap()
    }

    #[test]
    fn sharpening_examples() {
        assert_eq!(sharpen(&[0.551, 0.449], 1.0).iter().map(|x| (x * 1e12).round()).collect::<Vec<_>>(), vec![0.551e12, 0.449e12]);
        let p = sharpen(&[0.551, 0.449], 0.1);
        // independent evaluation of p^10 / sum
        let a = 0.551f64.powi(10);
        let b = 0.449f64.powi(10);
        assert!((p[0] - a / (a + b)).abs() < 1e-12);
        assert!((p[0] - 0.886).abs() < 5e-4);
        assert_eq!(sharpen(&[1.0], 0.01), vec![1.0]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split_question_answer("what kind of animal is this? dog").unwrap(),
            ("what kind of animal is this?".to_string(), "dog".to_string())
        );
        assert_eq!(
            split_question_answer("is it raining? yes? no").unwrap(),
            ("is it raining?".to_string(), "yes? no".to_string())
        );
        assert!(matches!(split_question_answer("no question mark here"), Err(Error::GenerationFailure(_))));
        assert!(matches!(split_question_answer("anything?   "), Err(Error::GenerationFailure(_))));
        assert!(matches!(split_question_answer(" ? dog"), Err(Error::GenerationFailure(_))));
    }

    #[test]
    fn fits_types_templates_and_answer_block() {
        let head = fit_generation_head(&toy_dataset(60, 40), 1.0, 2).unwrap();
        assert_eq!(head.type_labels, vec!["what kind", "what type"]);
        let emp = head.empirical_distribution();
        assert!((emp[0] - 0.6).abs() < 1e-12 && (emp[1] - 0.4).abs() < 1e-12);
        for t in &head.templates {
            assert_eq!(t.answer_block, 1);
        }
        let s = head.sampling_distribution();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generation_reads_the_image_bucket() {
        let head = fit_generation_head(&toy_dataset(50, 50), 1.0, 2).unwrap();
        let mut rng = seed::stream(1, "t", &[]);
        let text = head.generate_conditioned(&[0.0, 0.0, 0.0, 1.0], "what kind", &mut rng).unwrap();
        assert_eq!(text, "what kind of pet is this? dog");
        let text = head.generate_conditioned(&[0.0, 0.0, 1.0, 0.0], "what type", &mut rng).unwrap();
        assert_eq!(text, "what type of pet is this? tabby");
        // block absent: fall back to the template's overall mode
        let text = head.generate_conditioned(&[0.0; 4], "what kind", &mut rng).unwrap();
        assert_eq!(text, "what kind of pet is this? cat");
        assert!(matches!(head.generate_conditioned(&[0.0; 4], "why", &mut rng), Err(Error::UnknownType(_))));
    }

    #[test]
    fn single_type_head_is_degenerate() {
        let head = fit_generation_head(&toy_dataset(10, 0), 0.1, 2).unwrap();
        assert_eq!(head.sampling_distribution(), vec![1.0]);
    }

    #[test]
    fn unmatched_and_ambiguous_templates_are_rejected() {
        let ds = TaskDataset::new("t", Split::Train, vec![sample("why?", "x", "w", vec![0.0; 4])]).unwrap();
        assert!(matches!(fit_generation_head(&ds, 1.0, 2), Err(Error::UnmatchedTemplate(_))));
        let ds = TaskDataset::new(
            "t",
            Split::Train,
            vec![sample("is it red?", "x", "a", vec![0.0; 4]), sample("is it blue?", "y", "b", vec![0.0; 4])],
        )
        .unwrap();
        assert!(matches!(fit_generation_head(&ds, 1.0, 2), Err(Error::AmbiguousTemplate { .. })));
    }

    #[test]
    fn generate_is_deterministic_given_rng_state() {
        let head = fit_generation_head(&toy_dataset(50, 50), 0.5, 2).unwrap();
        let img = [1.0, 0.0, 0.0, 1.0];
        let a: Vec<String> = {
            let mut r = seed::stream(3, "g", &[]);
            (0..20).map(|_| head.generate_qa(&img, &mut r)).collect()
        };
        let b: Vec<String> = {
            let mut r = seed::stream(3, "g", &[]);
            (0..20).map(|_| head.generate_qa(&img, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    struct Flaky {
        ok_every: usize,
        calls: std::cell::Cell<usize>,
    }

    impl QaGenerator for Flaky {
        fn source_task(&self) -> &str {
            "past"
        }
        fn generate(&self, _image: &[f64], _rng: &mut StreamRng) -> String {
            let n = self.calls.get();
            self.calls.set(n + 1);
            if self.ok_every > 0 && n.is_multiple_of(self.ok_every) {
                "what is it? thing".into()
            } else {
                "garbled output".into()
            }
        }
    }

    fn images(task: &str, n: usize) -> ImageView {
        ImageView::new(task, (0..n).map(|i| (format!("img{i}"), vec![i as f64])).collect())
    }

    #[test]
    fn failures_are_retried_and_counted() {
        let g = Flaky { ok_every: 3, calls: 0.into() };
        let mut rng = seed::stream(0, "p", &[]);
        let p = build_pseudo_dataset(&g, &images("now", 5), 4, ImagePolicy::CurrentTask, &mut rng).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.failure_count, 6);
        assert!(p.samples.iter().all(|s| s.origin == Origin::Generated && s.task_id == "past"));
    }

    #[test]
    fn hopeless_generator_is_exhausted() {
        let g = Flaky { ok_every: 0, calls: 0.into() };
        let mut rng = seed::stream(0, "p", &[]);
        let err = build_pseudo_dataset(&g, &images("now", 5), 3, ImagePolicy::CurrentTask, &mut rng).unwrap_err();
        assert!(matches!(err, Error::GenerationExhausted { requested: 3, produced: 0, attempts: 30 }));
    }

    #[test]
    fn zero_count_and_own_images() {
        let g = Flaky { ok_every: 1, calls: 0.into() };
        let mut rng = seed::stream(0, "p", &[]);
        let p = build_pseudo_dataset(&g, &images("now", 5), 0, ImagePolicy::CurrentTask, &mut rng).unwrap();
        assert!(p.is_empty() && p.failure_count == 0);
        assert!(build_pseudo_dataset(&g, &images("past", 5), 1, ImagePolicy::CurrentTask, &mut rng).is_err());
        assert!(build_pseudo_dataset(&g, &images("past", 5), 1, ImagePolicy::PastImages, &mut rng).is_ok());
    }
}
