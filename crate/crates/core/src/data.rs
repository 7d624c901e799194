//! Samples, task datasets and task streams, plus their on-disk JSONL forms.
//!
//! A stream on disk is a manifest (`stream.json`) naming one JSONL file per
//! task and split:
//!
//! ```json
//! {"feature_dim": 32, "tasks": [{"id": "a", "train": "a.train.jsonl", "val": "a.val.jsonl", "test": "a.test.jsonl"}]}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image-question-answer triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image_features: Vec<f64>,
    pub question: String,
    pub answer: String,
    pub task_id: String,
    pub qtype: Option<String>,
    pub origin: Origin,
}

/// Wire form of a sample; field order here fixes the serialized key order.
#[derive(Serialize)]
struct SampleRecord<'a> {
    image_id: &'a str,
    features: &'a [f64],
    question: &'a str,
    answer: &'a str,
    task: &'a str,
    qtype: Option<&'a str>,
    #[serde(skip_serializing_if = "is_real")]
    origin: Origin,
}

fn is_real(origin: &Origin) -> bool {
    *origin == Origin::Real
}

impl Sample {
    pub fn to_json_line(&self) -> String {
        let record = SampleRecord {
            image_id: &self.image_id,
            features: &self.image_features,
            question: &self.question,
            answer: &self.answer,
            task: &self.task_id,
            qtype: self.qtype.as_deref(),
            origin: self.origin,
        };
        serde_json::to_string(&record).expect("sample serialization is infallible")
    }
}

fn str_field<'a>(obj: &'a Map<String, Value>, field: &str) -> Result<&'a str> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::schema(field, "expected a string")),
        None => Err(Error::schema(field, "missing")),
    }
}

/// Validates one raw JSON record against the sample invariants.
///
/// Questions must hold exactly one `?`; the loader rejects rather than repairs.
pub fn validate_sample(record: &Value, feature_dim: usize) -> Result<Sample> {
    let obj = record
        .as_object()
        .ok_or_else(|| Error::schema("record", "expected a JSON object"))?;

    let image_id = str_field(obj, "image_id")?.to_string();

    let features = match obj.get("features") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::schema("image_features", "non-numeric or non-finite entry"))
            })
            .collect::<Result<Vec<f64>>>()?,
        Some(_) => return Err(Error::schema("image_features", "expected an array")),
        None => return Err(Error::schema("image_features", "missing")),
    };
    if features.len() != feature_dim {
        return Err(Error::schema(
            "image_features",
            format!("expected dimension {feature_dim}, found {}", features.len()),
        ));
    }

    let question = str_field(obj, "question")?.trim().to_string();
    let marks = question.matches('?').count();
    if question.is_empty() || marks != 1 {
        return Err(Error::schema(
            "question",
            format!("must be non-empty with exactly one '?', found {marks}"),
        ));
    }

    let answer = str_field(obj, "answer")?.trim().to_string();
    if answer.is_empty() {
        return Err(Error::schema("answer", "must be non-empty"));
    }

    let task_id = str_field(obj, "task")?.to_string();

    let qtype = match obj.get("qtype") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::schema("qtype", "expected a string or null")),
    };

    let origin = match obj.get("origin") {
        None | Some(Value::Null) => Origin::Real,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| Error::schema("origin", "expected \"real\" or \"generated\""))?,
    };

    Ok(Sample {
        image_id,
        image_features: features,
        question,
        answer,
        task_id,
        qtype,
        origin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, split: Split, samples: Vec<Sample>) -> Result<Self> {
        let task_id = task_id.into();
        if let Some(s) = samples.iter().find(|s| s.task_id != task_id) {
            return Err(Error::schema(
                "task",
                format!("sample `{}` belongs to `{}`, not `{task_id}`", s.image_id, s.task_id),
            ));
        }
        if split == Split::Train && samples.is_empty() {
            return Err(Error::schema("samples", format!("train split of `{task_id}` is empty")));
        }
        Ok(TaskDataset {
            task_id,
            split,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The image-only projection used for pseudo-sample generation.
    pub fn image_view(&self) -> ImageView {
        ImageView {
            task_id: self.task_id.clone(),
            images: self
                .samples
                .iter()
                .map(|s| (s.image_id.clone(), s.image_features.clone()))
                .collect(),
        }
    }
}

/// Images of a task without their questions or answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageView {
    task_id: String,
    images: Vec<(String, Vec<f64>)>,
}

impl ImageView {
    pub fn new(task_id: impl Into<String>, images: Vec<(String, Vec<f64>)>) -> Self {
        ImageView {
            task_id: task_id.into(),
            images,
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> (&str, &[f64]) {
        let (id, f) = &self.images[index];
        (id, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub id: String,
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

impl TaskSplits {
    pub fn split(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// An ordered sequence of tasks sharing one image feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub feature_dim: usize,
    /// Tasks in presentation order.
    pub tasks: Vec<TaskSplits>,
}

impl TaskStream {
    pub fn new(feature_dim: usize, tasks: Vec<TaskSplits>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::schema("feature_dim", "must be positive"));
        }
        if tasks.is_empty() {
            return Err(Error::schema("tasks", "stream needs at least one task"));
        }
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::schema("tasks", format!("duplicate task id `{}`", t.id)));
            }
        }
        Ok(TaskStream { feature_dim, tasks })
    }

    pub fn order(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: &str) -> Option<&TaskSplits> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Reorders tasks; `order` must be a permutation of the current ids.
    pub fn reordered(mut self, order: &[String]) -> Result<Self> {
        let ids = reorder_ids(&self.order(), order)?;
        let mut tasks = Vec::with_capacity(ids.len());
        for id in ids {
            let pos = self.tasks.iter().position(|t| t.id == id).expect("validated id");
            tasks.push(self.tasks.swap_remove(pos));
        }
        self.tasks = tasks;
        Ok(self)
    }

    /// Writes a manifest plus per-task JSONL files into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for task in &self.tasks {
            let mut entry = ManifestTask {
                id: task.id.clone(),
                train: PathBuf::new(),
                val: PathBuf::new(),
                test: PathBuf::new(),
            };
            for split in Split::ALL {
                let name = format!("{}.{}.jsonl", task.id, split);
                write_samples_jsonl(&dir.join(&name), &task.split(split).samples)?;
                *entry.path_mut(split) = PathBuf::from(name);
            }
            entries.push(entry);
        }
        let manifest = Manifest {
            feature_dim: self.feature_dim,
            tasks: entries,
        };
        let path = dir.join("stream.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn reorder_ids(declared: &[String], order: &[String]) -> Result<Vec<String>> {
    for id in order {
        if !declared.contains(id) {
            return Err(Error::MissingTask(id.clone()));
        }
    }
    let unique: HashSet<&String> = order.iter().collect();
    if unique.len() != order.len() || order.len() != declared.len() {
        return Err(Error::Config(format!(
            "task order {order:?} is not a permutation of {declared:?}"
        )));
    }
    Ok(order.to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestTask {
    id: String,
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

impl ManifestTask {
    fn path(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn path_mut(&mut self, split: Split) -> &mut PathBuf {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    feature_dim: usize,
    tasks: Vec<ManifestTask>,
}

/// Where the experiment harness obtains task data.
///
/// Data is pulled one `(task, split)` at a time so that access patterns can
/// be audited.
pub trait TaskSource {
    fn feature_dim(&self) -> usize;
    /// Task ids in presentation order.
    fn task_ids(&self) -> Vec<String>;
    fn load(&self, task: &str, split: Split) -> Result<TaskDataset>;
}

impl TaskSource for TaskStream {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn task_ids(&self) -> Vec<String> {
        self.order()
    }

    fn load(&self, task: &str, split: Split) -> Result<TaskDataset> {
        self.task(task)
            .map(|t| t.split(split).clone())
            .ok_or_else(|| Error::MissingTask(task.to_string()))
    }
}

/// One file open recorded by a [`ManifestSource`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileAccess {
    pub task: String,
    pub split: Split,
    pub path: PathBuf,
}

pub type AccessLog = Arc<Mutex<Vec<FileAccess>>>;

/// A stream manifest whose task files are read lazily on each `load`.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    root: PathBuf,
    manifest: Manifest,
    order: Vec<String>,
    log: Option<AccessLog>,
}

impl ManifestSource {
    pub fn open(path: &Path, order: Option<&[String]>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::schema("manifest", e.to_string()))?;
        if manifest.feature_dim == 0 {
            return Err(Error::schema("feature_dim", "must be positive"));
        }
        let declared: Vec<String> = manifest.tasks.iter().map(|t| t.id.clone()).collect();
        let unique: HashSet<&String> = declared.iter().collect();
        if declared.is_empty() || unique.len() != declared.len() {
            return Err(Error::schema("tasks", "task ids must be unique and non-empty"));
        }
        let order = match order {
            Some(o) => reorder_ids(&declared, o)?,
            None => declared,
        };
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ManifestSource {
            root,
            manifest,
            order,
            log: None,
        })
    }

    /// Records every file this source opens into `log`.
    pub fn with_access_log(mut self, log: AccessLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn path_of(&self, task: &str, split: Split) -> Result<PathBuf> {
        let entry = self
            .manifest
            .tasks
            .iter()
            .find(|t| t.id == task)
            .ok_or_else(|| Error::MissingTask(task.to_string()))?;
        Ok(self.root.join(entry.path(split)))
    }

    pub fn load_all(&self) -> Result<TaskStream> {
        let mut tasks = Vec::new();
        for id in &self.order {
            tasks.push(TaskSplits {
                id: id.clone(),
                train: self.load(id, Split::Train)?,
                val: self.load(id, Split::Val)?,
                test: self.load(id, Split::Test)?,
            });
        }
        TaskStream::new(self.manifest.feature_dim, tasks)
    }
}

impl TaskSource for ManifestSource {
    fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    fn task_ids(&self) -> Vec<String> {
        self.order.clone()
    }

    fn load(&self, task: &str, split: Split) -> Result<TaskDataset> {
        let path = self.path_of(task, split)?;
        if let Some(log) = &self.log {
            log.lock().expect("access log poisoned").push(FileAccess {
                task: task.to_string(),
                split,
                path: path.clone(),
            });
        }
        let samples = read_samples_jsonl(&path, self.manifest.feature_dim)?;
        TaskDataset::new(task, split, samples)
    }
}

/// Loads and validates a whole stream, optionally in a custom task order.
pub fn load_task_stream(path: &Path, order: Option<&[String]>) -> Result<TaskStream> {
    ManifestSource::open(path, order)?.load_all()
}

pub fn read_samples_jsonl(path: &Path, feature_dim: usize) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::schema("record", e.to_string()).at_line(i + 1))?;
        samples.push(validate_sample(&value, feature_dim).map_err(|e| e.at_line(i + 1))?);
    }
    Ok(samples)
}

pub fn write_samples_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
