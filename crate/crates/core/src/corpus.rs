//! Labeled text datasets and JSONL persistence for pipeline artifacts.
//!
//! A dataset lives on disk as a manifest (`{"name": ..., "labels": [...]}`)
//! plus one JSONL file per split where each line is
//! `{"id": "...", "text": "...", "label": "..."}`. All intermediate pipeline
//! records (attack records, purification records) are persisted through
//! [`save_records`] / [`load_records`], one JSON object per line, sorted by
//! example id.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label \"{label}\"")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("empty dataset: {path} contains no examples")]
    EmptyDataset { path: PathBuf },
    #[error("{path}:{line}: example text is empty")]
    EmptyText { path: PathBuf, line: usize },
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("no manifest found: pass one explicitly or place manifest.json next to the data")]
    MissingManifest,
    #[error("dataset path {path} is neither a file nor a directory with train.jsonl/test.jsonl")]
    BadDatasetPath { path: PathBuf },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Index of a label within a [`LabelSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub usize);

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered set of distinct category names; the order defines label indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(CorpusError::InvalidLabelSet("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(CorpusError::InvalidLabelSet("blank label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::InvalidLabelSet(format!(
                    "duplicate label \"{name}\""
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id.0]
    }

    /// Case-sensitive lookup after trimming surrounding whitespace.
    pub fn index_of(&self, name: &str) -> Option<LabelId> {
        let name = name.trim();
        self.names.iter().position(|n| n == name).map(LabelId)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Vec<String> {
        set.names
    }
}

/// One labeled text example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub gold_label: LabelId,
}

/// A named dataset with train/test splits sharing one label set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub label_set: LabelSet,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn test_example(&self, id: &str) -> Option<&Example> {
        self.test.iter().find(|e| e.id == id)
    }
}

/// Sidecar manifest declaring the dataset name and the full label set.
///
/// The label set is declared explicitly rather than inferred from the data so
/// prompts can list every category even when a split lacks some class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub labels: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
    }

    pub fn label_set(&self) -> Result<LabelSet, CorpusError> {
        LabelSet::new(self.labels.clone())
    }
}

/// Wire format of one dataset line.
#[derive(Debug, Serialize, Deserialize)]
struct ExampleLine {
    id: String,
    text: String,
    label: String,
}

/// Load one JSONL split file, validating each line against `label_set`.
///
/// `seen_ids` carries ids from previously loaded splits so uniqueness holds
/// across the whole dataset.
pub fn load_split(
    path: &Path,
    label_set: &LabelSet,
    seen_ids: &mut HashSet<String>,
) -> Result<Vec<Example>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ExampleLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        if raw.text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                path: path.to_path_buf(),
                line: line_no,
            });
        }
        let gold_label =
            label_set
                .index_of(&raw.label)
                .ok_or_else(|| CorpusError::UnknownLabel {
                    path: path.to_path_buf(),
                    line: line_no,
                    label: raw.label.clone(),
                })?;
        if !seen_ids.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId { id: raw.id });
        }
        examples.push(Example {
            id: raw.id,
            text: raw.text,
            gold_label,
        });
    }
    Ok(examples)
}

/// Load a dataset from either a directory or a single split file.
///
/// * Directory: expects `train.jsonl` and/or `test.jsonl` inside, with the
///   manifest at `manifest` if given, else `<dir>/manifest.json`.
/// * Single file: every line is an example and becomes the test split; a
///   manifest path must be supplied (or `manifest.json` must sit next to the
///   file).
pub fn load_dataset(path: &Path, manifest: Option<&Path>) -> Result<Dataset, CorpusError> {
    if path.is_dir() {
        let manifest_path = manifest
            .map(Path::to_path_buf)
            .unwrap_or_else(|| path.join("manifest.json"));
        if !manifest_path.is_file() {
            return Err(CorpusError::MissingManifest);
        }
        let manifest = Manifest::load(&manifest_path)?;
        let label_set = manifest.label_set()?;
        let mut seen = HashSet::new();
        let train_path = path.join("train.jsonl");
        let test_path = path.join("test.jsonl");
        let train = if train_path.is_file() {
            load_split(&train_path, &label_set, &mut seen)?
        } else {
            Vec::new()
        };
        let test = if test_path.is_file() {
            load_split(&test_path, &label_set, &mut seen)?
        } else {
            Vec::new()
        };
        if train.is_empty() && test.is_empty() {
            return Err(CorpusError::EmptyDataset {
                path: path.to_path_buf(),
            });
        }
        Ok(Dataset {
            name: manifest.name,
            label_set,
            train,
            test,
        })
    } else if path.is_file() {
        let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| {
            path.parent()
                .unwrap_or_else(|| Path::new("."))
                .join("manifest.json")
        });
        if !manifest_path.is_file() {
            return Err(CorpusError::MissingManifest);
        }
        let manifest = Manifest::load(&manifest_path)?;
        let label_set = manifest.label_set()?;
        let mut seen = HashSet::new();
        let test = load_split(path, &label_set, &mut seen)?;
        if test.is_empty() {
            return Err(CorpusError::EmptyDataset {
                path: path.to_path_buf(),
            });
        }
        Ok(Dataset {
            name: manifest.name,
            label_set,
            train: Vec::new(),
            test,
        })
    } else {
        Err(CorpusError::BadDatasetPath {
            path: path.to_path_buf(),
        })
    }
}

/// Write examples back out in the dataset wire format, sorted by id.
pub fn save_examples(
    path: &Path,
    examples: &[Example],
    label_set: &LabelSet,
) -> Result<(), CorpusError> {
    let mut rows: Vec<ExampleLine> = examples
        .iter()
        .map(|e| ExampleLine {
            id: e.id.clone(),
            text: e.text.clone(),
            label: label_set.name(e.gold_label).to_string(),
        })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(path, &rows)
}

/// Any pipeline record keyed by the example it belongs to.
pub trait PipelineRecord {
    fn example_id(&self) -> &str;
}

/// Persist records as JSONL, one object per line, sorted by example id.
///
/// `load_records(save_records(x)) == x` for every record type, and saving the
/// loaded records again reproduces the file byte for byte.
pub fn save_records<T>(path: &Path, records: &[T]) -> Result<(), CorpusError>
where
    T: Serialize + PipelineRecord,
{
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].example_id().cmp(records[b].example_id()));
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for &i in &order {
        let line = serde_json::to_string(&records[i]).map_err(|e| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load records previously written by [`save_records`].
pub fn load_records<T>(path: &Path) -> Result<Vec<T>, CorpusError>
where
    T: DeserializeOwned,
{
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}
