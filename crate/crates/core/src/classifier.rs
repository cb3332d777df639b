//! Desk-scale stand-in for a fine-tuned text classifier.
//!
//! A Laplace-smoothed multinomial naive Bayes over a bag of lowercase word
//! tokens. It is deterministic, dependency-free, and exposes the per-class
//! confidence distribution the attack and the case-study renderings need.
//! Everything downstream talks to it through [`TokenPredictor`], so a heavier
//! model can be swapped in without touching the attack or purification code.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Example, LabelId, LabelSet};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("smoothing alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("class {0} has no examples")]
    EmptyClass(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("accuracy over an empty example list is undefined")]
    EmptyEvalSet,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file is not valid JSON: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported model_version {found} (expected {MODEL_VERSION})")]
    VersionMismatch { found: u32 },
}

/// One word token with the byte span it occupies in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Lowercased token text.
    pub text: String,
    /// Byte range of the original (un-lowercased) substring.
    pub span: Range<usize>,
}

/// Ordered token sequence; spans are non-overlapping and strictly increasing,
/// so slicing the original text at each span reproduces the token substrings.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// Unicode-aware split on non-alphanumeric boundaries; tokens are lowercased
/// and keep the byte span of the original substring.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(idx);
            }
        } else if let Some(s) = start.take() {
            tokens.push(Token {
                text: text[s..idx].to_lowercase(),
                span: s..idx,
            });
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_lowercase(),
            span: s..text.len(),
        });
    }
    TokenSeq { tokens }
}

/// Anything that maps a bag of tokens to a labeled confidence distribution.
///
/// The attack is generic over this so tests can wrap a model in a counting
/// adapter and verify query accounting.
pub trait TokenPredictor {
    fn predict_tokens(&self, tokens: &[&str]) -> Prediction;
    fn label_set(&self) -> &LabelSet;
}

/// Predicted label plus the full per-class probability vector.
///
/// `confidence` sums to 1 within 1e-9 and `label` is the argmax with ties
/// broken by the lowest class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: LabelId,
    pub confidence: Vec<f64>,
}

impl Prediction {
    pub fn confidence_in(&self, label: LabelId) -> f64 {
        self.confidence[label.0]
    }

    pub fn top_confidence(&self) -> f64 {
        self.confidence[self.label.0]
    }
}

/// Smoothed multinomial naive Bayes model.
///
/// The vocabulary is stored sorted so serialization is deterministic;
/// `token_log_likelihoods[class]` has `vocabulary.len() + 1` entries, the
/// last being the shared out-of-vocabulary pseudo-token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub model_version: u32,
    pub label_set: LabelSet,
    pub smoothing_alpha: f64,
    pub seed: u64,
    vocabulary: Vec<String>,
    class_log_priors: Vec<f64>,
    token_log_likelihoods: Vec<Vec<f64>>,
    #[serde(skip)]
    vocab_index: HashMap<String, usize>,
}

impl ClassifierModel {
    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn class_log_priors(&self) -> &[f64] {
        &self.class_log_priors
    }

    fn oov_index(&self) -> usize {
        self.vocabulary.len()
    }

    fn token_index(&self, token: &str) -> usize {
        self.vocab_index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.oov_index())
    }

    fn rebuild_index(&mut self) {
        self.vocab_index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Short stable identifier derived from the serialized model.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("model serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ClassifierError> {
        let mut model: ClassifierModel = serde_json::from_str(json)?;
        if model.model_version != MODEL_VERSION {
            return Err(ClassifierError::VersionMismatch {
                found: model.model_version,
            });
        }
        model.rebuild_index();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        fs::write(path, self.to_json()).map_err(|e| ClassifierError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let json = fs::read_to_string(path).map_err(|e| ClassifierError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&json)
    }
}

impl TokenPredictor for ClassifierModel {
    fn predict_tokens(&self, tokens: &[&str]) -> Prediction {
        let n_classes = self.label_set.len();
        let mut scores = self.class_log_priors.clone();
        for token in tokens {
            let idx = self.token_index(token);
            for (c, score) in scores.iter_mut().enumerate() {
                *score += self.token_log_likelihoods[c][idx];
            }
        }
        // log-sum-exp normalization
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut confidence: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = confidence.iter().sum();
        for c in confidence.iter_mut() {
            *c /= sum;
        }
        let mut label = 0usize;
        for c in 1..n_classes {
            if confidence[c] > confidence[label] {
                label = c;
            }
        }
        Prediction {
            label: LabelId(label),
            confidence,
        }
    }

    fn label_set(&self) -> &LabelSet {
        &self.label_set
    }
}

/// Train a Laplace-smoothed multinomial model.
///
/// Deterministic for identical inputs; `seed` is recorded in the model (and
/// thus its fingerprint) but the estimator itself has no stochastic step.
pub fn train(
    train_split: &[Example],
    label_set: &LabelSet,
    alpha: f64,
    seed: u64,
) -> Result<ClassifierModel, ClassifierError> {
    if !(alpha > 0.0) {
        return Err(ClassifierError::InvalidAlpha(alpha));
    }
    if train_split.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }

    let n_classes = label_set.len();
    let mut class_doc_counts = vec![0usize; n_classes];
    let mut token_counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); n_classes];
    let mut class_token_totals = vec![0u64; n_classes];

    for example in train_split {
        let c = example.gold_label.0;
        class_doc_counts[c] += 1;
        for token in tokenize(&example.text).tokens {
            *token_counts[c].entry(token.text).or_insert(0) += 1;
            class_token_totals[c] += 1;
        }
    }

    for (c, &count) in class_doc_counts.iter().enumerate() {
        if count == 0 {
            return Err(ClassifierError::EmptyClass(
                label_set.name(LabelId(c)).to_string(),
            ));
        }
    }

    let mut vocabulary: Vec<String> = token_counts
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect();
    vocabulary.sort();
    vocabulary.dedup();

    let total_docs = train_split.len() as f64;
    let class_log_priors: Vec<f64> = class_doc_counts
        .iter()
        .map(|&n| (n as f64 / total_docs).ln())
        .collect();

    // One shared OOV pseudo-token per class: index vocabulary.len().
    let v_plus_oov = vocabulary.len() as f64 + 1.0;
    let token_log_likelihoods: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let denom = class_token_totals[c] as f64 + alpha * v_plus_oov;
            let mut row: Vec<f64> = vocabulary
                .iter()
                .map(|t| {
                    let count = token_counts[c].get(t).copied().unwrap_or(0) as f64;
                    ((count + alpha) / denom).ln()
                })
                .collect();
            row.push((alpha / denom).ln());
            row
        })
        .collect();

    let mut model = ClassifierModel {
        model_version: MODEL_VERSION,
        label_set: label_set.clone(),
        smoothing_alpha: alpha,
        seed,
        vocabulary,
        class_log_priors,
        token_log_likelihoods,
        vocab_index: HashMap::new(),
    };
    model.rebuild_index();
    Ok(model)
}

/// Posterior over classes for a raw text.
pub fn predict(model: &ClassifierModel, text: &str) -> Prediction {
    let seq = tokenize(text);
    model.predict_tokens(&seq.texts())
}

/// Fraction of examples whose predicted label matches the gold label.
pub fn accuracy(model: &ClassifierModel, examples: &[Example]) -> Result<f64, ClassifierError> {
    if examples.is_empty() {
        return Err(ClassifierError::EmptyEvalSet);
    }
    let correct = examples
        .iter()
        .filter(|e| predict(model, &e.text).label == e.gold_label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}
