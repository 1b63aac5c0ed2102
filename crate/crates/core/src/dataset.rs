//! Question records and train-set sampling.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::kb::KnowledgeBase;
use crate::logical_form::LogicalForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Iid,
    Compositional,
    #[serde(rename = "zero-shot", alias = "zero_shot")]
    ZeroShot,
}

impl Level {
    pub fn label(self) -> &'static str {
        match self {
            Level::Iid => "iid",
            Level::Compositional => "compositional",
            Level::ZeroShot => "zero-shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    #[serde(default)]
    pub gold_answer_ids: Vec<String>,
    #[serde(default)]
    pub gold_lf: Option<String>,
    #[serde(default)]
    pub level: Option<Level>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("duplicate qid `{0}`")]
    DuplicateQid(String),
    #[error("question `{0}` has neither gold answers nor a gold logical form")]
    NoGold(String),
    #[error("question `{qid}`: gold_lf does not parse: {message}")]
    BadGoldLf { qid: String, message: String },
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("cannot carve {wanted} dev questions out of {available}")]
    DevTooLarge { wanted: usize, available: usize },
}

impl QuestionRecord {
    pub fn gold_form(&self) -> Option<LogicalForm> {
        self.gold_lf.as_deref().and_then(|s| LogicalForm::parse(s).ok())
    }

    /// Gold answers; executes `gold_lf` when no ids are listed.
    pub fn gold_answers(&self, kb: &KnowledgeBase) -> BTreeSet<String> {
        if !self.gold_answer_ids.is_empty() {
            return self.gold_answer_ids.iter().cloned().collect();
        }
        self.gold_form().map(|lf| lf.execute(kb)).unwrap_or_default()
    }
}

pub fn validate(records: &[QuestionRecord]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.qid.as_str()) {
            return Err(DatasetError::DuplicateQid(r.qid.clone()));
        }
        if let Some(lf) = &r.gold_lf {
            LogicalForm::parse(lf).map_err(|e| DatasetError::BadGoldLf {
                qid: r.qid.clone(),
                message: e.to_string(),
            })?;
        } else if r.gold_answer_ids.is_empty() {
            return Err(DatasetError::NoGold(r.qid.clone()));
        }
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, DatasetError> {
    let records: Vec<QuestionRecord> = io::read_jsonl(path)?;
    validate(&records)?;
    Ok(records)
}

/// Number of records kept by [`few_shot_split`]: `floor(fraction * n)`.
///
/// The small epsilon keeps products like `0.29 * 100` from flooring to 28.
pub fn few_shot_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

fn sample<T: Clone>(items: &[T], amount: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, items.len(), amount)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Uniform sample without replacement of `floor(fraction * n)` records, in
/// sample order.
pub fn few_shot_split(
    train: &[QuestionRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<QuestionRecord>, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Fraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    Ok(sample(train, few_shot_size(train.len(), fraction), seed))
}

/// Splits off `dev_size` random records as a local development set.
/// Returns `(dev, rest)`; `rest` keeps the input order.
pub fn split_local_dev(
    train: &[QuestionRecord],
    dev_size: usize,
    seed: u64,
) -> Result<(Vec<QuestionRecord>, Vec<QuestionRecord>), DatasetError> {
    if dev_size > train.len() {
        return Err(DatasetError::DevTooLarge {
            wanted: dev_size,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, train.len(), dev_size).into_vec();
    let chosen: HashSet<usize> = picked.iter().copied().collect();
    let dev = picked.iter().map(|&i| train[i].clone()).collect();
    let rest = train
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok((dev, rest))
}
