//! Top-k reduction and multiple-choice question construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::KnowledgeBase;
use crate::logical_form::LogicalForm;
use crate::ranking::RankedCandidates;

pub const MAX_OPTIONS: usize = 26;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChoiceError {
    #[error("k must be in 1..={MAX_OPTIONS}, got {0}")]
    BadK(usize),
    #[error("max_answers must be at least 1")]
    BadMaxAnswers,
    #[error("question `{0}`: no options to build")]
    NoOptions(String),
}

/// Walks the ranking in order and keeps candidates with between 1 and
/// `max_answers` answers until `k` are kept. Oversized candidates are skipped
/// and later ones backfill.
pub fn reduce(
    ranked: &RankedCandidates,
    k: usize,
    kb: &KnowledgeBase,
    max_answers: usize,
) -> Result<Vec<(LogicalForm, Vec<String>)>, ChoiceError> {
    if k == 0 || k > MAX_OPTIONS {
        return Err(ChoiceError::BadK(k));
    }
    if max_answers == 0 {
        return Err(ChoiceError::BadMaxAnswers);
    }
    let mut kept = Vec::with_capacity(k);
    for c in &ranked.ranked {
        if kept.len() == k {
            break;
        }
        let answers = c.0.execute(kb);
        if (1..=max_answers).contains(&answers.len()) {
            kept.push((c.0.clone(), answers.into_iter().collect()));
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub letter: char,
    pub lf: LogicalForm,
    pub answer_ids: Vec<String>,
    pub answer_names: Vec<String>,
}

impl ChoiceOption {
    /// `[A] name1, name2`
    pub fn rendered(&self) -> String {
        format!("[{}] {}", self.letter, self.answer_names.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub qid: String,
    pub question: String,
    pub options: Vec<ChoiceOption>,
    pub gold_letter: Option<char>,
}

pub fn letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

pub fn letter_index(letter: char) -> Option<usize> {
    letter
        .is_ascii_uppercase()
        .then(|| (letter as u8 - b'A') as usize)
}

impl ChoiceSet {
    /// All options on one line, separated by single spaces.
    pub fn options_line(&self) -> String {
        self.options
            .iter()
            .map(ChoiceOption::rendered)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn option(&self, letter: char) -> Option<&ChoiceOption> {
        letter_index(letter).and_then(|i| self.options.get(i))
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }
}

/// Letters options `A, B, ...` in the order given and names their answers.
pub fn build_choice_set(
    qid: &str,
    question: &str,
    reduced: Vec<(LogicalForm, Vec<String>)>,
    kb: &KnowledgeBase,
    gold_lf: Option<&LogicalForm>,
) -> Result<ChoiceSet, ChoiceError> {
    if reduced.is_empty() {
        return Err(ChoiceError::NoOptions(qid.to_string()));
    }
    if reduced.len() > MAX_OPTIONS {
        return Err(ChoiceError::BadK(reduced.len()));
    }
    let gold = gold_lf.map(LogicalForm::serialize);
    let mut gold_letter = None;
    let options = reduced
        .into_iter()
        .enumerate()
        .map(|(i, (lf, answer_ids))| {
            if gold_letter.is_none() && gold.as_deref() == Some(lf.serialize().as_str()) {
                gold_letter = Some(letter(i));
            }
            ChoiceOption {
                letter: letter(i),
                answer_names: kb.surface_names(&answer_ids),
                lf,
                answer_ids,
            }
        })
        .collect();
    Ok(ChoiceSet {
        qid: qid.to_string(),
        question: question.to_string(),
        options,
        gold_letter,
    })
}
