//! Option-letter extraction, ranker fallback and confidence-gated fusion.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{letter_index, ChoiceSet};
use crate::dataset::QuestionRecord;
use crate::io::float;
use crate::logical_form::LogicalForm;
use crate::ranking::{select_threshold, select_upper_threshold, RankError, RankedCandidates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchState {
    Match,
    Fail,
    #[serde(rename = "OOL")]
    Ool,
}

impl MatchState {
    pub fn label(self) -> &'static str {
        match self {
            MatchState::Match => "Match",
            MatchState::Fail => "Fail",
            MatchState::Ool => "OOL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    pub state: MatchState,
    pub letter: Option<char>,
}

fn tail_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([A-Z])[\s\]]*\z").unwrap())
}

/// Looks for `[L` at the very end of `output`; trailing whitespace and
/// closing brackets are ignored. Letters beyond `n_options` classify as OOL.
pub fn match_option(output: &str, n_options: usize) -> MatchOutcome {
    match tail_letter().captures(output) {
        Some(c) => {
            let l = c[1].chars().next().unwrap();
            let state = if letter_index(l).is_some_and(|i| i < n_options) {
                MatchState::Match
            } else {
                MatchState::Ool
            };
            MatchOutcome {
                state,
                letter: Some(l),
            }
        }
        None => MatchOutcome {
            state: MatchState::Fail,
            letter: None,
        },
    }
}

/// The matched option's form, or `lf_ranker` on Fail and OOL.
pub fn resolve<'a>(
    outcome: &MatchOutcome,
    choice_set: &'a ChoiceSet,
    lf_ranker: &'a LogicalForm,
) -> &'a LogicalForm {
    match (outcome.state, outcome.letter) {
        (MatchState::Match, Some(l)) => choice_set.option(l).map_or(lf_ranker, |o| &o.lf),
        _ => lf_ranker,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Used {
    Ranker,
    Llm,
}

/// `lf_llm` when `s_q < lambda`, otherwise `lf_ranker`.
pub fn fuse<'a, T: ?Sized>(s_q: f64, lambda: f64, lf_ranker: &'a T, lf_llm: &'a T) -> (&'a T, Used) {
    if s_q < lambda {
        (lf_llm, Used::Llm)
    } else {
        (lf_ranker, Used::Ranker)
    }
}

/// Which questions the fusion fraction `p` selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseSide {
    /// The `p` lowest-confidence questions take the LLM result.
    #[default]
    LlmOnLow,
    /// The `p` highest-confidence questions keep the ranker result, the rest
    /// take the LLM result.
    RankerOnHigh,
}

impl FromStr for FuseSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm-on-low" => Ok(Self::LlmOnLow),
            "ranker-on-high" => Ok(Self::RankerOnHigh),
            other => Err(format!("unknown fuse side `{other}`")),
        }
    }
}

impl fmt::Display for FuseSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseSide::LlmOnLow => "llm-on-low",
            FuseSide::RankerOnHigh => "ranker-on-high",
        })
    }
}

pub fn fusion_threshold(side: FuseSide, confidences: &[f64], p: f64) -> Result<f64, RankError> {
    match side {
        FuseSide::LlmOnLow => select_threshold(confidences, p),
        FuseSide::RankerOnHigh => select_upper_threshold(confidences, p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rank,
    Llm,
    #[default]
    Fuse,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank" => Ok(Self::Rank),
            "llm" => Ok(Self::Llm),
            "fuse" => Ok(Self::Fuse),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rank => "rank",
            Method::Llm => "llm",
            Method::Fuse => "fuse",
        })
    }
}

/// One row of the decisions file.
///
/// Questions without candidates carry `confidence = -inf` and null forms.
/// Questions that never reached the LLM carry a null `match_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub qid: String,
    #[serde(with = "float")]
    pub confidence: f64,
    pub match_state: Option<MatchState>,
    pub letter: Option<char>,
    pub lf_ranker: Option<LogicalForm>,
    pub lf_llm: Option<LogicalForm>,
    pub lf_fuse: Option<LogicalForm>,
    pub used: Used,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub qid: String,
    pub prompt_hash: String,
    pub output_text: String,
}

#[derive(Debug, Clone, Copy)]
pub struct DecideOptions {
    pub method: Method,
    pub fusion_p: f64,
    pub fuse_side: FuseSide,
    /// Overrides the threshold computed from `fusion_p`.
    pub lambda: Option<f64>,
}

impl Default for DecideOptions {
    fn default() -> Self {
        Self {
            method: Method::Fuse,
            fusion_p: 0.05,
            fuse_side: FuseSide::LlmOnLow,
            lambda: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecideError {
    #[error("question `{0}` has options but no completion")]
    MissingCompletion(String),
    #[error(transparent)]
    Threshold(#[from] RankError),
}

/// Builds one decision per question, in question order.
///
/// `completions = None` skips the LLM entirely (`lf_llm` stays null).
pub fn decide(
    questions: &[QuestionRecord],
    ranked: &[RankedCandidates],
    choices: &[ChoiceSet],
    completions: Option<&[CompletionRow]>,
    opts: DecideOptions,
) -> Result<(Vec<DecisionRecord>, f64), DecideError> {
    let ranked: HashMap<&str, &RankedCandidates> = ranked.iter().map(|r| (r.qid.as_str(), r)).collect();
    let choices: HashMap<&str, &ChoiceSet> = choices.iter().map(|c| (c.qid.as_str(), c)).collect();
    let completions: Option<HashMap<&str, &CompletionRow>> =
        completions.map(|cs| cs.iter().map(|c| (c.qid.as_str(), c)).collect());

    let mut rows = Vec::with_capacity(questions.len());
    for q in questions {
        let Some(r) = ranked.get(q.qid.as_str()) else {
            rows.push(DecisionRecord {
                qid: q.qid.clone(),
                confidence: f64::NEG_INFINITY,
                match_state: None,
                letter: None,
                lf_ranker: None,
                lf_llm: None,
                lf_fuse: None,
                used: Used::Ranker,
            });
            continue;
        };
        let lf_ranker = r.lf_ranker();
        let (outcome, lf_llm) = match (&completions, choices.get(q.qid.as_str())) {
            (None, _) => (None, None),
            (Some(_), None) => (None, Some(lf_ranker.clone())),
            (Some(done), Some(cs)) => {
                let row = done
                    .get(q.qid.as_str())
                    .ok_or_else(|| DecideError::MissingCompletion(q.qid.clone()))?;
                let outcome = match_option(&row.output_text, cs.n_options());
                (Some(outcome), Some(resolve(&outcome, cs, lf_ranker).clone()))
            }
        };
        rows.push(DecisionRecord {
            qid: q.qid.clone(),
            confidence: r.confidence,
            match_state: outcome.map(|o| o.state),
            letter: outcome.and_then(|o| o.letter),
            lf_ranker: Some(lf_ranker.clone()),
            lf_llm,
            lf_fuse: None,
            used: Used::Ranker,
        });
    }

    let lambda = match (opts.method, opts.lambda) {
        (Method::Rank, _) => f64::NEG_INFINITY,
        (Method::Llm, _) => f64::INFINITY,
        (Method::Fuse, Some(l)) => l,
        (Method::Fuse, None) if rows.is_empty() => f64::NEG_INFINITY,
        (Method::Fuse, None) => {
            let confidences: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
            fusion_threshold(opts.fuse_side, &confidences, opts.fusion_p)?
        }
    };
    for row in &mut rows {
        let used = match opts.method {
            Method::Rank => Used::Ranker,
            Method::Llm => Used::Llm,
            Method::Fuse => fuse(row.confidence, lambda, &(), &()).1,
        };
        row.used = used;
        row.lf_fuse = match used {
            Used::Ranker => row.lf_ranker.clone(),
            Used::Llm => row.lf_llm.clone(),
        };
    }
    Ok((rows, lambda))
}
