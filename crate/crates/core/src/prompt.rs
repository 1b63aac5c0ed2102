//! Prompt assembly: task description, in-context examples and the
//! incomplete entry the model has to finish.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::ChoiceSet;

pub const ICL_TASK: &str = "Answer the given multiple-choice question by choosing one option.";

pub const COT_TASK: &str = "Answer the given multiple-choice question by explaining it step by step and then choosing one option.\n\
Step 1. identify the main focus of the question.\n\
Step 2. identify constrain in question.\n\
Step 3. give the selected answer.";

pub const ICL_SUFFIX: &str = "the answer is therefore";
pub const COT_SUFFIX: &str = "explanation for problem";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Icl,
    Cot,
}

impl Mode {
    pub fn task_description(self) -> &'static str {
        match self {
            Mode::Icl => ICL_TASK,
            Mode::Cot => COT_TASK,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Mode::Icl => ICL_SUFFIX,
            Mode::Cot => COT_SUFFIX,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Icl => "icl",
            Mode::Cot => "cot",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "icl" => Ok(Mode::Icl),
            "cot" => Ok(Mode::Cot),
            other => Err(format!("unknown mode `{other}` (expected icl or cot)")),
        }
    }
}

/// What a prompt asks for. Mock backends use this to answer explanation
/// requests; it is not part of the prompts file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptKind {
    #[default]
    Entry,
    Explanation { gold_letter: char },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub qid: String,
    pub mode: Mode,
    #[serde(rename = "prompt")]
    pub text: String,
    pub n_options: usize,
    #[serde(skip)]
    pub kind: PromptKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub choice_set: ChoiceSet,
    pub explanation: Option<String>,
}

impl Exemplar {
    pub fn gold_letter(&self) -> char {
        self.choice_set
            .gold_letter
            .expect("exemplars always carry a gold letter")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("need {wanted} exemplars with the gold form among the options, only {available} available")]
    Shortfall { wanted: usize, available: usize },
    #[error("exemplar `{0}` has no explanation (required in CoT mode)")]
    MissingExplanation(String),
    #[error("question `{0}` has no options")]
    NoOptions(String),
    #[error("exemplar `{0}` has no gold letter")]
    NoGold(String),
}

/// Every eligible dev question (gold form among its options) in a seeded
/// random order. The first `n` are the sampled exemplars; the rest serve as
/// replacements.
pub fn exemplar_order(dev_pool: &[ChoiceSet], seed: u64) -> Vec<&ChoiceSet> {
    let mut eligible: Vec<&ChoiceSet> = dev_pool
        .iter()
        .filter(|c| c.gold_letter.is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible
}

/// Uniform sample without replacement of `n` eligible dev questions.
pub fn select_exemplars(
    dev_pool: &[ChoiceSet],
    n: usize,
    seed: u64,
) -> Result<Vec<Exemplar>, PromptError> {
    let order = exemplar_order(dev_pool, seed);
    if order.len() < n {
        return Err(PromptError::Shortfall {
            wanted: n,
            available: order.len(),
        });
    }
    Ok(order
        .into_iter()
        .take(n)
        .map(|c| Exemplar {
            choice_set: c.clone(),
            explanation: None,
        })
        .collect())
}

/// Closes a generated explanation that stopped right after `[L`.
pub fn close_explanation(explanation: &str) -> String {
    let t = explanation.trim();
    if t.ends_with(']') {
        t.to_string()
    } else {
        format!("{t}]")
    }
}

/// A usable explanation ends with a line that selects `[gold`.
pub fn explanation_selects(explanation: &str, gold: char) -> bool {
    explanation
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.contains(&format!("[{gold}")))
}

fn question_block(cs: &ChoiceSet, answer: &str) -> String {
    format!(
        "Question: {}\nOptions: {}\nAnswer: {}",
        cs.question,
        cs.options_line(),
        answer
    )
}

pub fn render_prompt(
    mode: Mode,
    exemplars: &[Exemplar],
    entry: &ChoiceSet,
) -> Result<PromptText, PromptError> {
    if entry.options.is_empty() {
        return Err(PromptError::NoOptions(entry.qid.clone()));
    }
    let mut blocks = vec![mode.task_description().to_string()];
    for ex in exemplars {
        let gold = ex
            .choice_set
            .gold_letter
            .ok_or_else(|| PromptError::NoGold(ex.choice_set.qid.clone()))?;
        let answer = match mode {
            Mode::Icl => format!("{ICL_SUFFIX} [{gold}]"),
            Mode::Cot => close_explanation(
                ex.explanation
                    .as_deref()
                    .filter(|e| !e.trim().is_empty())
                    .ok_or_else(|| PromptError::MissingExplanation(ex.choice_set.qid.clone()))?,
            ),
        };
        blocks.push(question_block(&ex.choice_set, &answer));
    }
    blocks.push(question_block(entry, mode.suffix()));
    Ok(PromptText {
        qid: entry.qid.clone(),
        mode,
        text: blocks.join("\n\n"),
        n_options: entry.n_options(),
        kind: PromptKind::Entry,
    })
}

/// Zero-shot request for a step-by-step explanation that ends on the known
/// gold option. `attempt > 0` adds a reminder so retries hash differently.
pub fn render_explanation_request(
    exemplar: &ChoiceSet,
    attempt: usize,
) -> Result<PromptText, PromptError> {
    let gold = exemplar
        .gold_letter
        .ok_or_else(|| PromptError::NoGold(exemplar.qid.clone()))?;
    let mut directive = format!(
        "The correct option is [{gold}]. Explain the question following the three steps; Step 3 must select [{gold}]."
    );
    if attempt > 0 {
        directive.push_str(&format!(
            "\nAttempt {}: end Step 3 with \"The answer is therefore [{gold}]\".",
            attempt + 1
        ));
    }
    let text = format!(
        "{COT_TASK}\n\nQuestion: {}\nOptions: {}\n{directive}\nAnswer: {COT_SUFFIX}",
        exemplar.question,
        exemplar.options_line(),
    );
    Ok(PromptText {
        qid: exemplar.qid.clone(),
        mode: Mode::Cot,
        text,
        n_options: exemplar.n_options(),
        kind: PromptKind::Explanation { gold_letter: gold },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::ChoiceOption;
    use crate::logical_form::LogicalForm;

    fn cs(qid: &str, question: &str, names: &[&str], gold: Option<char>) -> ChoiceSet {
        ChoiceSet {
            qid: qid.into(),
            question: question.into(),
            options: names
                .iter()
                .enumerate()
                .map(|(i, n)| ChoiceOption {
                    letter: crate::choice::letter(i),
                    lf: LogicalForm::parse(&format!("(JOIN r{i} m.x)")).unwrap(),
                    answer_ids: vec![format!("m.{i}")],
                    answer_names: vec![n.to_string()],
                })
                .collect(),
            gold_letter: gold,
        }
    }

    fn pool(n: usize) -> Vec<ChoiceSet> {
        (0..n)
            .map(|i| cs(&format!("d{i}"), &format!("dev question {i}?"), &["X", "Y"], Some('B')))
            .collect()
    }

    #[test]
    fn sampling() {
        let p = pool(10);
        let a = select_exemplars(&p, 2, 5).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].choice_set.qid, a[1].choice_set.qid);
        assert_eq!(a, select_exemplars(&p, 2, 5).unwrap());
        assert!(select_exemplars(&p, 0, 5).unwrap().is_empty());
        let mut p = pool(3);
        p[0].gold_letter = None;
        assert_eq!(
            select_exemplars(&p, 3, 1).unwrap_err(),
            PromptError::Shortfall { wanted: 3, available: 2 }
        );
    }

    #[test]
    fn icl_layout() {
        let ex = select_exemplars(&pool(1), 1, 0).unwrap();
        let entry = cs("t1", "Where are boeing headquarters?", &["Seattle", "Chicago"], None);
        let p = render_prompt(Mode::Icl, &ex, &entry).unwrap();
        let want = "Answer the given multiple-choice question by choosing one option.\n\n\
Question: dev question 0?\nOptions: [A] X [B] Y\nAnswer: the answer is therefore [B]\n\n\
Question: Where are boeing headquarters?\nOptions: [A] Seattle [B] Chicago\nAnswer: the answer is therefore";
        assert_eq!(p.text, want);
        assert!(p.text.ends_with("the answer is therefore"));
        assert_eq!(p.n_options, 2);
        assert_eq!(p, render_prompt(Mode::Icl, &ex, &entry).unwrap());
    }

    #[test]
    fn cot_layout_and_missing_explanation() {
        let mut ex = select_exemplars(&pool(2), 2, 0).unwrap();
        let entry = cs("t1", "q?", &["A1"], None);
        assert!(matches!(
            render_prompt(Mode::Cot, &ex, &entry),
            Err(PromptError::MissingExplanation(_))
        ));
        for e in &mut ex {
            e.explanation = Some("Step 1: focus.\nStep 2: none.\nStep 3: The answer is therefore [B".into());
        }
        let p = render_prompt(Mode::Cot, &ex, &entry).unwrap();
        assert!(p.text.starts_with(COT_TASK));
        assert!(p.text.ends_with("Answer: explanation for problem"));
        assert_eq!(p.text.matches("The answer is therefore [B]").count(), 2);
        assert_eq!(p.text.matches(COT_SUFFIX).count(), 1);
    }

    #[test]
    fn zero_shot_prompt() {
        let entry = cs("t1", "q?", &["A1", "B1"], None);
        let p = render_prompt(Mode::Icl, &[], &entry).unwrap();
        assert_eq!(
            p.text,
            format!("{ICL_TASK}\n\nQuestion: q?\nOptions: [A] A1 [B] B1\nAnswer: the answer is therefore")
        );
    }

    #[test]
    fn explanation_request_contents() {
        let c = cs("d1", "Where george lopez was born?", &["a", "b", "c", "Mission Hills"], Some('D'));
        let p = render_explanation_request(&c, 0).unwrap();
        for step in [
            "identify the main focus of the question",
            "identify constrain in question",
            "give the selected answer",
        ] {
            assert!(p.text.contains(step), "{step}");
        }
        assert!(p.text.contains("Step 3 must select [D]"));
        assert_eq!(p.kind, PromptKind::Explanation { gold_letter: 'D' });
        assert_ne!(p.text, render_explanation_request(&c, 1).unwrap().text);
        assert!(render_explanation_request(&cs("x", "q", &["a"], None), 0).is_err());
    }

    #[test]
    fn explanation_validation() {
        let reply = "Step 1: The main focus of the question is to identify the team that Jeremy Lin played for in 2013.\n\
Step 2: The question specifies the year 2013 as a constraint.\nStep 3: The answer is therefore [A";
        assert!(explanation_selects(reply, 'A'));
        assert!(!explanation_selects(reply, 'B'));
        assert!(!explanation_selects("", 'A'));
        assert_eq!(close_explanation("x [A"), "x [A]");
        assert_eq!(close_explanation("x [A]\n"), "x [A]");
    }
}
