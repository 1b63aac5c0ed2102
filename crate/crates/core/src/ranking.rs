//! Candidate scoring, ranker selection and the confidence threshold.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::QuestionRecord;
use crate::io::{self, float, IoError};
use crate::kb::KnowledgeBase;
use crate::logical_form::{CandidatePool, LogicalForm};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("question `{0}`: no candidates")]
    NoCandidates(String),
    #[error("empty confidence list")]
    NoConfidences,
    #[error("fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("score file: {0}")]
    ScoreFile(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Similarity between a question and one candidate. Implementations are
/// read-only after construction and deterministic.
pub trait Scorer: Send + Sync {
    fn score(&self, question: &QuestionRecord, candidate: &LogicalForm, kb: &KnowledgeBase) -> f64;
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Token-count F1 between two multisets (overlap counts `min` per token).
/// Zero when either side is empty.
pub fn token_f1(question: &[String], candidate: &[String]) -> f64 {
    if question.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in question {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in candidate {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / question.len() as f64;
    2.0 * p * r / (p + r)
}

/// Words describing a candidate: relation id pieces, the anchor's surface
/// name and the surface names of its answers.
pub fn verbalize(candidate: &LogicalForm, kb: &KnowledgeBase) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for hop in candidate.hops() {
        out.extend(tokens(&hop.relation));
    }
    let anchor = kb.name(candidate.anchor()).unwrap_or(candidate.anchor());
    out.extend(tokens(anchor));
    let answers: Vec<String> = candidate.execute(kb).into_iter().collect();
    for name in kb.surface_names(&answers) {
        out.extend(tokens(&name));
    }
    out
}

/// Lexical-overlap baseline in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl LexicalScorer {
    pub fn lexical_score(question: &str, candidate: &LogicalForm, kb: &KnowledgeBase) -> f64 {
        let q: Vec<String> = tokens(question).collect();
        token_f1(&q, &verbalize(candidate, kb))
    }
}

impl Scorer for LexicalScorer {
    fn score(&self, question: &QuestionRecord, candidate: &LogicalForm, kb: &KnowledgeBase) -> f64 {
        Self::lexical_score(&question.question, candidate, kb)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreFileRow {
    pub qid: String,
    pub scores: HashMap<String, f64>,
}

/// Scores produced by an external ranker. Unlisted candidates score `-inf`.
#[derive(Debug, Clone, Default)]
pub struct ImportedScorer {
    scores: HashMap<String, HashMap<String, f64>>,
}

impl ImportedScorer {
    pub fn from_rows(rows: Vec<ScoreFileRow>) -> Result<Self, RankError> {
        let mut scores: HashMap<String, HashMap<String, f64>> = HashMap::new();
        for row in rows {
            let entry = scores.entry(row.qid.clone()).or_default();
            for (lf, s) in row.scores {
                let canonical = LogicalForm::parse(&lf)
                    .map_err(|e| RankError::ScoreFile(format!("qid {}: `{lf}`: {e}", row.qid)))?
                    .serialize();
                entry.insert(canonical, s);
            }
        }
        Ok(Self { scores })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RankError> {
        Self::from_rows(io::read_jsonl(path)?)
    }
}

impl Scorer for ImportedScorer {
    fn score(&self, question: &QuestionRecord, candidate: &LogicalForm, _kb: &KnowledgeBase) -> f64 {
        self.scores
            .get(&question.qid)
            .and_then(|m| m.get(&candidate.serialize()))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Stable 64-bit seed from a base seed and string parts.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Gold-aware scorer for emulating rankers of varying quality.
///
/// Per question, with probability `1 - epsilon` the question is "clean": the
/// gold form scores 1 and every other candidate draws from `[0, 0.5)`.
/// Otherwise every candidate draws from `[0, 1)`. All draws are keyed on
/// `(seed, qid, candidate)`, so evaluation order does not matter.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracleScorer {
    epsilon: f64,
    seed: u64,
}

impl NoisyOracleScorer {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
        Self { epsilon, seed }
    }

    pub fn is_clean(&self, qid: &str) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["coin", qid]));
        rng.random::<f64>() < 1.0 - self.epsilon
    }
}

impl Scorer for NoisyOracleScorer {
    fn score(&self, question: &QuestionRecord, candidate: &LogicalForm, _kb: &KnowledgeBase) -> f64 {
        let canonical = candidate.serialize();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["score", &question.qid, &canonical]));
        let u = rng.random::<f64>();
        if !self.is_clean(&question.qid) {
            return u;
        }
        let gold = question.gold_form().map(|g| g.serialize());
        if gold.as_deref() == Some(canonical.as_str()) {
            1.0
        } else {
            0.5 * u
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate(pub LogicalForm, #[serde(with = "float")] pub f64);

/// Candidates sorted by descending score, ties by ascending canonical string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub qid: String,
    pub ranked: Vec<ScoredCandidate>,
    #[serde(with = "float")]
    pub confidence: f64,
}

impl RankedCandidates {
    pub fn from_scores(
        qid: impl Into<String>,
        scored: Vec<(LogicalForm, f64)>,
    ) -> Result<Self, RankError> {
        let qid = qid.into();
        if scored.is_empty() {
            return Err(RankError::NoCandidates(qid));
        }
        let mut keyed: Vec<(String, LogicalForm, f64)> = scored
            .into_iter()
            .map(|(lf, s)| (lf.serialize(), lf, s))
            .collect();
        keyed.sort_by(|a, b| match b.2.total_cmp(&a.2) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        let confidence = keyed[0].2;
        Ok(Self {
            qid,
            ranked: keyed
                .into_iter()
                .map(|(_, lf, s)| ScoredCandidate(lf, s))
                .collect(),
            confidence,
        })
    }

    pub fn lf_ranker(&self) -> &LogicalForm {
        &self.ranked[0].0
    }
}

pub fn rank(
    scorer: &dyn Scorer,
    question: &QuestionRecord,
    pool: &CandidatePool,
    kb: &KnowledgeBase,
) -> Result<RankedCandidates, RankError> {
    let scored = pool
        .candidates
        .iter()
        .map(|c| (c.clone(), scorer.score(question, c, kb)))
        .collect();
    RankedCandidates::from_scores(&question.qid, scored)
}

fn check_fraction(p: f64) -> Result<(), RankError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(RankError::Fraction(p))
    }
}

/// `floor(p * n)` with a small epsilon against representation error.
pub fn quantile_count(n: usize, p: f64) -> usize {
    ((p * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Threshold `λ` such that `floor(p * n)` confidences fall strictly below it
/// when all are distinct (ties can make that count smaller).
///
/// `p = 0` yields `-inf` and a count reaching `n` yields `+inf`.
pub fn select_threshold(confidences: &[f64], p: f64) -> Result<f64, RankError> {
    check_fraction(p)?;
    if confidences.is_empty() {
        return Err(RankError::NoConfidences);
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = quantile_count(sorted.len(), p);
    Ok(sorted.get(m).copied().unwrap_or(f64::INFINITY))
}

/// Threshold such that the `floor(p * n)` highest confidences sit at or above
/// it. With `m = 0` the threshold is `+inf`.
pub fn select_upper_threshold(confidences: &[f64], p: f64) -> Result<f64, RankError> {
    check_fraction(p)?;
    if confidences.is_empty() {
        return Err(RankError::NoConfidences);
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = quantile_count(sorted.len(), p);
    if m == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(sorted[sorted.len() - m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Triple;
    use proptest::prelude::*;


    fn lf(s: &str) -> LogicalForm {
        LogicalForm::parse(s).unwrap()
    }

    fn question(qid: &str, gold: Option<&str>) -> QuestionRecord {
        QuestionRecord {
            qid: qid.into(),
            question: "what".into(),
            topic_entities: vec!["x".into()],
            gold_answer_ids: vec!["a".into()],
            gold_lf: gold.map(str::to_string),
            level: None,
        }
    }

    #[test]
    fn token_f1_cases() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(token_f1(&v(&["a", "b"]), &v(&["b", "c"])), 0.5);
        assert_eq!(token_f1(&v(&["a"]), &v(&["b"])), 0.0);
        assert_eq!(token_f1(&v(&[]), &v(&["b"])), 0.0);
        assert_eq!(token_f1(&v(&["a", "a"]), &v(&["a"])), 2.0 * 1.0 * 0.5 / 1.5);
    }

    #[test]
    fn lexical_identical_tokens() {
        let mut kb = KnowledgeBase::from_triples([Triple::new("m.j", "language", "m.01428y")]);
        kb.set_name("m.j", "Jamaican");
        kb.set_name("m.01428y", "English");
        // relation "language", anchor "Jamaican", answer "English"
        let c = lf("(JOIN R language m.j)");
        assert_eq!(LexicalScorer::lexical_score("Jamaican English language?", &c, &kb), 1.0);
        assert_eq!(LexicalScorer::lexical_score("who is it", &c, &kb), 0.0);
        assert_eq!(LexicalScorer::lexical_score("", &c, &kb), 0.0);
    }

    #[test]
    fn relation_ids_split_on_dots_and_underscores() {
        let kb = KnowledgeBase::from_triples([Triple::new("a", "people.person.place_of_birth", "b")]);
        let words = verbalize(&lf("(JOIN R people.person.place_of_birth a)"), &kb);
        assert_eq!(words, vec!["people", "person", "place", "of", "birth", "a", "b"]);
    }

    #[test]
    fn argmax_and_tie_break() {
        let r = RankedCandidates::from_scores(
            "q",
            vec![(lf("(JOIN c2 x)"), 0.1), (lf("(JOIN c1 x)"), 0.9)],
        )
        .unwrap();
        assert_eq!(r.lf_ranker().serialize(), "(JOIN c1 x)");
        assert_eq!(r.confidence, 0.9);

        let r = RankedCandidates::from_scores(
            "q",
            vec![(lf("(JOIN b x)"), 0.5), (lf("(JOIN a x)"), 0.5)],
        )
        .unwrap();
        assert_eq!(r.lf_ranker().serialize(), "(JOIN a x)");
        assert!(matches!(
            RankedCandidates::from_scores("q", vec![]),
            Err(RankError::NoCandidates(_))
        ));
    }

    #[test]
    fn imported_scores_and_missing() {
        let scorer = ImportedScorer::from_rows(vec![ScoreFileRow {
            qid: "q".into(),
            scores: HashMap::from([("(JOIN  a x)".to_string(), 2.0)]),
        }])
        .unwrap();
        let kb = KnowledgeBase::new();
        let q = question("q", None);
        assert_eq!(scorer.score(&q, &lf("(JOIN a x)"), &kb), 2.0);
        assert_eq!(scorer.score(&q, &lf("(JOIN b x)"), &kb), f64::NEG_INFINITY);
        let pool = CandidatePool::new("q", [lf("(JOIN a x)"), lf("(JOIN b x)")]);
        let r = rank(&scorer, &q, &pool, &kb).unwrap();
        assert_eq!(r.ranked[1].1, f64::NEG_INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"qid":"q","ranked":[["(JOIN a x)",2.0],["(JOIN b x)","-inf"]],"confidence":2.0}"#
        );
        assert_eq!(serde_json::from_str::<RankedCandidates>(&json).unwrap(), r);
    }

    #[test]
    fn noisy_oracle_clean_puts_gold_first() {
        let kb = KnowledgeBase::new();
        let forms: Vec<_> = (0..6).map(|i| lf(&format!("(JOIN r{i} x)"))).collect();
        let pool = CandidatePool::new("q", forms);
        let s = NoisyOracleScorer::new(0.0, 9);
        for i in 0..20 {
            let q = question(&format!("q{i}"), Some("(JOIN r3 x)"));
            let r = rank(&s, &q, &pool, &kb).unwrap();
            assert_eq!(r.lf_ranker().serialize(), "(JOIN r3 x)");
            assert_eq!(r.confidence, 1.0);
        }
    }

    #[test]
    fn noisy_oracle_full_noise_ignores_gold() {
        let kb = KnowledgeBase::new();
        let forms: Vec<_> = (0..5).map(|i| lf(&format!("(JOIN r{i} x)"))).collect();
        let pool = CandidatePool::new("q", forms);
        let s = NoisyOracleScorer::new(1.0, 4);
        let trials = 1000;
        let hits = (0..trials)
            .filter(|i| {
                let q = question(&format!("q{i}"), Some("(JOIN r2 x)"));
                rank(&s, &q, &pool, &kb).unwrap().lf_ranker().serialize() == "(JOIN r2 x)"
            })
            .count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.2).abs() <= 0.05, "gold-at-top rate {rate}");
    }

    #[test]
    fn noisy_oracle_is_order_independent() {
        let s = NoisyOracleScorer::new(0.5, 11);
        let kb = KnowledgeBase::new();
        let q = question("q1", Some("(JOIN r0 x)"));
        let a = s.score(&q, &lf("(JOIN r1 x)"), &kb);
        let _ = s.score(&question("q2", None), &lf("(JOIN r1 x)"), &kb);
        assert_eq!(a, s.score(&q, &lf("(JOIN r1 x)"), &kb));
    }

    #[test]
    fn threshold_examples() {
        let c: Vec<f64> = (1..=20).map(f64::from).collect();
        let l = select_threshold(&c, 0.05).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(c.iter().filter(|&&s| s < l).count(), 1);
        let l0 = select_threshold(&c, 0.0).unwrap();
        assert_eq!(c.iter().filter(|&&s| s < l0).count(), 0);
        let l1 = select_threshold(&c, 1.0).unwrap();
        assert_eq!(l1, f64::INFINITY);
        assert!(c.iter().all(|&s| s < l1));
        assert!(select_threshold(&[], 0.5).is_err());
        assert!(select_threshold(&c, 1.5).is_err());
    }

    #[test]
    fn upper_threshold() {
        let c: Vec<f64> = (1..=20).map(f64::from).collect();
        let l = select_upper_threshold(&c, 0.05).unwrap();
        assert_eq!(l, 20.0);
        assert_eq!(select_upper_threshold(&c, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(select_upper_threshold(&c, 1.0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn strict_qualifiers_bounded(cs in proptest::collection::vec(0u8..20, 1..60), p in 0.0f64..=1.0) {
            let cs: Vec<f64> = cs.into_iter().map(f64::from).collect();
            let l = select_threshold(&cs, p).unwrap();
            let below = cs.iter().filter(|&&s| s < l).count();
            prop_assert!(below <= quantile_count(cs.len(), p));
        }

        #[test]
        fn distinct_confidences_hit_exact_count(n in 1usize..80, p in 0.0f64..=1.0, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cs: Vec<f64> = (0..n).map(|i| i as f64 + rand::Rng::random::<f64>(&mut rng) * 0.5).collect();
            cs.reverse();
            let l = select_threshold(&cs, p).unwrap();
            prop_assert_eq!(cs.iter().filter(|&&s| s < l).count(), quantile_count(n, p));
        }

        #[test]
        fn monotone_transform_keeps_order(scores in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let forms: Vec<LogicalForm> = (0..scores.len()).map(|i| lf(&format!("(JOIN r{i} x)"))).collect();
            let a = RankedCandidates::from_scores("q", forms.iter().cloned().zip(scores.iter().copied()).collect()).unwrap();
            let b = RankedCandidates::from_scores("q", forms.iter().cloned().zip(scores.iter().map(|s| s.exp() * 3.0 + 1.0)).collect()).unwrap();
            let order = |r: &RankedCandidates| r.ranked.iter().map(|c| c.0.serialize()).collect::<Vec<_>>();
            prop_assert_eq!(order(&a), order(&b));
        }

        #[test]
        fn monotone_transform_keeps_qualifiers(cs in proptest::collection::vec(-3.0f64..3.0, 1..50), p in 0.0f64..=1.0) {
            let t: Vec<f64> = cs.iter().map(|s| s.exp()).collect();
            let la = select_threshold(&cs, p).unwrap();
            let lb = select_threshold(&t, p).unwrap();
            let sa: Vec<bool> = cs.iter().map(|&s| s < la).collect();
            let sb: Vec<bool> = t.iter().map(|&s| s < lb).collect();
            prop_assert_eq!(sa, sb);
        }
    }
}
