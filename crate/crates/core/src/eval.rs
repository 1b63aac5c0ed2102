//! Per-question metrics and the aggregate report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QuestionRecord;
use crate::decision::{DecisionRecord, MatchState, Used};
use crate::kb::KnowledgeBase;
use crate::logical_form::LogicalForm;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("qid sets differ: `{0}` is not in both inputs")]
    QidMismatch(String),
    #[error("decision for unknown question `{0}`")]
    UnknownQuestion(String),
}

/// F1 value used when prediction and gold are both empty.
pub const BOTH_EMPTY_F1: f64 = 1.0;

/// Set F1. Both empty gives [`BOTH_EMPTY_F1`]; exactly one empty gives 0.
pub fn f1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    f1_with(pred, gold, BOTH_EMPTY_F1)
}

pub fn f1_with(pred: &BTreeSet<String>, gold: &BTreeSet<String>, both_empty: f64) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return both_empty,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = pred.intersection(gold).count();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// 1 when the canonical forms agree.
pub fn em(pred: &LogicalForm, gold: &LogicalForm) -> u8 {
    u8::from(pred.serialize() == gold.serialize())
}

/// Exact match on raw texts after canonicalization; unparsable text never
/// matches.
pub fn em_text(pred: &str, gold: &str) -> u8 {
    match (LogicalForm::parse(pred), LogicalForm::parse(gold)) {
        (Ok(p), Ok(g)) => em(&p, &g),
        _ => 0,
    }
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quadrants {
    pub equal_nonzero: f64,
    pub rank_better: f64,
    pub llm_better: f64,
    pub both_zero: f64,
}

impl Quadrants {
    pub fn total(&self) -> f64 {
        self.equal_nonzero + self.rank_better + self.llm_better + self.both_zero
    }
}

fn check_same_keys<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>) -> Result<(), EvalError> {
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(EvalError::QidMismatch(k.clone()));
    }
    if let Some(k) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(EvalError::QidMismatch(k.clone()));
    }
    Ok(())
}

/// Share of questions by how ranker and LLM F1 compare.
pub fn quadrant_compare(
    rank_f1s: &BTreeMap<String, f64>,
    llm_f1s: &BTreeMap<String, f64>,
) -> Result<Quadrants, EvalError> {
    check_same_keys(rank_f1s, llm_f1s)?;
    let n = rank_f1s.len();
    let mut counts = [0usize; 4];
    for (qid, &r) in rank_f1s {
        let l = llm_f1s[qid];
        let slot = if r == 0.0 && l == 0.0 {
            3
        } else if r == l {
            0
        } else if r > l {
            1
        } else {
            2
        };
        counts[slot] += 1;
    }
    Ok(Quadrants {
        equal_nonzero: pct(counts[0], n),
        rank_better: pct(counts[1], n),
        llm_better: pct(counts[2], n),
        both_zero: pct(counts[3], n),
    })
}

/// How often fusion picked the better (`higher`) or worse (`lower`) of the
/// two results, as a percentage of all questions. `tie` covers questions
/// where both results score the same; `neither` covers fused scores matching
/// neither side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionStats {
    pub higher: f64,
    pub lower: f64,
    pub tie: f64,
    pub neither: f64,
}

impl FusionStats {
    pub fn total(&self) -> f64 {
        self.higher + self.lower + self.tie + self.neither
    }
}

pub fn fusion_stats(
    fused: &BTreeMap<String, f64>,
    rank: &BTreeMap<String, f64>,
    llm: &BTreeMap<String, f64>,
) -> Result<FusionStats, EvalError> {
    check_same_keys(fused, rank)?;
    check_same_keys(fused, llm)?;
    let n = fused.len();
    let mut counts = [0usize; 4];
    for (qid, &f) in fused {
        let (r, l) = (rank[qid], llm[qid]);
        let slot = if r == l {
            2
        } else if f == r.max(l) {
            0
        } else if f == r.min(l) {
            1
        } else {
            3
        };
        counts[slot] += 1;
    }
    Ok(FusionStats {
        higher: pct(counts[0], n),
        lower: pct(counts[1], n),
        tie: pct(counts[2], n),
        neither: pct(counts[3], n),
    })
}

/// Share of LLM outputs per match state; `no_call` counts questions that
/// never reached the LLM and are left out of the percentages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchStats {
    pub matched: f64,
    pub fail: f64,
    pub ool: f64,
    pub considered: usize,
    pub no_call: usize,
}

pub fn match_stats<'a>(states: impl IntoIterator<Item = Option<&'a MatchState>>) -> MatchStats {
    let mut counts = [0usize; 3];
    let mut no_call = 0;
    for s in states {
        match s {
            Some(MatchState::Match) => counts[0] += 1,
            Some(MatchState::Fail) => counts[1] += 1,
            Some(MatchState::Ool) => counts[2] += 1,
            None => no_call += 1,
        }
    }
    let considered = counts.iter().sum();
    MatchStats {
        matched: pct(counts[0], considered),
        fail: pct(counts[1], considered),
        ool: pct(counts[2], considered),
        considered,
        no_call,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub qid: String,
    pub level: Option<String>,
    pub used: Used,
    pub match_state: Option<MatchState>,
    pub f1: f64,
    pub f1_rank: f64,
    pub f1_llm: f64,
    pub em: Option<u8>,
    pub em_rank: Option<u8>,
    pub em_llm: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    /// `None` when no question carries a gold logical form.
    pub em: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub count: usize,
    pub fuse: Scores,
    pub rank: Scores,
    pub llm: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    /// Questions with a gold logical form (EM is averaged over these).
    pub em_defined: usize,
    pub fuse: Scores,
    pub rank: Scores,
    pub llm: Scores,
    pub used_llm: usize,
    pub per_level: BTreeMap<String, LevelScores>,
    pub quadrants: Quadrants,
    pub fusion: FusionStats,
    pub match_states: MatchStats,
    /// Written separately, one line per question.
    #[serde(skip)]
    pub rows: Vec<EvalRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn scores<'a>(
    rows: &[&'a EvalRow],
    f1: impl Fn(&'a EvalRow) -> f64,
    em: impl Fn(&'a EvalRow) -> Option<u8>,
) -> Scores {
    let ems: Vec<f64> = rows.iter().filter_map(|r| em(r)).map(f64::from).collect();
    Scores {
        f1: mean(rows.iter().map(|r| f1(r))),
        em: (!ems.is_empty()).then(|| mean(ems.into_iter())),
    }
}

/// Executes the decided forms and scores every question.
pub fn aggregate(
    decisions: &[DecisionRecord],
    questions: &[QuestionRecord],
    kb: &KnowledgeBase,
) -> Result<EvalReport, EvalError> {
    aggregate_with(decisions, questions, kb, BOTH_EMPTY_F1)
}

/// [`aggregate`] with an explicit F1 for empty prediction and empty gold.
pub fn aggregate_with(
    decisions: &[DecisionRecord],
    questions: &[QuestionRecord],
    kb: &KnowledgeBase,
    both_empty: f64,
) -> Result<EvalReport, EvalError> {
    let by_qid: HashMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.qid.as_str(), q)).collect();
    let mut rows = Vec::with_capacity(decisions.len());
    for d in decisions {
        let q = by_qid
            .get(d.qid.as_str())
            .ok_or_else(|| EvalError::UnknownQuestion(d.qid.clone()))?;
        let gold = q.gold_answers(kb);
        let gold_lf = q.gold_form();
        let score = |lf: &Option<LogicalForm>| {
            let pred = lf.as_ref().map(|l| l.execute(kb)).unwrap_or_default();
            let em_value = gold_lf
                .as_ref()
                .map(|g| lf.as_ref().map_or(0, |l| em(l, g)));
            (f1_with(&pred, &gold, both_empty), em_value)
        };
        let (f1_fuse, em_fuse) = score(&d.lf_fuse);
        let (f1_rank, em_rank) = score(&d.lf_ranker);
        let (f1_llm, em_llm) = score(&d.lf_llm);
        rows.push(EvalRow {
            qid: d.qid.clone(),
            level: q.level.map(|l| l.label().to_string()),
            used: d.used,
            match_state: d.match_state,
            f1: f1_fuse,
            f1_rank,
            f1_llm,
            em: em_fuse,
            em_rank,
            em_llm,
        });
    }

    let all: Vec<&EvalRow> = rows.iter().collect();
    let mut levels: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
    for r in &rows {
        if let Some(l) = &r.level {
            levels.entry(l.clone()).or_default().push(r);
        }
    }
    let per_level = levels
        .into_iter()
        .map(|(level, rs)| {
            let s = LevelScores {
                count: rs.len(),
                fuse: scores(&rs, |r| r.f1, |r| r.em),
                rank: scores(&rs, |r| r.f1_rank, |r| r.em_rank),
                llm: scores(&rs, |r| r.f1_llm, |r| r.em_llm),
            };
            (level, s)
        })
        .collect();

    let key = |f: fn(&EvalRow) -> f64| -> BTreeMap<String, f64> {
        rows.iter().map(|r| (r.qid.clone(), f(r))).collect()
    };
    let (fused, rank, llm) = (key(|r| r.f1), key(|r| r.f1_rank), key(|r| r.f1_llm));
    let quadrants = quadrant_compare(&rank, &llm)?;
    let fusion = fusion_stats(&fused, &rank, &llm)?;

    Ok(EvalReport {
        questions: rows.len(),
        em_defined: rows.iter().filter(|r| r.em.is_some()).count(),
        fuse: scores(&all, |r| r.f1, |r| r.em),
        rank: scores(&all, |r| r.f1_rank, |r| r.em_rank),
        llm: scores(&all, |r| r.f1_llm, |r| r.em_llm),
        used_llm: rows.iter().filter(|r| r.used == Used::Llm).count(),
        per_level,
        quadrants,
        fusion,
        match_states: match_stats(rows.iter().map(|r| r.match_state.as_ref())),
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text tables: scores per method, per level, ranker/LLM comparison,
/// fusion statistics and match states.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "questions: {}  (EM defined on {})", report.questions, report.em_defined);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10}{:>8}{:>8}", "method", "F1", "EM");
    for (name, s) in [("rank", report.rank), ("llm", report.llm), ("w/ fuse", report.fuse)] {
        let _ = writeln!(out, "{:<10}{:>8.2}{:>8}", name, 100.0 * s.f1, fmt_opt(s.em));
    }
    let _ = writeln!(out, "fused questions using the LLM result: {}", report.used_llm);
    if !report.per_level.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<15}{:>5}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}",
            "level", "n", "rank F1", "rank EM", "llm F1", "llm EM", "fuse F1", "fuse EM"
        );
        for (level, s) in &report.per_level {
            let _ = writeln!(
                out,
                "{:<15}{:>5}{:>10.2}{:>10}{:>10.2}{:>10}{:>10.2}{:>10}",
                level,
                s.count,
                100.0 * s.rank.f1,
                fmt_opt(s.rank.em),
                100.0 * s.llm.f1,
                fmt_opt(s.llm.em),
                100.0 * s.fuse.f1,
                fmt_opt(s.fuse.em)
            );
        }
    }
    let q = report.quadrants;
    let _ = writeln!(out);
    let _ = writeln!(out, "rank vs llm (% of questions)");
    let _ = writeln!(out, "{:>15}{:>13}{:>12}{:>11}", "equal-nonzero", "rank-better", "llm-better", "both-zero");
    let _ = writeln!(
        out,
        "{:>15.2}{:>13.2}{:>12.2}{:>11.2}",
        q.equal_nonzero, q.rank_better, q.llm_better, q.both_zero
    );
    let f = report.fusion;
    let _ = writeln!(out);
    let _ = writeln!(out, "fusion (% of questions)");
    let _ = writeln!(out, "{:>8}{:>8}{:>8}{:>9}", "H", "L", "tie", "neither");
    let _ = writeln!(out, "{:>8.2}{:>8.2}{:>8.2}{:>9.2}", f.higher, f.lower, f.tie, f.neither);
    let m = report.match_states;
    let _ = writeln!(out);
    let _ = writeln!(out, "option matching (% of {} LLM outputs, {} without a call)", m.considered, m.no_call);
    let _ = writeln!(out, "{:>8}{:>8}{:>8}", "Match", "Fail", "OOL");
    let _ = writeln!(out, "{:>8.2}{:>8.2}{:>8.2}", m.matched, m.fail, m.ool);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn map(pairs: &[(f64, f64)]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let a = pairs.iter().enumerate().map(|(i, p)| (format!("q{i:02}"), p.0)).collect();
        let b = pairs.iter().enumerate().map(|(i, p)| (format!("q{i:02}"), p.1)).collect();
        (a, b)
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(f1(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(f1(&set(&["a", "b"]), &set(&["b", "c"])), 0.5);
        assert_eq!(f1(&set(&[]), &set(&[])), 1.0);
        assert_eq!(f1_with(&set(&[]), &set(&[]), 0.0), 0.0);
        assert_eq!(f1(&set(&[]), &set(&["a"])), 0.0);
        assert_eq!(f1(&set(&["a"]), &set(&[])), 0.0);
    }

    #[test]
    fn em_examples() {
        assert_eq!(em_text("(JOIN a x)", "(JOIN a x)"), 1);
        assert_eq!(em_text("(JOIN a x)", "(JOIN b x)"), 0);
        assert_eq!(em_text("( JOIN R a\n (JOIN b x))", "(JOIN R a (JOIN b x))"), 1);
        assert_eq!(em_text("(JOIN a", "(JOIN a x)"), 0);
    }

    #[test]
    fn quadrant_examples() {
        let (r, l) = map(&[(0.5, 0.5), (1.0, 1.0)]);
        assert_eq!(quadrant_compare(&r, &l).unwrap(), Quadrants { equal_nonzero: 100.0, ..Default::default() });
        let (r, l) = map(&[(1.0, 0.0); 3]);
        assert_eq!(quadrant_compare(&r, &l).unwrap(), Quadrants { rank_better: 100.0, ..Default::default() });
        // hand-assigned: equal-nonzero {0,1,2}, rank-better {3,4}, llm-better {5,6,7}, both-zero {8,9}
        let (r, l) = map(&[
            (1.0, 1.0),
            (0.5, 0.5),
            (0.2, 0.2),
            (1.0, 0.0),
            (0.8, 0.4),
            (0.0, 1.0),
            (0.3, 0.6),
            (0.0, 0.1),
            (0.0, 0.0),
            (0.0, 0.0),
        ]);
        assert_eq!(
            quadrant_compare(&r, &l).unwrap(),
            Quadrants { equal_nonzero: 30.0, rank_better: 20.0, llm_better: 30.0, both_zero: 20.0 }
        );
        let mut l2 = l.clone();
        l2.insert("extra".into(), 0.0);
        assert!(matches!(quadrant_compare(&r, &l2), Err(EvalError::QidMismatch(q)) if q == "extra"));
    }

    #[test]
    fn fusion_stat_examples() {
        let (r, l) = map(&[(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)]);
        let max: BTreeMap<_, _> = r.iter().map(|(k, v)| (k.clone(), v.max(l[k]))).collect();
        let min: BTreeMap<_, _> = r.iter().map(|(k, v)| (k.clone(), v.min(l[k]))).collect();
        assert_eq!(fusion_stats(&max, &r, &l).unwrap().lower, 0.0);
        assert_eq!(fusion_stats(&min, &r, &l).unwrap().higher, 0.0);

        // 20 questions, hand-labelled: 8 differ and fusion picks the better
        // side, 4 differ and it picks the worse one, 8 tie.
        let mut rank = Vec::new();
        let mut llm = Vec::new();
        let mut fused = Vec::new();
        for i in 0..20 {
            let (r, l, f) = match i {
                0..=3 => (1.0, 0.0, 1.0),
                4..=7 => (0.0, 0.5, 0.5),
                8..=9 => (1.0, 0.0, 0.0),
                10..=11 => (0.2, 0.6, 0.2),
                _ => (0.5, 0.5, 0.5),
            };
            rank.push(r);
            llm.push(l);
            fused.push(f);
        }
        let key = |v: &[f64]| v.iter().enumerate().map(|(i, x)| (format!("q{i:02}"), *x)).collect::<BTreeMap<_, _>>();
        let s = fusion_stats(&key(&fused), &key(&rank), &key(&llm)).unwrap();
        assert_eq!(s, FusionStats { higher: 40.0, lower: 20.0, tie: 40.0, neither: 0.0 });
    }

    #[test]
    fn match_stat_counts() {
        let states = [Some(MatchState::Match), Some(MatchState::Match), Some(MatchState::Fail), Some(MatchState::Ool), None];
        let m = match_stats(states.iter().map(Option::as_ref));
        assert_eq!(m.considered, 4);
        assert_eq!(m.no_call, 1);
        assert_eq!((m.matched, m.fail, m.ool), (50.0, 25.0, 25.0));
    }

    fn id_set() -> impl Strategy<Value = BTreeSet<String>> {
        proptest::collection::btree_set("[a-f]", 0..6)
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_bounded(a in id_set(), b in id_set()) {
            let x = f1(&a, &b);
            prop_assert_eq!(x, f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(f1(&a, &a), 1.0);
        }
    }
}
