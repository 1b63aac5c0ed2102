//! Pipeline stages. The `*_batch` functions work on in-memory data; the
//! file-level runners read stage artifacts, write their own artifact
//! atomically and record a `<artifact>.manifest.json` next to it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::choice::{build_choice_set, reduce, ChoiceSet};
use crate::config::{RunConfig, ScorerKind};
use crate::dataset::{self, QuestionRecord};
use crate::decision::{decide as decide_rows, CompletionRow, DecideOptions, DecisionRecord, Method};
use crate::eval::{self, EvalReport};
use crate::gateway::{
    BackendKind, CompletionParams, Gateway, MockBackend, OptionTable, RemoteBackend, ResponseCache, Source,
};
use crate::io;
use crate::kb::KnowledgeBase;
use crate::logical_form::{enumerate_two_hop, CandidatePool};
use crate::par::{self, Execution};
use crate::prompt::{
    exemplar_order, explanation_selects, render_explanation_request, render_prompt, Exemplar, Mode,
    PromptError, PromptText,
};
use crate::ranking::{self, ImportedScorer, LexicalScorer, NoisyOracleScorer, RankedCandidates, Scorer};
use crate::Error;

/// Locations of every stage artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub kb_summary: PathBuf,
    pub dev_candidates: PathBuf,
    pub dev_ranked: PathBuf,
    pub dev_choices: PathBuf,
    pub candidates: PathBuf,
    pub ranked: PathBuf,
    pub choices: PathBuf,
    pub prompts: PathBuf,
    pub completions: PathBuf,
    pub decisions: PathBuf,
    pub eval_rows: PathBuf,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
}

impl Artifacts {
    /// Default layout: dev artifacts under `out/dev/`, the rest under `out/`.
    pub fn under(out: &Path) -> Self {
        let dev = out.join("dev");
        Self {
            kb_summary: out.join("kb.jsonl"),
            dev_candidates: dev.join("candidates.jsonl"),
            dev_ranked: dev.join("ranked.jsonl"),
            dev_choices: dev.join("choices.jsonl"),
            candidates: out.join("candidates.jsonl"),
            ranked: out.join("ranked.jsonl"),
            choices: out.join("choices.jsonl"),
            prompts: out.join("prompts.jsonl"),
            completions: out.join("completions.jsonl"),
            decisions: out.join("decisions.jsonl"),
            eval_rows: out.join("eval.jsonl"),
            report_json: out.join("report.json"),
            report_txt: out.join("report.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sources: BTreeMap<Source, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn float_value(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or_else(
        || {
            let s = if x.is_nan() {
                "nan"
            } else if x > 0.0 {
                "inf"
            } else {
                "-inf"
            };
            Value::String(s.into())
        },
        Value::Number,
    )
}

struct Recorder<'a> {
    stage: &'static str,
    cfg: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    sources: BTreeMap<Source, usize>,
    details: BTreeMap<String, Value>,
}

impl<'a> Recorder<'a> {
    fn new(stage: &'static str, cfg: &'a RunConfig) -> Self {
        Self {
            stage,
            cfg,
            inputs: BTreeMap::new(),
            sources: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<(), Error> {
        if !path.exists() {
            return Err(Error::MissingInput(format!("{role}: {}", path.display())));
        }
        self.inputs.insert(role.to_string(), io::sha256_file(path)?);
        Ok(())
    }

    fn finish(self, out: &Path, bytes: &[u8], rows: usize) -> Result<Manifest, Error> {
        io::write_atomic(out, bytes)?;
        let manifest = Manifest {
            stage: self.stage.to_string(),
            config_hash: self.cfg.hash(),
            inputs: self.inputs,
            output: io::sha256_hex(bytes),
            rows,
            sources: self.sources,
            details: self.details,
        };
        io::write_json(manifest_path(out), &manifest)?;
        log::info!("{}: {} rows -> {}", self.stage, rows, out.display());
        Ok(manifest)
    }

    fn finish_jsonl<T: Serialize>(self, out: &Path, rows: &[T]) -> Result<Manifest, Error> {
        let text = io::to_jsonl(rows)?;
        self.finish(out, text.as_bytes(), rows.len())
    }
}

fn required<'p>(path: &'p Option<PathBuf>, what: &str) -> Result<&'p Path, Error> {
    path.as_deref()
        .ok_or_else(|| Error::MissingInput(format!("no {what} path configured")))
}

/// Loads the KB (and names, when configured) and records their hashes.
fn load_kb(cfg: &RunConfig, rec: &mut Recorder) -> Result<KnowledgeBase, Error> {
    let kb_path = required(&cfg.paths.kb, "kb")?;
    rec.input("kb", kb_path)?;
    let mut kb = KnowledgeBase::ingest_triples(kb_path)?;
    if let Some(names) = &cfg.paths.names {
        rec.input("names", names)?;
        kb = kb.ingest_names(names)?;
    }
    Ok(kb)
}

fn load_questions(path: &Path, role: &str, rec: &mut Recorder) -> Result<Vec<QuestionRecord>, Error> {
    rec.input(role, path)?;
    Ok(dataset::load(path)?)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path, role: &str, rec: &mut Recorder) -> Result<Vec<T>, Error> {
    rec.input(role, path)?;
    Ok(io::read_jsonl(path)?)
}

// ---------------------------------------------------------------- batches

/// Candidate pools in question order. Questions without topic entities get
/// an empty pool.
pub fn enumerate_batch(exec: Execution, kb: &KnowledgeBase, questions: &[QuestionRecord]) -> Vec<CandidatePool> {
    par::map(exec, questions, |q| {
        enumerate_two_hop(kb, &q.qid, &q.topic_entities).unwrap_or_else(|e| {
            log::warn!("{}: {e}", q.qid);
            CandidatePool::new(&q.qid, Vec::new())
        })
    })
}

/// Rankings for every question with a non-empty pool, in question order.
pub fn rank_batch(
    exec: Execution,
    scorer: &dyn Scorer,
    kb: &KnowledgeBase,
    questions: &[QuestionRecord],
    pools: &[CandidatePool],
) -> Result<Vec<RankedCandidates>, Error> {
    let by_qid: HashMap<&str, &CandidatePool> = pools.iter().map(|p| (p.qid.as_str(), p)).collect();
    let work: Vec<(&QuestionRecord, &CandidatePool)> = questions
        .iter()
        .filter_map(|q| by_qid.get(q.qid.as_str()).map(|p| (q, *p)))
        .filter(|(_, p)| !p.candidates.is_empty())
        .collect();
    let ranked = par::try_map(exec, &work, |(q, p)| ranking::rank(scorer, q, p, kb))?;
    Ok(ranked)
}

/// Choice sets for every ranked question with at least one eligible option.
pub fn choices_batch(
    exec: Execution,
    kb: &KnowledgeBase,
    questions: &[QuestionRecord],
    ranked: &[RankedCandidates],
    k: usize,
    max_answers: usize,
) -> Result<Vec<ChoiceSet>, Error> {
    let by_qid: HashMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.qid.as_str(), q)).collect();
    let built = par::try_map(exec, ranked, |r| -> Result<Option<ChoiceSet>, Error> {
        let q = by_qid
            .get(r.qid.as_str())
            .ok_or_else(|| Error::MissingInput(format!("ranked question `{}` is not in the dataset", r.qid)))?;
        let reduced = reduce(r, k, kb, max_answers)?;
        if reduced.is_empty() {
            log::warn!("{}: no candidate with 1..={max_answers} answers", r.qid);
            return Ok(None);
        }
        let gold = q.gold_form();
        Ok(Some(build_choice_set(&q.qid, &q.question, reduced, kb, gold.as_ref())?))
    })?;
    Ok(built.into_iter().flatten().collect())
}

pub fn prompts_batch(
    exec: Execution,
    mode: Mode,
    exemplars: &[Exemplar],
    choices: &[ChoiceSet],
) -> Result<Vec<PromptText>, Error> {
    Ok(par::try_map(exec, choices, |cs| render_prompt(mode, exemplars, cs))?)
}

/// Completes every prompt; returns rows in prompt order and source counts.
pub fn infer_batch(
    exec: Execution,
    gateway: &Gateway,
    params: &CompletionParams,
    prompts: &[PromptText],
) -> Result<(Vec<CompletionRow>, BTreeMap<Source, usize>), Error> {
    let records = par::try_map(exec, prompts, |p| gateway.complete(p, params))?;
    let mut sources = BTreeMap::new();
    let rows = prompts
        .iter()
        .zip(records)
        .map(|(p, r)| {
            *sources.entry(r.source).or_insert(0) += 1;
            CompletionRow {
                qid: p.qid.clone(),
                prompt_hash: r.prompt_hash,
                output_text: r.output_text,
            }
        })
        .collect();
    Ok((rows, sources))
}

/// Marks each option whose answer set equals the gold answer set.
pub fn option_table(kb: &KnowledgeBase, questions: &[QuestionRecord], choices: &[ChoiceSet]) -> OptionTable {
    let by_qid: HashMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.qid.as_str(), q)).collect();
    let mut table = OptionTable::default();
    for cs in choices {
        let Some(q) = by_qid.get(cs.qid.as_str()) else {
            continue;
        };
        let gold = q.gold_answers(kb);
        let correct = cs
            .options
            .iter()
            .map(|o| o.answer_ids.iter().cloned().collect::<BTreeSet<_>>() == gold)
            .collect();
        table.insert(cs.qid.clone(), correct);
    }
    table
}

pub fn build_scorer(cfg: &RunConfig) -> Result<Box<dyn Scorer>, Error> {
    Ok(match cfg.scorer {
        ScorerKind::Lexical => Box::new(LexicalScorer),
        ScorerKind::Imported => Box::new(ImportedScorer::load(required(&cfg.paths.scores, "scores")?)?),
        ScorerKind::NoisyOracle => Box::new(NoisyOracleScorer::new(cfg.epsilon, cfg.seed)),
    })
}

/// Gateway for the configured backend, caching under `<cache>/completions`.
/// Oracle and adversarial backends answer from `table`.
pub fn build_gateway(cfg: &RunConfig, table: OptionTable) -> Result<Gateway, Error> {
    let backend: Box<dyn crate::gateway::Backend> = match cfg.backend {
        BackendKind::Remote => Box::new(RemoteBackend::from_env(&cfg.endpoint_url, cfg.timeout())?),
        BackendKind::Scripted => Box::new(MockBackend::load_script(required(&cfg.paths.script, "script")?)?),
        BackendKind::Oracle => Box::new(MockBackend::Oracle(table)),
        BackendKind::Adversarial => Box::new(MockBackend::Adversarial(table)),
        BackendKind::Random => Box::new(MockBackend::Random { seed: cfg.seed }),
    };
    Ok(Gateway::new(backend)
        .with_cache(ResponseCache::new(cfg.cache_dir().join("completions")))
        .with_retry(cfg.retry_policy())
        .with_rate_limit(cfg.rate_limit_per_min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub qid: String,
    pub explanation: String,
    pub model: String,
    pub created_at: String,
}

/// `qid` itself when it is a safe file name, otherwise its hash.
fn file_stem(qid: &str) -> String {
    let safe = !qid.is_empty()
        && !qid.starts_with('.')
        && qid.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if safe {
        qid.to_string()
    } else {
        io::sha256_hex(qid.as_bytes())
    }
}

fn cached_explanation(path: &Path, model: &str, gold: char) -> Option<String> {
    let entry: ExplanationEntry = io::read_json(path).ok()?;
    (entry.model == model && explanation_selects(&entry.explanation, gold)).then_some(entry.explanation)
}

/// Samples `n` exemplars from the dev choice sets. In CoT mode each one needs
/// an explanation that selects its gold option; up to `attempts` requests are
/// made before the exemplar is replaced by the next one in the sampled order.
pub fn build_exemplars(
    cfg: &RunConfig,
    dev: &[ChoiceSet],
    gateway: Option<&Gateway>,
) -> Result<Vec<Exemplar>, Error> {
    let n = cfg.n_exemplars;
    let order = exemplar_order(dev, cfg.seed);
    if cfg.mode == Mode::Icl {
        if order.len() < n {
            return Err(PromptError::Shortfall { wanted: n, available: order.len() }.into());
        }
        return Ok(order
            .into_iter()
            .take(n)
            .map(|cs| Exemplar { choice_set: cs.clone(), explanation: None })
            .collect());
    }
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let gateway = gateway.ok_or_else(|| Error::MissingInput("CoT exemplars need a gateway".into()))?;
    let params = cfg.completion_params();
    let model = gateway.identity(&params);
    let dir = cfg.cache_dir().join("exemplars");
    for cs in order {
        if out.len() == n {
            break;
        }
        let gold = cs.gold_letter.expect("exemplar_order keeps gold-lettered sets");
        let path = dir.join(format!("{}.json", file_stem(&cs.qid)));
        let mut explanation = cached_explanation(&path, &model, gold);
        if explanation.is_none() {
            for attempt in 0..cfg.explanation_attempts {
                let request = render_explanation_request(cs, attempt)?;
                let text = gateway.complete(&request, &params)?.output_text;
                if explanation_selects(&text, gold) {
                    let entry = ExplanationEntry {
                        qid: cs.qid.clone(),
                        explanation: text.clone(),
                        model: model.clone(),
                        created_at: chrono::Utc::now().to_rfc3339(),
                    };
                    io::write_json(&path, &entry)?;
                    explanation = Some(text);
                    break;
                }
                log::warn!("{}: explanation attempt {} does not select [{gold}]", cs.qid, attempt + 1);
            }
        }
        match explanation {
            Some(e) => out.push(Exemplar { choice_set: cs.clone(), explanation: Some(e) }),
            None => log::warn!("{}: dropped as exemplar", cs.qid),
        }
    }
    if out.len() < n {
        return Err(PromptError::Shortfall { wanted: n, available: out.len() }.into());
    }
    Ok(out)
}

// ---------------------------------------------------------------- runners

#[derive(Debug, Serialize)]
struct KbSummary {
    triples: usize,
    entities: usize,
    relations: usize,
    names: usize,
}

pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("ingest", cfg);
    let kb = load_kb(cfg, &mut rec)?;
    let summary = KbSummary {
        triples: kb.len(),
        entities: kb.entities().len(),
        relations: kb.relations().len(),
        names: kb.name_count(),
    };
    rec.finish_jsonl(out, &[summary])
}

pub fn enumerate(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("enumerate", cfg);
    let kb = load_kb(cfg, &mut rec)?;
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let pools = enumerate_batch(cfg.execution, &kb, &questions);
    let total: usize = pools.iter().map(|p| p.candidates.len()).sum();
    rec.details.insert("candidates".into(), total.into());
    rec.finish_jsonl(out, &pools)
}

pub fn rank(cfg: &RunConfig, dataset: &Path, candidates: &Path, out: &Path) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("rank", cfg);
    let kb = load_kb(cfg, &mut rec)?;
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let pools: Vec<CandidatePool> = read_rows(candidates, "candidates", &mut rec)?;
    if let Some(scores) = cfg.paths.scores.as_deref().filter(|_| cfg.scorer == ScorerKind::Imported) {
        rec.input("scores", scores)?;
    }
    let scorer = build_scorer(cfg)?;
    let ranked = rank_batch(cfg.execution, scorer.as_ref(), &kb, &questions, &pools)?;
    rec.finish_jsonl(out, &ranked)
}

pub fn choices(cfg: &RunConfig, dataset: &Path, ranked: &Path, out: &Path) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("choices", cfg);
    let kb = load_kb(cfg, &mut rec)?;
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let ranked: Vec<RankedCandidates> = read_rows(ranked, "ranked", &mut rec)?;
    let sets = choices_batch(cfg.execution, &kb, &questions, &ranked, cfg.k_options, cfg.max_answers)?;
    let with_gold = sets.iter().filter(|c| c.gold_letter.is_some()).count();
    rec.details.insert("gold_among_options".into(), with_gold.into());
    rec.finish_jsonl(out, &sets)
}

pub fn prompts(cfg: &RunConfig, choices: &Path, dev_choices: Option<&Path>, out: &Path) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("prompts", cfg);
    let sets: Vec<ChoiceSet> = read_rows(choices, "choices", &mut rec)?;
    let dev: Vec<ChoiceSet> = match (cfg.n_exemplars, dev_choices) {
        (0, _) => Vec::new(),
        (_, Some(p)) => read_rows(p, "dev_choices", &mut rec)?,
        (_, None) => return Err(Error::MissingInput("dev choices are needed to sample exemplars".into())),
    };
    let gateway = match cfg.mode {
        Mode::Cot if cfg.n_exemplars > 0 => Some(build_gateway(cfg, OptionTable::default())?),
        _ => None,
    };
    let exemplars = build_exemplars(cfg, &dev, gateway.as_ref())?;
    let ex_ids: Vec<Value> = exemplars.iter().map(|e| e.choice_set.qid.clone().into()).collect();
    rec.details.insert("exemplars".into(), ex_ids.into());
    let texts = prompts_batch(cfg.execution, cfg.mode, &exemplars, &sets)?;
    rec.finish_jsonl(out, &texts)
}

/// `choices` and `dataset` are read only by the oracle and adversarial
/// backends, which need to know which options are correct.
pub fn infer(
    cfg: &RunConfig,
    prompts_path: &Path,
    choices: Option<&Path>,
    dataset: Option<&Path>,
    out: &Path,
) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("infer", cfg);
    let texts: Vec<PromptText> = read_rows(prompts_path, "prompts", &mut rec)?;
    let table = if matches!(cfg.backend, BackendKind::Oracle | BackendKind::Adversarial) {
        let kb = load_kb(cfg, &mut rec)?;
        let choices = choices.ok_or_else(|| Error::MissingInput("choices (for the option table)".into()))?;
        let dataset = dataset.ok_or_else(|| Error::MissingInput("dataset (for the option table)".into()))?;
        let questions = load_questions(dataset, "dataset", &mut rec)?;
        let sets: Vec<ChoiceSet> = read_rows(choices, "choices", &mut rec)?;
        option_table(&kb, &questions, &sets)
    } else {
        if let Some(script) = cfg.paths.script.as_deref().filter(|_| cfg.backend == BackendKind::Scripted) {
            rec.input("script", script)?;
        }
        OptionTable::default()
    };
    let gateway = build_gateway(cfg, table)?;
    let (rows, sources) = infer_batch(cfg.execution, &gateway, &cfg.completion_params(), &texts)?;
    rec.sources = sources;
    rec.details.insert("dispatched".into(), gateway.dispatched().into());
    rec.details.insert("model".into(), gateway.identity(&cfg.completion_params()).into());
    rec.finish_jsonl(out, &rows)
}

pub fn decide(
    cfg: &RunConfig,
    dataset: &Path,
    ranked: &Path,
    choices: &Path,
    completions: Option<&Path>,
    out: &Path,
) -> Result<Manifest, Error> {
    let mut rec = Recorder::new("decide", cfg);
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let ranked: Vec<RankedCandidates> = read_rows(ranked, "ranked", &mut rec)?;
    let sets: Vec<ChoiceSet> = read_rows(choices, "choices", &mut rec)?;
    let completions: Option<Vec<CompletionRow>> = match completions {
        Some(p) if p.exists() || cfg.method != Method::Rank => Some(read_rows(p, "completions", &mut rec)?),
        _ if cfg.method != Method::Rank => {
            return Err(Error::MissingInput("completions are needed unless --method rank".into()))
        }
        _ => None,
    };
    let opts = DecideOptions {
        method: cfg.method,
        fusion_p: cfg.fusion_p,
        fuse_side: cfg.fuse_side,
        lambda: cfg.lambda,
    };
    let (rows, lambda) = decide_rows(&questions, &ranked, &sets, completions.as_deref(), opts)?;
    rec.details.insert("lambda".into(), float_value(lambda));
    rec.details.insert("method".into(), cfg.method.to_string().into());
    rec.finish_jsonl(out, &rows)
}

pub fn eval(
    cfg: &RunConfig,
    dataset: &Path,
    decisions: &Path,
    rows_out: &Path,
    report_out: &Path,
) -> Result<(Manifest, EvalReport), Error> {
    let mut rec = Recorder::new("eval", cfg);
    let kb = load_kb(cfg, &mut rec)?;
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let decisions: Vec<DecisionRecord> = read_rows(decisions, "decisions", &mut rec)?;
    let report = eval::aggregate_with(&decisions, &questions, &kb, cfg.both_empty_f1)?;
    let inputs = rec.inputs.clone();
    let mut json = serde_json::to_string_pretty(&report).map_err(io::IoError::Encode)?;
    json.push('\n');
    let manifest = rec.finish_jsonl(rows_out, &report.rows)?;
    let mut report_rec = Recorder::new("eval", cfg);
    report_rec.inputs = inputs;
    report_rec.finish(report_out, json.as_bytes(), 1)?;
    Ok((manifest, report))
}

/// Renders `report.json` as plain-text tables.
pub fn report(cfg: &RunConfig, report_json: &Path, out: &Path) -> Result<(Manifest, String), Error> {
    let mut rec = Recorder::new("report", cfg);
    rec.input("report", report_json)?;
    let report: EvalReport = io::read_json(report_json)?;
    let text = eval::render_text(&report);
    let manifest = rec.finish(out, text.as_bytes(), 1)?;
    Ok((manifest, text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitSizes {
    pub input: usize,
    pub dev: usize,
    pub rest: usize,
    pub train: usize,
}

/// Carves `dev_size` local-dev questions off `dataset`, then keeps a
/// `fraction` sample of the remainder as the few-shot training set.
pub fn split(
    cfg: &RunConfig,
    dataset: &Path,
    fraction: f64,
    dev_size: usize,
    dev_out: &Path,
    train_out: &Path,
) -> Result<SplitSizes, Error> {
    let mut rec = Recorder::new("split", cfg);
    let questions = load_questions(dataset, "dataset", &mut rec)?;
    let (dev, rest) = dataset::split_local_dev(&questions, dev_size, cfg.seed)?;
    let train = dataset::few_shot_split(&rest, fraction, cfg.seed)?;
    rec.details.insert("fraction".into(), float_value(fraction));
    rec.details.insert("dev_size".into(), dev_size.into());
    let inputs = rec.inputs.clone();
    rec.finish_jsonl(dev_out, &dev)?;
    let mut train_rec = Recorder::new("split", cfg);
    train_rec.inputs = inputs;
    train_rec.finish_jsonl(train_out, &train)?;
    Ok(SplitSizes {
        input: questions.len(),
        dev: dev.len(),
        rest: rest.len(),
        train: train.len(),
    })
}

/// Every stage end to end, through the same runners the CLI exposes.
pub fn pipeline(cfg: &RunConfig, a: &Artifacts) -> Result<(Vec<Manifest>, String), Error> {
    let dataset = required(&cfg.paths.dataset, "dataset")?;
    let mut manifests = vec![ingest(cfg, &a.kb_summary)?];
    let dev_choices = if cfg.n_exemplars > 0 {
        let dev = required(&cfg.paths.dev, "dev")?;
        manifests.push(enumerate(cfg, dev, &a.dev_candidates)?);
        manifests.push(rank(cfg, dev, &a.dev_candidates, &a.dev_ranked)?);
        manifests.push(choices(cfg, dev, &a.dev_ranked, &a.dev_choices)?);
        Some(a.dev_choices.as_path())
    } else {
        None
    };
    manifests.push(enumerate(cfg, dataset, &a.candidates)?);
    manifests.push(rank(cfg, dataset, &a.candidates, &a.ranked)?);
    manifests.push(choices(cfg, dataset, &a.ranked, &a.choices)?);
    manifests.push(prompts(cfg, &a.choices, dev_choices, &a.prompts)?);
    manifests.push(infer(cfg, &a.prompts, Some(&a.choices), Some(dataset), &a.completions)?);
    manifests.push(decide(cfg, dataset, &a.ranked, &a.choices, Some(&a.completions), &a.decisions)?);
    manifests.push(eval(cfg, dataset, &a.decisions, &a.eval_rows, &a.report_json)?.0);
    let (m, text) = report(cfg, &a.report_json, &a.report_txt)?;
    manifests.push(m);
    Ok((manifests, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Triple;
    use crate::prompt::ICL_SUFFIX;

    fn kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::from_triples([
            Triple::new("m.lin", "team", "m.rockets"),
            Triple::new("m.lin", "born", "m.la"),
            Triple::new("m.rockets", "located_in", "m.houston"),
        ]);
        kb.set_name("m.lin", "jeremy lin");
        kb.set_name("m.rockets", "houston rockets");
        kb.set_name("m.la", "los angeles");
        kb.set_name("m.houston", "houston");
        kb
    }

    fn q(qid: &str, question: &str, gold: &str) -> QuestionRecord {
        QuestionRecord {
            qid: qid.into(),
            question: question.into(),
            topic_entities: vec!["m.lin".into()],
            gold_answer_ids: vec![],
            gold_lf: Some(gold.into()),
            level: None,
        }
    }

    #[test]
    fn batches_agree_across_execution() {
        let kb = kb();
        let qs = vec![
            q("a", "what team does jeremy lin play for", "(JOIN R team m.lin)"),
            q("b", "where was jeremy lin born", "(JOIN R born m.lin)"),
        ];
        for exec in [Execution::Sequential, Execution::Parallel] {
            let pools = enumerate_batch(exec, &kb, &qs);
            assert_eq!(pools.len(), 2);
            let ranked = rank_batch(exec, &LexicalScorer, &kb, &qs, &pools).unwrap();
            assert_eq!(ranked[0].lf_ranker().to_string(), "(JOIN R team m.lin)");
            assert_eq!(ranked[1].lf_ranker().to_string(), "(JOIN R born m.lin)");
            let sets = choices_batch(exec, &kb, &qs, &ranked, 4, 4).unwrap();
            assert_eq!(sets[0].gold_letter, Some('A'));
            let texts = prompts_batch(exec, Mode::Icl, &[], &sets).unwrap();
            assert!(texts[0].text.ends_with(ICL_SUFFIX));
            let table = option_table(&kb, &qs, &sets);
            assert!(table.get("a").unwrap()[0]);
        }
    }

    #[test]
    fn empty_topic_entities_give_empty_pool() {
        let mut x = q("x", "?", "(JOIN R team m.lin)");
        x.topic_entities.clear();
        let pools = enumerate_batch(Execution::Sequential, &kb(), &[x.clone()]);
        assert!(pools[0].candidates.is_empty());
        assert!(rank_batch(Execution::Sequential, &LexicalScorer, &kb(), &[x], &pools).unwrap().is_empty());
    }

    #[test]
    fn manifest_path_naming() {
        assert_eq!(manifest_path(Path::new("out/ranked.jsonl")), Path::new("out/ranked.jsonl.manifest.json"));
    }

    #[test]
    fn float_values() {
        assert_eq!(float_value(f64::NEG_INFINITY), Value::String("-inf".into()));
        assert_eq!(float_value(0.5), serde_json::json!(0.5));
    }

    #[test]
    fn icl_exemplars_shortfall() {
        let cfg = RunConfig { n_exemplars: 3, ..Default::default() };
        assert!(matches!(
            build_exemplars(&cfg, &[], None),
            Err(Error::Prompt(PromptError::Shortfall { wanted: 3, available: 0 }))
        ));
    }
}
