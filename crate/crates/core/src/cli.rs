//! Command-line front end. Every subcommand shares one set of config and
//! artifact-path flags; flags override the config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, ScorerKind};
use crate::decision::{FuseSide, Method};
use crate::gateway::BackendKind;
use crate::par::Execution;
use crate::prompt::Mode;
use crate::stages::{self, Artifacts, Manifest};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "kbqa", version, about = "Multiple-choice question answering over a triple store")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load triples and names and write a KB summary.
    Ingest(Common),
    /// Enumerate two-hop candidate logical forms per question.
    Enumerate(Common),
    /// Score and sort candidates.
    Rank(Common),
    /// Reduce rankings to lettered options.
    Choices(Common),
    /// Render prompts (samples exemplars from the dev choices).
    Prompts(Common),
    /// Send prompts through the gateway.
    Infer(Common),
    /// Match option letters and fuse ranker and LLM results.
    Decide(Common),
    /// Score decisions against gold answers.
    Eval(Common),
    /// Print the report tables.
    Report(Common),
    /// Carve a local dev set and a few-shot training sample.
    Split(SplitArgs),
    /// Run every stage end to end.
    Pipeline(Common),
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Run enumerate/rank/choices on the dev set into the dev artifacts.
    #[arg(long)]
    pub on_dev: bool,

    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Imported score file for `--scorer imported`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Response script for `--backend scripted`.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,

    #[arg(long = "k")]
    pub k_options: Option<usize>,
    #[arg(long)]
    pub max_answers: Option<usize>,
    #[arg(long)]
    pub n_exemplars: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub fusion_p: Option<f64>,
    #[arg(long)]
    pub fuse_side: Option<FuseSide>,
    /// Fixed fusion threshold; overrides `--fusion-p`.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub scorer: Option<ScorerKind>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Stop string; repeat for several.
    #[arg(long)]
    pub stop: Vec<String>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub rate_limit: Option<u32>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<u64>,
    #[arg(long)]
    pub both_empty_f1: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the thread pool.
    #[arg(long)]
    pub sequential: bool,

    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub ranked: Option<PathBuf>,
    #[arg(long)]
    pub choices: Option<PathBuf>,
    #[arg(long)]
    pub dev_choices: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub completions: Option<PathBuf>,
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub eval_rows: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub report_text: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Share of the remaining questions kept for training.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Questions carved off as local dev before sampling.
    #[arg(long, default_value_t = 0)]
    pub dev_size: usize,
    #[arg(long)]
    pub dev_out: Option<PathBuf>,
    #[arg(long)]
    pub train_out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    /// Config file (or defaults) with flags applied, validated.
    pub fn config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let p = &mut c.paths;
        for (slot, v) in [
            (&mut p.out_dir, &self.out_dir),
            (&mut p.kb, &self.kb),
            (&mut p.names, &self.names),
            (&mut p.dataset, &self.dataset),
            (&mut p.dev, &self.dev),
            (&mut p.scores, &self.scores),
            (&mut p.script, &self.script),
            (&mut p.cache, &self.cache),
        ] {
            if v.is_some() {
                slot.clone_from(v);
            }
        }
        set(&mut c.k_options, self.k_options);
        set(&mut c.max_answers, self.max_answers);
        set(&mut c.n_exemplars, self.n_exemplars);
        set(&mut c.mode, self.mode);
        set(&mut c.method, self.method);
        set(&mut c.fusion_p, self.fusion_p);
        set(&mut c.fuse_side, self.fuse_side);
        if self.lambda.is_some() {
            c.lambda = self.lambda;
        }
        set(&mut c.scorer, self.scorer);
        set(&mut c.epsilon, self.epsilon);
        set(&mut c.backend, self.backend);
        set(&mut c.model, self.model.clone());
        set(&mut c.temperature, self.temperature);
        if !self.stop.is_empty() {
            c.stop = self.stop.clone();
        }
        set(&mut c.max_tokens, self.max_tokens);
        set(&mut c.endpoint_url, self.endpoint.clone());
        set(&mut c.rate_limit_per_min, self.rate_limit);
        set(&mut c.max_retries, self.max_retries);
        set(&mut c.timeout_secs, self.timeout);
        set(&mut c.both_empty_f1, self.both_empty_f1);
        set(&mut c.seed, self.seed);
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate()?;
        Ok(c)
    }

    /// Default layout under the output directory with per-flag overrides.
    pub fn artifacts(&self, cfg: &RunConfig) -> Artifacts {
        let mut a = Artifacts::under(&cfg.out_dir());
        for (slot, v) in [
            (&mut a.candidates, &self.candidates),
            (&mut a.ranked, &self.ranked),
            (&mut a.choices, &self.choices),
            (&mut a.dev_choices, &self.dev_choices),
            (&mut a.prompts, &self.prompts),
            (&mut a.completions, &self.completions),
            (&mut a.decisions, &self.decisions),
            (&mut a.eval_rows, &self.eval_rows),
            (&mut a.report_json, &self.report),
            (&mut a.report_txt, &self.report_text),
        ] {
            if let Some(v) = v {
                slot.clone_from(v);
            }
        }
        if self.on_dev {
            if self.candidates.is_none() {
                a.candidates = a.dev_candidates.clone();
            }
            if self.ranked.is_none() {
                a.ranked = a.dev_ranked.clone();
            }
            if self.choices.is_none() {
                a.choices = a.dev_choices.clone();
            }
        }
        a
    }
}

fn dataset_for<'c>(common: &Common, cfg: &'c RunConfig) -> Result<&'c Path, Error> {
    let (path, what) = if common.on_dev {
        (&cfg.paths.dev, "dev")
    } else {
        (&cfg.paths.dataset, "dataset")
    };
    path.as_deref()
        .ok_or_else(|| Error::MissingInput(format!("no {what} path configured (--{what})")))
}

fn summary(m: &Manifest, out: &Path) {
    let sources: Vec<String> = m.sources.iter().map(|(s, n)| format!("{}={n}", serde_json::to_value(s).unwrap().as_str().unwrap())).collect();
    if sources.is_empty() {
        eprintln!("{}: {} rows -> {}", m.stage, m.rows, out.display());
    } else {
        eprintln!("{}: {} rows ({}) -> {}", m.stage, m.rows, sources.join(", "), out.display());
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Split(args) => {
            let cfg = args.common.config()?;
            let dataset = cfg
                .paths
                .dataset
                .as_deref()
                .ok_or_else(|| Error::MissingInput("no dataset path configured (--dataset)".into()))?;
            let out = cfg.out_dir();
            let dev_out = args.dev_out.clone().unwrap_or_else(|| out.join("dev.jsonl"));
            let train_out = args.train_out.clone().unwrap_or_else(|| out.join("train.jsonl"));
            let s = stages::split(&cfg, dataset, args.fraction, args.dev_size, &dev_out, &train_out)?;
            println!("input {}  dev {}  remaining {}  train {}", s.input, s.dev, s.rest, s.train);
            Ok(())
        }
        Command::Ingest(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            summary(&stages::ingest(&cfg, &a.kb_summary)?, &a.kb_summary);
            Ok(())
        }
        Command::Enumerate(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            summary(&stages::enumerate(&cfg, dataset_for(&c, &cfg)?, &a.candidates)?, &a.candidates);
            Ok(())
        }
        Command::Rank(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let m = stages::rank(&cfg, dataset_for(&c, &cfg)?, &a.candidates, &a.ranked)?;
            summary(&m, &a.ranked);
            Ok(())
        }
        Command::Choices(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let m = stages::choices(&cfg, dataset_for(&c, &cfg)?, &a.ranked, &a.choices)?;
            summary(&m, &a.choices);
            Ok(())
        }
        Command::Prompts(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let m = stages::prompts(&cfg, &a.choices, Some(&a.dev_choices), &a.prompts)?;
            summary(&m, &a.prompts);
            Ok(())
        }
        Command::Infer(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let m = stages::infer(&cfg, &a.prompts, Some(&a.choices), cfg.paths.dataset.as_deref(), &a.completions)?;
            summary(&m, &a.completions);
            Ok(())
        }
        Command::Decide(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let m = stages::decide(
                &cfg,
                dataset_for(&c, &cfg)?,
                &a.ranked,
                &a.choices,
                Some(&a.completions),
                &a.decisions,
            )?;
            summary(&m, &a.decisions);
            Ok(())
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let (m, _) = stages::eval(&cfg, dataset_for(&c, &cfg)?, &a.decisions, &a.eval_rows, &a.report_json)?;
            summary(&m, &a.eval_rows);
            Ok(())
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let (_, text) = stages::report(&cfg, &a.report_json, &a.report_txt)?;
            print!("{text}");
            Ok(())
        }
        Command::Pipeline(c) => {
            let cfg = c.config()?;
            let a = c.artifacts(&cfg);
            let (manifests, text) = stages::pipeline(&cfg, &a)?;
            for m in &manifests {
                eprintln!("{}: {} rows", m.stage, m.rows);
            }
            print!("{text}");
            Ok(())
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
