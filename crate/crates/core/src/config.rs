//! Run configuration: defaults, TOML loading and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::MAX_OPTIONS;
use crate::decision::{FuseSide, Method};
use crate::gateway::{BackendKind, CompletionParams, RetryPolicy, DEFAULT_ENDPOINT, DEFAULT_MODEL};
use crate::io;
use crate::par::Execution;
use crate::prompt::Mode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    #[default]
    Lexical,
    Imported,
    NoisyOracle,
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lexical" => Ok(Self::Lexical),
            "imported" => Ok(Self::Imported),
            "noisy-oracle" => Ok(Self::NoisyOracle),
            other => Err(format!("unknown scorer `{other}`")),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Lexical => "lexical",
            ScorerKind::Imported => "imported",
            ScorerKind::NoisyOracle => "noisy-oracle",
        })
    }
}

/// Input locations. Left out of the config hash; manifests record the
/// content hashes of inputs instead.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k_options: usize,
    pub max_answers: usize,
    pub n_exemplars: usize,
    pub mode: Mode,
    pub method: Method,
    pub fusion_p: f64,
    pub fuse_side: FuseSide,
    pub lambda: Option<f64>,
    pub scorer: ScorerKind,
    pub epsilon: f64,
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_tokens: u32,
    pub endpoint_url: String,
    pub rate_limit_per_min: u32,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub explanation_attempts: usize,
    pub both_empty_f1: f64,
    pub seed: u64,
    pub execution: Execution,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_options: 4,
            max_answers: 4,
            n_exemplars: 2,
            mode: Mode::Icl,
            method: Method::Fuse,
            fusion_p: 0.05,
            fuse_side: FuseSide::LlmOnLow,
            lambda: None,
            scorer: ScorerKind::Lexical,
            epsilon: 0.4,
            backend: BackendKind::Remote,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            stop: vec!["]".to_string()],
            max_tokens: 256,
            endpoint_url: DEFAULT_ENDPOINT.to_string(),
            rate_limit_per_min: 60,
            max_retries: 3,
            timeout_secs: 60,
            explanation_attempts: 3,
            both_empty_f1: 1.0,
            seed: 0,
            execution: Execution::Parallel,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=MAX_OPTIONS).contains(&self.k_options) {
            return bad(format!("k_options must be in 1..={MAX_OPTIONS}, got {}", self.k_options));
        }
        if self.max_answers == 0 {
            return bad("max_answers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.fusion_p) {
            return bad(format!("fusion_p must be in [0, 1], got {}", self.fusion_p));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.both_empty_f1) {
            return bad(format!("both_empty_f1 must be in [0, 1], got {}", self.both_empty_f1));
        }
        if self.explanation_attempts == 0 {
            return bad("explanation_attempts must be at least 1".into());
        }
        if self.lambda.is_some_and(f64::is_nan) {
            return bad("lambda must not be NaN".into());
        }
        self.completion_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn completion_params(&self) -> CompletionParams {
        CompletionParams {
            model: self.model.clone(),
            temperature: self.temperature,
            stop: self.stop.clone(),
            max_tokens: self.max_tokens,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.out_dir().join("cache"))
    }

    /// Hash of every setting except paths and the execution strategy, which
    /// do not change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.execution = Execution::default();
        io::sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.k_options, c.max_answers, c.n_exemplars), (4, 4, 2));
        assert_eq!(c.fusion_p, 0.05);
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.stop, ["]"]);
        assert_eq!(c.mode, Mode::Icl);
        assert_eq!(c.fuse_side, FuseSide::LlmOnLow);
        c.validate().unwrap();
    }

    #[test]
    fn toml_overrides_and_unknown_keys() {
        let c = RunConfig::from_toml(
            "k_options = 3\nmode = \"cot\"\nbackend = \"oracle\"\nfuse_side = \"ranker-on-high\"\n[paths]\nkb = \"data/triples.tsv\"\n",
            Path::new("t.toml"),
        )
        .unwrap();
        assert_eq!(c.k_options, 3);
        assert_eq!(c.mode, Mode::Cot);
        assert_eq!(c.backend, BackendKind::Oracle);
        assert_eq!(c.fuse_side, FuseSide::RankerOnHigh);
        assert_eq!(c.paths.kb.as_deref(), Some(Path::new("data/triples.tsv")));
        assert_eq!(c.max_answers, 4);
        assert!(RunConfig::from_toml("k = 3", Path::new("t.toml")).is_err());
    }

    #[test]
    fn validation() {
        for c in [
            RunConfig { k_options: 0, ..Default::default() },
            RunConfig { k_options: 27, ..Default::default() },
            RunConfig { fusion_p: 1.5, ..Default::default() },
            RunConfig { temperature: -0.1, ..Default::default() },
            RunConfig { max_tokens: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = Some("elsewhere".into());
        b.execution = Execution::Sequential;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
