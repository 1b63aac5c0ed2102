//! Multiple-choice question answering over a knowledge base: enumerate
//! two-hop logical forms, rank them, turn the top candidates into lettered
//! options, ask a language model to pick one, and fuse its choice with the
//! ranker's by confidence.

pub mod choice;
pub mod dataset;
pub mod decision;
pub mod eval;
pub mod gateway;
pub mod io;
pub mod kb;
pub mod logical_form;
pub mod par;
pub mod prompt;
pub mod ranking;
pub mod config;
pub mod stages;
pub mod cli;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Kb(#[from] kb::KbError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Rank(#[from] ranking::RankError),
    #[error(transparent)]
    Choice(#[from] choice::ChoiceError),
    #[error(transparent)]
    Prompt(#[from] prompt::PromptError),
    #[error(transparent)]
    Gateway(#[from] gateway::GatewayError),
    #[error(transparent)]
    Decide(#[from] decision::DecideError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}
