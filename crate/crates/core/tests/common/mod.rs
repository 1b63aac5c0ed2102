#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kbqa_core::config::RunConfig;
use kbqa_core::gateway::BackendKind;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn mini(file: &str) -> PathBuf {
    repo_root().join("data/mini").join(file)
}

pub fn golden(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(file)
}

/// Mini-dataset config writing under `out`.
pub fn mini_config(out: &Path, backend: BackendKind) -> RunConfig {
    let mut cfg = RunConfig {
        backend,
        seed: 7,
        ..RunConfig::default()
    };
    cfg.paths.kb = Some(mini("triples.tsv"));
    cfg.paths.names = Some(mini("names.tsv"));
    cfg.paths.dataset = Some(mini("test.jsonl"));
    cfg.paths.dev = Some(mini("dev.jsonl"));
    cfg.paths.script = Some(mini("scripted.json"));
    cfg.paths.out_dir = Some(out.to_path_buf());
    cfg
}

/// Path flags for the mini dataset.
pub fn mini_args(out: &Path) -> Vec<String> {
    let mut v = Vec::new();
    for (flag, file) in [
        ("--kb", "triples.tsv"),
        ("--names", "names.tsv"),
        ("--dataset", "test.jsonl"),
        ("--dev", "dev.jsonl"),
        ("--script", "scripted.json"),
    ] {
        v.push(flag.to_string());
        v.push(mini(file).display().to_string());
    }
    v.push("--out-dir".into());
    v.push(out.display().to_string());
    v.push("--seed".into());
    v.push("7".into());
    v
}

pub fn kbqa<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbqa"))
        .args(args.iter().map(AsRef::as_ref))
        .env_remove("KBQA_API_KEY")
        .output()
        .expect("kbqa binary runs")
}

pub fn kbqa_ok<S: AsRef<str>>(args: &[S]) -> Output {
    let out = kbqa(args);
    assert!(
        out.status.success(),
        "kbqa {:?} failed:\n{}",
        args.iter().map(AsRef::as_ref).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn args(parts: &[&str], rest: &[String]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).chain(rest.iter().cloned()).collect()
}
