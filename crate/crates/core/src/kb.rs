//! In-memory triple store with forward/backward adjacency and surface names.
//!
//! Files are UTF-8 TSV without a header:
//! `triples.tsv` holds `subject<TAB>predicate<TAB>object` and `names.tsv`
//! holds `entity_id<TAB>surface name`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: line {line}: expected {expected} tab-separated fields, found {found}")]
    Malformed {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}: empty {field}")]
    EmptyField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// Entity or literal -> predicate -> neighbours.
type Adjacency = HashMap<String, BTreeMap<String, BTreeSet<String>>>;

/// Immutable after construction; every read method takes `&self`.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triples: BTreeSet<Triple>,
    // subject -> predicate -> objects
    forward: Adjacency,
    // object -> predicate -> subjects
    backward: Adjacency,
    names: HashMap<String, String>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        // indexes are derived from the triple set
        self.triples == other.triples && self.names == other.names
    }
}

/// Literal objects (numbers, dates, quoted strings) may end a path but are
/// never expanded as intermediate hop nodes.
///
/// A value is a literal when it starts with `"`, parses as a number, or looks
/// like an ISO date (`YYYY`, `YYYY-MM`, `YYYY-MM-DD`, optionally with a time).
fn unquote(value: &str) -> &str {
    value
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .filter(|v| !v.is_empty())
        .unwrap_or(value)
}

pub fn is_literal(value: &str) -> bool {
    static DATE: OnceLock<Regex> = OnceLock::new();
    let date = DATE.get_or_init(|| Regex::new(r"^-?\d{4}(-\d{2}(-\d{2})?)?([T ].*)?$").unwrap());
    value.starts_with('"') || value.parse::<f64>().is_ok() || date.is_match(value)
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a KB from triples, dropping duplicates.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut kb = Self::new();
        for t in triples {
            kb.insert(t);
        }
        kb
    }

    fn insert(&mut self, t: Triple) -> bool {
        if self.triples.contains(&t) {
            return false;
        }
        self.forward
            .entry(t.subject.clone())
            .or_default()
            .entry(t.predicate.clone())
            .or_default()
            .insert(t.object.clone());
        self.backward
            .entry(t.object.clone())
            .or_default()
            .entry(t.predicate.clone())
            .or_default()
            .insert(t.subject.clone());
        self.triples.insert(t)
    }

    /// Reads `subject<TAB>predicate<TAB>object` lines. Blank lines are skipped.
    pub fn ingest_triples(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = read(path)?;
        Self::parse_triples(&text, &path.display().to_string())
    }

    pub fn parse_triples(text: &str, origin: &str) -> Result<Self, KbError> {
        let mut kb = Self::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KbError::Malformed {
                    path: origin.to_string(),
                    line: idx + 1,
                    expected: 3,
                    found: fields.len(),
                });
            }
            for (field, name) in [(fields[0], "subject"), (fields[1], "predicate")] {
                if field.is_empty() {
                    return Err(KbError::EmptyField {
                        path: origin.to_string(),
                        line: idx + 1,
                        field: name,
                    });
                }
            }
            kb.insert(Triple::new(fields[0], fields[1], fields[2]));
        }
        Ok(kb)
    }

    /// Adds `entity_id<TAB>surface name` lines; later lines for the same id win.
    pub fn ingest_names(mut self, path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = read(path)?;
        self.parse_names(&text, &path.display().to_string())?;
        Ok(self)
    }

    pub fn parse_names(&mut self, text: &str, origin: &str) -> Result<(), KbError> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(KbError::Malformed {
                    path: origin.to_string(),
                    line: idx + 1,
                    expected: 2,
                    found: fields.len(),
                });
            }
            if fields[0].is_empty() {
                return Err(KbError::EmptyField {
                    path: origin.to_string(),
                    line: idx + 1,
                    field: "entity id",
                });
            }
            self.names
                .insert(fields[0].to_string(), fields[1].to_string());
        }
        Ok(())
    }

    pub fn set_name(&mut self, id: impl Into<String>, name: impl Into<String>) {
        self.names.insert(id.into(), name.into());
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    /// `(predicate, object)` pairs for triples with `entity` as subject.
    pub fn forward(&self, entity: &str) -> impl Iterator<Item = (&str, &str)> {
        flatten(self.forward.get(entity))
    }

    /// `(predicate, subject)` pairs for triples with `entity` as object.
    pub fn backward(&self, entity: &str) -> impl Iterator<Item = (&str, &str)> {
        flatten(self.backward.get(entity))
    }

    pub(crate) fn forward_by_relation(&self, entity: &str) -> Option<&BTreeMap<String, BTreeSet<String>>> {
        self.forward.get(entity)
    }

    pub(crate) fn backward_by_relation(&self, entity: &str) -> Option<&BTreeMap<String, BTreeSet<String>>> {
        self.backward.get(entity)
    }

    pub fn name(&self, id: &str) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn name_count(&self) -> usize {
        self.names.len()
    }

    /// Maps ids to surface names, keeping order. Unnamed ids pass through
    /// unchanged; quoted string literals lose their quotes.
    pub fn surface_names<S: AsRef<str>>(&self, ids: &[S]) -> Vec<String> {
        ids.iter()
            .map(|id| {
                let id = id.as_ref();
                match self.name(id) {
                    Some(n) => n.to_string(),
                    None => unquote(id).to_string(),
                }
            })
            .collect()
    }

    pub fn relations(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.predicate.as_str()).collect()
    }

    /// Every subject and every non-literal object.
    pub fn entities(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for t in &self.triples {
            out.insert(t.subject.as_str());
            if !is_literal(&t.object) {
                out.insert(t.object.as_str());
            }
        }
        out
    }
}

fn flatten(
    adj: Option<&BTreeMap<String, BTreeSet<String>>>,
) -> impl Iterator<Item = (&str, &str)> {
    adj.into_iter().flat_map(|m| {
        m.iter()
            .flat_map(|(p, set)| set.iter().map(move |n| (p.as_str(), n.as_str())))
    })
}

fn read(path: &Path) -> Result<String, KbError> {
    fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })
}
