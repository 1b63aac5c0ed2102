//! S-expression logical forms over a [`KnowledgeBase`].
//!
//! Grammar (one or two joins above a single anchor):
//!
//! ```text
//! form  := "(" "JOIN" ["R"] relation inner ")"
//! inner := entity-id | form
//! ```
//!
//! `(JOIN r x)` denotes every subject `s` with `(s, r, o)` for `o` in `x`;
//! the `R` marker flips the traversal to objects of subjects in `x`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::kb::{is_literal, KnowledgeBase};

pub const MAX_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// From an object to the subjects pointing at it.
    Forward,
    /// From a subject to its objects (`R` marker).
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hop {
    pub relation: String,
    pub direction: Direction,
}

/// A chain of 1..=2 joins over one anchor entity. `hops[0]` is the innermost
/// join, applied to the anchor first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogicalForm {
    anchor: String,
    hops: Vec<Hop>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{kind} at byte {pos}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub pos: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("empty input")]
    Empty,
    #[error("unbalanced parentheses")]
    Unbalanced,
    #[error("unknown head symbol `{0}`")]
    UnknownHead(String),
    #[error("join depth exceeds {MAX_DEPTH}")]
    TooDeep,
    #[error("missing anchor")]
    MissingAnchor,
    #[error("multiple anchors")]
    MultipleAnchors,
    #[error("missing relation")]
    MissingRelation,
    #[error("expected a JOIN form, found a bare atom")]
    BareAtom,
    #[error("trailing input")]
    Trailing,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("join depth exceeds {MAX_DEPTH}")]
    TooDeep,
    #[error("empty relation id")]
    EmptyRelation,
    #[error("invalid atom `{0}`")]
    InvalidAtom(String),
}

fn valid_atom(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '(' || c == ')')
}

impl LogicalForm {
    /// Depth-1 form `(JOIN [R] relation anchor)`.
    pub fn join(
        relation: impl Into<String>,
        direction: Direction,
        anchor: impl Into<String>,
    ) -> Result<Self, BuildError> {
        let anchor = anchor.into();
        if !valid_atom(&anchor) {
            return Err(BuildError::InvalidAtom(anchor));
        }
        Self {
            anchor,
            hops: Vec::new(),
        }
        .then(relation, direction)
    }

    /// Wraps this form in one more join.
    pub fn then(mut self, relation: impl Into<String>, direction: Direction) -> Result<Self, BuildError> {
        let relation = relation.into();
        if relation.is_empty() {
            return Err(BuildError::EmptyRelation);
        }
        if !valid_atom(&relation) || relation == "R" || relation == "JOIN" {
            return Err(BuildError::InvalidAtom(relation));
        }
        if self.hops.len() >= MAX_DEPTH {
            return Err(BuildError::TooDeep);
        }
        self.hops.push(Hop {
            relation,
            direction,
        });
        Ok(self)
    }

    pub fn anchor(&self) -> &str {
        &self.anchor
    }

    /// Innermost first.
    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    pub fn depth(&self) -> usize {
        self.hops.len()
    }

    /// Canonical single-space s-expression.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for hop in self.hops.iter().rev() {
            out.push_str("(JOIN ");
            if hop.direction == Direction::Backward {
                out.push_str("R ");
            }
            out.push_str(&hop.relation);
            out.push(' ');
        }
        out.push_str(&self.anchor);
        for _ in &self.hops {
            out.push(')');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Parser::new(text).parse()
    }

    /// Denotation of the form in `kb`, as a sorted set.
    ///
    /// Values produced by an inner join feed the next join only if they are
    /// entities; literals never act as intermediate nodes.
    pub fn execute(&self, kb: &KnowledgeBase) -> BTreeSet<String> {
        let mut current: BTreeSet<String> = BTreeSet::from([self.anchor.clone()]);
        for (i, hop) in self.hops.iter().enumerate() {
            let mut next = BTreeSet::new();
            for node in &current {
                if i > 0 && is_literal(node) {
                    continue;
                }
                let adj = match hop.direction {
                    Direction::Forward => kb.backward_by_relation(node),
                    Direction::Backward => kb.forward_by_relation(node),
                };
                if let Some(set) = adj.and_then(|m| m.get(&hop.relation)) {
                    next.extend(set.iter().cloned());
                }
            }
            current = next;
        }
        current
    }
}

impl fmt::Display for LogicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl FromStr for LogicalForm {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for LogicalForm {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&LogicalForm::serialize(self))
    }
}

impl<'de> Deserialize<'de> for LogicalForm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LogicalForm::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

struct Parser<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    at: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut tokens = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c == '(' || c == ')' || c.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push((s, Token::Atom(&text[s..i])));
                }
                match c {
                    '(' => tokens.push((i, Token::Open)),
                    ')' => tokens.push((i, Token::Close)),
                    _ => {}
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push((s, Token::Atom(&text[s..])));
        }
        Self {
            tokens,
            at: 0,
            end: text.len(),
        }
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            kind,
            pos: self.pos(),
        }
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.at).map(|(_, t)| t)
    }

    fn parse(mut self) -> Result<LogicalForm, ParseError> {
        match self.peek() {
            None => return Err(self.err(ParseErrorKind::Empty)),
            Some(Token::Atom(_)) => return Err(self.err(ParseErrorKind::BareAtom)),
            Some(Token::Close) => return Err(self.err(ParseErrorKind::Unbalanced)),
            Some(Token::Open) => {}
        }
        // outermost hop first
        let mut outer_first: Vec<Hop> = Vec::new();
        let anchor = self.form(&mut outer_first)?;
        if self.at < self.tokens.len() {
            let kind = if self.peek() == Some(&Token::Close) {
                ParseErrorKind::Unbalanced
            } else {
                ParseErrorKind::Trailing
            };
            return Err(self.err(kind));
        }
        outer_first.reverse();
        Ok(LogicalForm {
            anchor,
            hops: outer_first,
        })
    }

    /// Parses one `(JOIN ...)`, pushing its hop, and returns the anchor.
    fn form(&mut self, hops: &mut Vec<Hop>) -> Result<String, ParseError> {
        let open = self.at;
        self.at += 1;
        match self.peek() {
            Some(Token::Atom("JOIN")) => self.at += 1,
            Some(Token::Atom(other)) => {
                return Err(self.err(ParseErrorKind::UnknownHead(other.to_string())))
            }
            Some(Token::Open) => return Err(self.err(ParseErrorKind::UnknownHead("(".into()))),
            Some(Token::Close) => return Err(self.err(ParseErrorKind::UnknownHead(")".into()))),
            None => return Err(self.err(ParseErrorKind::Unbalanced)),
        }
        if hops.len() >= MAX_DEPTH {
            return Err(ParseError {
                kind: ParseErrorKind::TooDeep,
                pos: self.tokens[open].0,
            });
        }
        let mut direction = Direction::Forward;
        if self.peek() == Some(&Token::Atom("R")) {
            direction = Direction::Backward;
            self.at += 1;
        }
        let relation = match self.peek() {
            Some(Token::Atom(r)) => r.to_string(),
            Some(Token::Close) | Some(Token::Open) => {
                return Err(self.err(ParseErrorKind::MissingRelation))
            }
            None => return Err(self.err(ParseErrorKind::Unbalanced)),
        };
        self.at += 1;
        hops.push(Hop {
            relation,
            direction,
        });
        let anchor = match self.peek() {
            Some(Token::Atom(a)) => {
                let a = a.to_string();
                self.at += 1;
                a
            }
            Some(Token::Open) => self.form(hops)?,
            Some(Token::Close) => return Err(self.err(ParseErrorKind::MissingAnchor)),
            None => return Err(self.err(ParseErrorKind::Unbalanced)),
        };
        match self.peek() {
            Some(Token::Close) => {
                self.at += 1;
                Ok(anchor)
            }
            Some(_) => Err(self.err(ParseErrorKind::MultipleAnchors)),
            None => Err(self.err(ParseErrorKind::Unbalanced)),
        }
    }
}

/// Candidates for one question, in canonical-string order without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub qid: String,
    pub candidates: Vec<LogicalForm>,
}

impl CandidatePool {
    pub fn new(qid: impl Into<String>, forms: impl IntoIterator<Item = LogicalForm>) -> Self {
        let mut keyed: Vec<(String, LogicalForm)> =
            forms.into_iter().map(|lf| (lf.serialize(), lf)).collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        keyed.dedup_by(|a, b| a.0 == b.0);
        Self {
            qid: qid.into(),
            candidates: keyed.into_iter().map(|(_, lf)| lf).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnumerateError {
    #[error("no topic entities")]
    NoTopicEntities,
}

/// Every depth-1 and depth-2 form anchored at a topic entity whose execution
/// is non-empty. Both directions are tried at each hop; only entities are
/// expanded as intermediate nodes.
pub fn enumerate_two_hop<S: AsRef<str>>(
    kb: &KnowledgeBase,
    qid: &str,
    topic_entities: &[S],
) -> Result<CandidatePool, EnumerateError> {
    if topic_entities.is_empty() {
        return Err(EnumerateError::NoTopicEntities);
    }
    let mut forms: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |lf: LogicalForm, out: &mut Vec<LogicalForm>| {
        if forms.insert(lf.serialize()) {
            out.push(lf);
        }
    };
    for topic in topic_entities {
        let topic = topic.as_ref();
        for (direction, adj) in [
            (Direction::Forward, kb.backward_by_relation(topic)),
            (Direction::Backward, kb.forward_by_relation(topic)),
        ] {
            let Some(adj) = adj else { continue };
            for (relation, reached) in adj {
                let Ok(first) = LogicalForm::join(relation.clone(), direction, topic) else {
                    continue;
                };
                // relations leaving the intermediate set, per direction
                let mut second: BTreeSet<(Direction, &str)> = BTreeSet::new();
                for mid in reached.iter().filter(|m| !is_literal(m)) {
                    if let Some(m) = kb.backward_by_relation(mid) {
                        second.extend(m.keys().map(|r| (Direction::Forward, r.as_str())));
                    }
                    if let Some(m) = kb.forward_by_relation(mid) {
                        second.extend(m.keys().map(|r| (Direction::Backward, r.as_str())));
                    }
                }
                for (dir2, rel2) in second {
                    if let Ok(lf) = first.clone().then(rel2, dir2) {
                        push(lf, &mut out);
                    }
                }
                push(first, &mut out);
            }
        }
    }
    Ok(CandidatePool::new(qid, out))
}
