//! Annotated documents, raw prediction input, and their on-disk format.
//!
//! A corpus file is a `tgraph-corpus` header line followed by one document
//! per line:
//!
//! ```text
//! {"format":"tgraph-corpus","version":1}
//! {"doc_id":"d1","sentences":[["He","left","."],["She","arrived","."]],
//!  "events":[{"id":"e1","sentence":0,"start":1,"end":2},{"id":"e2","sentence":1,"start":1,"end":2}],
//!  "tlinks":[{"src":"e1","dst":"e2","label":"BEFORE"}]}
//! ```
//!
//! Spans are half-open token intervals within their sentence. Raw input uses
//! the same format with `events` and `tlinks` omitted.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, CORPUS_FORMAT};
use crate::schema::Relation;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticLexicon};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}:{line}: document `{doc_id}` is invalid: {}", join_violations(.violations))]
    Invalid {
        path: String,
        line: usize,
        doc_id: String,
        violations: Vec<Violation>,
    },
    #[error("{path}:{line}: duplicate document id `{doc_id}`")]
    DuplicateDocument {
        path: String,
        line: usize,
        doc_id: String,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub id: String,
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

impl Event {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tlink {
    pub src: String,
    pub dst: String,
    pub label: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub tlinks: Vec<Tlink>,
}

/// Pre-tokenized sentences with no annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInput {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
}

impl From<&Document> for RawInput {
    fn from(doc: &Document) -> Self {
        RawInput {
            doc_id: doc.doc_id.clone(),
            sentences: doc.sentences.clone(),
        }
    }
}

impl RawInput {
    pub fn violations(&self) -> Vec<Violation> {
        sentence_violations(&self.sentences)
    }
}

/// One broken document invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoSentences,
    EmptySentence { sentence: usize },
    EmptyToken { sentence: usize, token: usize },
    DuplicateEvent { event: String },
    SentenceOutOfRange { event: String, sentence: usize },
    EmptySpan { event: String, start: usize, end: usize },
    SpanOutOfRange { event: String, end: usize, len: usize },
    DanglingEvent { event: String },
    SelfLink { event: String },
    NoneLabel { src: String, dst: String },
    DuplicatePair { src: String, dst: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSentences => write!(f, "document has no sentences"),
            Violation::EmptySentence { sentence } => write!(f, "sentence {sentence} is empty"),
            Violation::EmptyToken { sentence, token } => {
                write!(f, "token {token} of sentence {sentence} is empty")
            }
            Violation::DuplicateEvent { event } => write!(f, "event id `{event}` declared twice"),
            Violation::SentenceOutOfRange { event, sentence } => {
                write!(f, "event `{event}` refers to missing sentence {sentence}")
            }
            Violation::EmptySpan { event, start, end } => {
                write!(f, "event `{event}` has empty span ({start},{end})")
            }
            Violation::SpanOutOfRange { event, end, len } => write!(
                f,
                "event `{event}` span ends at {end} but its sentence has {len} tokens"
            ),
            Violation::DanglingEvent { event } => {
                write!(f, "tlink references undeclared event `{event}`")
            }
            Violation::SelfLink { event } => write!(f, "tlink links `{event}` to itself"),
            Violation::NoneLabel { src, dst } => write!(f, "tlink {src}->{dst} is labelled NONE"),
            Violation::DuplicatePair { src, dst } => {
                write!(f, "ordered pair {src}->{dst} annotated more than once")
            }
        }
    }
}

fn sentence_violations(sentences: &[Vec<String>]) -> Vec<Violation> {
    let mut out = Vec::new();
    if sentences.is_empty() {
        out.push(Violation::NoSentences);
    }
    for (s, sent) in sentences.iter().enumerate() {
        if sent.is_empty() {
            out.push(Violation::EmptySentence { sentence: s });
        }
        for (t, tok) in sent.iter().enumerate() {
            if tok.is_empty() {
                out.push(Violation::EmptyToken {
                    sentence: s,
                    token: t,
                });
            }
        }
    }
    out
}

/// Checks every document invariant. An empty result means the document is valid.
pub fn validate(doc: &Document) -> Vec<Violation> {
    let mut out = sentence_violations(&doc.sentences);

    let mut declared = BTreeSet::new();
    for ev in &doc.events {
        if !declared.insert(ev.id.as_str()) {
            out.push(Violation::DuplicateEvent {
                event: ev.id.clone(),
            });
        }
        let Some(sent) = doc.sentences.get(ev.sentence) else {
            out.push(Violation::SentenceOutOfRange {
                event: ev.id.clone(),
                sentence: ev.sentence,
            });
            continue;
        };
        if ev.is_empty() {
            out.push(Violation::EmptySpan {
                event: ev.id.clone(),
                start: ev.start,
                end: ev.end,
            });
        } else if ev.end > sent.len() {
            out.push(Violation::SpanOutOfRange {
                event: ev.id.clone(),
                end: ev.end,
                len: sent.len(),
            });
        }
    }

    let mut pairs = BTreeSet::new();
    for link in &doc.tlinks {
        for id in [&link.src, &link.dst] {
            if !declared.contains(id.as_str()) {
                out.push(Violation::DanglingEvent { event: id.clone() });
            }
        }
        if link.src == link.dst {
            out.push(Violation::SelfLink {
                event: link.src.clone(),
            });
        }
        if link.label == Relation::None {
            out.push(Violation::NoneLabel {
                src: link.src.clone(),
                dst: link.dst.clone(),
            });
        }
        if !pairs.insert((link.src.as_str(), link.dst.as_str())) {
            out.push(Violation::DuplicatePair {
                src: link.src.clone(),
                dst: link.dst.clone(),
            });
        }
    }
    out
}

impl Document {
    pub fn event(&self, id: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.id == id)
    }

    pub fn event_index(&self) -> BTreeMap<&str, &Event> {
        self.events.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }
}

/// Loads and validates an annotated corpus.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let records: Vec<(usize, Document)> = format::read_records(path, CORPUS_FORMAT)?;
    let mut seen = BTreeSet::new();
    let mut docs = Vec::with_capacity(records.len());
    for (line, doc) in records {
        let violations = validate(&doc);
        if !violations.is_empty() {
            return Err(CorpusError::Invalid {
                path: path.display().to_string(),
                line,
                doc_id: doc.doc_id,
                violations,
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocument {
                path: path.display().to_string(),
                line,
                doc_id: doc.doc_id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads raw input. Annotations, if present, are ignored.
pub fn load_raw(path: &Path) -> Result<Vec<RawInput>, CorpusError> {
    let records: Vec<(usize, Document)> = format::read_records(path, CORPUS_FORMAT)?;
    records
        .into_iter()
        .map(|(line, doc)| {
            let raw = RawInput::from(&doc);
            let violations = raw.violations();
            if violations.is_empty() {
                Ok(raw)
            } else {
                Err(CorpusError::Invalid {
                    path: path.display().to_string(),
                    line,
                    doc_id: raw.doc_id,
                    violations,
                })
            }
        })
        .collect()
}

pub fn store_corpus(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    format::write_records(path, CORPUS_FORMAT, docs)?;
    Ok(())
}
