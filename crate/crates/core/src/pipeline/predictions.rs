use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::Document;
use crate::decode_eval::{PairLabels, TemporalGraph};
use crate::format::{self, PREDICTIONS_FORMAT};
use crate::schema::{DatasetProfile, Relation};

/// `[i, j, label]` with `i < j` token positions inside the window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEdge(pub usize, pub usize, pub Relation);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEdge {
    pub src: String,
    pub dst: String,
    pub label: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowPrediction {
    pub index: usize,
    /// Document sentence indices covered, in order.
    pub sentences: Vec<usize>,
    pub tokens: usize,
    pub edges: Vec<TokenEdge>,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentPrediction {
    pub doc_id: String,
    pub windows: Vec<WindowPrediction>,
    /// Windows left out for exceeding the length limit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_windows: Vec<usize>,
    /// Event-pair relations (NONE omitted), present when predicting with
    /// event spans. Pairs are in event-id order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_pairs: Option<Vec<EventEdge>>,
}

impl WindowPrediction {
    pub fn from_graph(
        index: usize,
        sentences: Vec<usize>,
        graph: &TemporalGraph,
        profile: &DatasetProfile,
    ) -> Result<Self, PipelineError> {
        let edges = graph
            .edges
            .iter()
            .map(|(&(i, j), &l)| Ok(TokenEdge(i, j, profile.relation(l)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(WindowPrediction {
            index,
            sentences,
            tokens: graph.n,
            edges,
        })
    }

    pub fn to_graph(&self, profile: &DatasetProfile) -> Result<TemporalGraph, String> {
        let mut g = TemporalGraph::new(self.tokens);
        for TokenEdge(i, j, rel) in &self.edges {
            if !(i < j && *j < self.tokens) {
                return Err(format!(
                    "window {}: edge ({i},{j}) is not an upper-triangle pair of {} tokens",
                    self.index, self.tokens
                ));
            }
            let id = profile
                .id_of(*rel)
                .map_err(|e| format!("window {}: {e}", self.index))?;
            if id.is_none() {
                return Err(format!("window {}: NONE edge ({i},{j})", self.index));
            }
            g.edges.insert((*i, *j), id);
        }
        Ok(g)
    }
}

/// Event-pair edges with a relation, in key order.
pub fn event_edges(
    pairs: &PairLabels,
    profile: &DatasetProfile,
) -> Result<Vec<EventEdge>, PipelineError> {
    pairs
        .relations()
        .map(|((_, e1, e2), l)| {
            Ok(EventEdge {
                src: e1.clone(),
                dst: e2.clone(),
                label: profile.relation(l)?,
            })
        })
        .collect()
}

/// First-token window position of every event inside `sentences`, given
/// the document the window was cut from.
pub fn window_events(doc: &Document, sentences: &[usize]) -> Result<BTreeMap<String, usize>, String> {
    let mut offset = BTreeMap::new();
    let mut acc = 0;
    for &s in sentences {
        let sent = doc
            .sentences
            .get(s)
            .ok_or_else(|| format!("sentence {s} is outside the document"))?;
        offset.insert(s, acc);
        acc += sent.len();
    }
    Ok(doc
        .events
        .iter()
        .filter_map(|e| offset.get(&e.sentence).map(|o| (e.id.clone(), o + e.start)))
        .collect())
}

pub fn write_predictions(path: &Path, records: &[DocumentPrediction]) -> Result<(), PipelineError> {
    format::write_records(path, PREDICTIONS_FORMAT, records)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<DocumentPrediction>, PipelineError> {
    let records: Vec<(usize, DocumentPrediction)> = format::read_records(path, PREDICTIONS_FORMAT)?;
    Ok(records.into_iter().map(|(_, r)| r).collect())
}
