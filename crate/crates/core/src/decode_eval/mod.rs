//! From scores to labeled graphs, and from graphs to micro-averaged scores.

mod report;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};
use thiserror::Error;

use crate::corpus::Document;
use crate::model::ScoreSet;
use crate::schema::{DatasetProfile, LabelId, Relation, SchemaError};
use crate::tensor::Scalar;

pub use report::{EvalReport, LabelScores, Scores, EVAL_TSV_MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("pair ({0}, {0}) is not a pair")]
    SelfPair(usize),
    #[error("pair ({i}, {j}) outside a window of {n} tokens")]
    OutOfRange { i: usize, j: usize, n: usize },
    #[error("scores have no ARC matrix")]
    NoArcScores,
    #[error("event `{event}` at token {position} lies outside a window of {n} tokens")]
    EventOutsideWindow {
        event: String,
        position: usize,
        n: usize,
    },
    #[error("label id {label} outside profile `{profile}`")]
    UnknownLabel { label: u8, profile: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Arc indicator: strictly positive logit.
pub fn arc_pred<F: Scalar>(scores: &ScoreSet<F>, i: usize, j: usize) -> Result<bool, DecodeError> {
    check_pair(scores.n, i, j)?;
    scores
        .arc(i, j)
        .map(|s| s > F::zero())
        .ok_or(DecodeError::NoArcScores)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Highest-scoring profile label for the ordered pair `(i, j)`.
pub fn label_pred<F: Scalar>(
    scores: &ScoreSet<F>,
    i: usize,
    j: usize,
) -> Result<LabelId, DecodeError> {
    check_pair(scores.n, i, j)?;
    Ok(scores.label_of_slot(argmax(scores.rel(i, j))))
}

fn check_pair(n: usize, i: usize, j: usize) -> Result<(), DecodeError> {
    if i == j {
        return Err(DecodeError::SelfPair(i));
    }
    if i >= n || j >= n {
        return Err(DecodeError::OutOfRange { i, j, n });
    }
    Ok(())
}

/// Labeled token graph of one window. Only `i < j` edges are stored; the
/// lower triangle is their inverse.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemporalGraph {
    pub n: usize,
    pub edges: BTreeMap<(usize, usize), LabelId>,
}

impl TemporalGraph {
    pub fn new(n: usize) -> Self {
        TemporalGraph {
            n,
            edges: BTreeMap::new(),
        }
    }

    /// Label of the ordered pair, NONE when there is no edge.
    pub fn label(&self, i: usize, j: usize, profile: &DatasetProfile) -> Result<LabelId, DecodeError> {
        check_pair(self.n, i, j)?;
        if i < j {
            Ok(self.edges.get(&(i, j)).copied().unwrap_or(LabelId::NONE))
        } else {
            match self.edges.get(&(j, i)) {
                Some(&l) => Ok(profile.inverse(l)?),
                None => Ok(LabelId::NONE),
            }
        }
    }

    /// Checks the storage invariants: upper-triangular keys inside the
    /// window and labels that are real relations of `profile`.
    pub fn validate(&self, profile: &DatasetProfile) -> Result<(), DecodeError> {
        for (&(i, j), &l) in &self.edges {
            if i >= j || j >= self.n {
                return Err(DecodeError::OutOfRange { i, j, n: self.n });
            }
            if l.is_none() || l.index() >= profile.len() {
                return Err(DecodeError::UnknownLabel {
                    label: l.0,
                    profile: profile.name().to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Decodes a whole window at once.
///
/// A pair `i < j` gets an edge when either direction's arc logit is
/// positive, labeled by the argmax of its upper-triangle REL scores. Without
/// arc scores every pair whose argmax is not NONE gets an edge.
pub fn decode<F: Scalar>(scores: &ScoreSet<F>) -> TemporalGraph {
    let n = scores.n;
    let l = scores.labels;
    let rel = ArrayView3::from_shape((n, n, l), &scores.s_rel).expect("rel scores are n x n x L");
    let mut best: Array2<u8> = Array2::zeros((n, n));
    Zip::from(&mut best)
        .and(rel.lanes(Axis(2)))
        .for_each(|b, lane| *b = scores.label_of_slot(argmax(lane.as_slice().expect("contiguous"))).0);
    let keep: Array2<bool> = match &scores.s_arc {
        Some(s) => {
            let s = ArrayView2::from_shape((n, n), s).expect("arc scores are n x n");
            let pos = s.mapv(|x| x > F::zero());
            &pos | &pos.t()
        }
        None => best.mapv(|b| b != 0),
    };
    let edges = keep
        .indexed_iter()
        .filter(|&((i, j), &k)| i < j && k)
        .filter_map(|((i, j), _)| {
            let label = LabelId(best[(i, j)]);
            (!label.is_none()).then_some(((i, j), label))
        })
        .collect();
    TemporalGraph { n, edges }
}

/// Event-pair labels read off the first tokens of each event. Every pair of
/// events in the window is listed once, ordered by first-token position,
/// with NONE where the graph has no edge.
pub fn event_level(
    graph: &TemporalGraph,
    events: &BTreeMap<String, usize>,
    profile: &DatasetProfile,
) -> Result<Vec<(String, String, LabelId)>, DecodeError> {
    let mut ordered: Vec<(usize, &str)> = Vec::with_capacity(events.len());
    for (id, &pos) in events {
        if pos >= graph.n {
            return Err(DecodeError::EventOutsideWindow {
                event: id.clone(),
                position: pos,
                n: graph.n,
            });
        }
        ordered.push((pos, id));
    }
    ordered.sort();
    let mut out = Vec::new();
    for (a, &(pa, ea)) in ordered.iter().enumerate() {
        for &(pb, eb) in &ordered[a + 1..] {
            let label = if pa == pb {
                LabelId::NONE
            } else {
                graph.label(pa, pb, profile)?
            };
            out.push((ea.to_string(), eb.to_string(), label));
        }
    }
    Ok(out)
}

/// `(doc_id, first event, second event)` with the events in id order.
pub type PairKey = (String, String, String);

/// Event-pair labels keyed in canonical direction: the pair is stored with
/// the smaller event id first and the label flipped accordingly.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairLabels {
    map: BTreeMap<PairKey, LabelId>,
}

impl PairLabels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair unless it is already present; the first entry wins.
    /// Returns whether it was added.
    pub fn insert(
        &mut self,
        doc_id: &str,
        e1: &str,
        e2: &str,
        label: LabelId,
        profile: &DatasetProfile,
    ) -> Result<bool, DecodeError> {
        if label.index() >= profile.len() {
            return Err(DecodeError::UnknownLabel {
                label: label.0,
                profile: profile.name().to_string(),
            });
        }
        let (key, label) = if e1 <= e2 {
            ((doc_id.to_string(), e1.to_string(), e2.to_string()), label)
        } else {
            (
                (doc_id.to_string(), e2.to_string(), e1.to_string()),
                profile.inverse(label)?,
            )
        };
        if self.map.contains_key(&key) {
            return Ok(false);
        }
        self.map.insert(key, label);
        Ok(true)
    }

    pub fn get(&self, key: &PairKey) -> LabelId {
        self.map.get(key).copied().unwrap_or(LabelId::NONE)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PairKey, LabelId)> {
        self.map.iter().map(|(k, &l)| (k, l))
    }

    /// Pairs carrying a relation other than NONE.
    pub fn relations(&self) -> impl Iterator<Item = (&PairKey, LabelId)> {
        self.iter().filter(|(_, l)| !l.is_none())
    }
}

/// Gold event-pair labels of a corpus.
pub fn gold_pairs(docs: &[Document], profile: &DatasetProfile) -> Result<PairLabels, DecodeError> {
    let mut out = PairLabels::new();
    for doc in docs {
        for t in &doc.tlinks {
            let id = profile.id_of(t.label)?;
            out.insert(&doc.doc_id, &t.src, &t.dst, id, profile)?;
        }
    }
    Ok(out)
}

/// Event-level predictions from decoded windows given in corpus order. A
/// pair seen by several windows takes the label from the first one.
pub fn predicted_pairs<'a, I>(windows: I, profile: &DatasetProfile) -> Result<PairLabels, DecodeError>
where
    I: IntoIterator<Item = (&'a str, &'a TemporalGraph, &'a BTreeMap<String, usize>)>,
{
    let mut out = PairLabels::new();
    for (doc_id, graph, events) in windows {
        for (e1, e2, label) in event_level(graph, events, profile)? {
            out.insert(doc_id, &e1, &e2, label, profile)?;
        }
    }
    Ok(out)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro and per-label precision, recall and F1 with NONE left out of every
/// count.
pub fn evaluate(
    pred: &PairLabels,
    gold: &PairLabels,
    profile: &DatasetProfile,
) -> Result<EvalReport, DecodeError> {
    let k = profile.len();
    let mut predicted = vec![0usize; k];
    let mut in_gold = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for (_, l) in pred.iter().chain(gold.iter()) {
        if l.index() >= k {
            return Err(DecodeError::UnknownLabel {
                label: l.0,
                profile: profile.name().to_string(),
            });
        }
    }
    for (key, p) in pred.relations() {
        predicted[p.index()] += 1;
        if gold.get(key) == p {
            correct[p.index()] += 1;
        }
    }
    for (_, g) in gold.relations() {
        in_gold[g.index()] += 1;
    }
    let per_label = profile
        .relations()
        .map(|(id, relation)| {
            let i = id.index();
            let precision = ratio(correct[i], predicted[i]);
            let recall = ratio(correct[i], in_gold[i]);
            LabelScores {
                relation,
                scores: Scores {
                    precision,
                    recall,
                    f1: f1(precision, recall),
                },
                support: in_gold[i],
                predicted: predicted[i],
                correct: correct[i],
            }
        })
        .collect::<Vec<_>>();
    let (c, p, g) = (
        correct.iter().sum::<usize>(),
        predicted.iter().sum::<usize>(),
        in_gold.iter().sum::<usize>(),
    );
    let (precision, recall) = (ratio(c, p), ratio(c, g));
    Ok(EvalReport {
        profile: profile.name().to_string(),
        per_label,
        micro: Scores {
            precision,
            recall,
            f1: f1(precision, recall),
        },
        gold: g,
        predicted: p,
        correct: c,
    })
}

/// Relation name of a label id, for output.
pub fn label_name(profile: &DatasetProfile, id: LabelId) -> Result<&'static str, DecodeError> {
    Ok(profile.relation(id).map(Relation::name)?)
}

#[cfg(test)]
mod tests;
