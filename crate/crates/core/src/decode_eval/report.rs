use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::schema::Relation;

pub const EVAL_TSV_MAGIC: &str = "# tgraph-eval v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub relation: Relation,
    #[serde(flatten)]
    pub scores: Scores,
    /// Gold pairs with this label.
    pub support: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// Per-label and micro-averaged scores, NONE excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub profile: String,
    /// One row per relation, in profile label order.
    pub per_label: Vec<LabelScores>,
    pub micro: Scores,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl EvalReport {
    /// Aligned plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}",
            "label", "precision", "recall", "f1", "support", "pred", "correct"
        );
        let row = |out: &mut String, name: &str, s: &Scores, sup: usize, p: usize, c: usize| {
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}",
                name, s.precision, s.recall, s.f1, sup, p, c
            );
        };
        for l in &self.per_label {
            row(&mut out, l.relation.name(), &l.scores, l.support, l.predicted, l.correct);
        }
        row(&mut out, "micro", &self.micro, self.gold, self.predicted, self.correct);
        out
    }

    /// Tab-separated form: a version line, a column header, one row per
    /// label, then a `micro` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{EVAL_TSV_MAGIC}");
        let _ = writeln!(out, "label\tprecision\trecall\tf1\tsupport\tpredicted\tcorrect");
        for l in &self.per_label {
            let s = &l.scores;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.relation.name(),
                s.precision,
                s.recall,
                s.f1,
                l.support,
                l.predicted,
                l.correct
            );
        }
        let m = &self.micro;
        let _ = writeln!(
            out,
            "micro\t{}\t{}\t{}\t{}\t{}\t{}",
            m.precision, m.recall, m.f1, self.gold, self.predicted, self.correct
        );
        out
    }
}
