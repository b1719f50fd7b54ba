//! Training losses, the optimizer and the epoch loop.

mod optimizer;
mod trainer;

use rand::Rng;
use thiserror::Error;

use crate::grid::Square;
use crate::model::{Model, ModelError};
use crate::preprocess::WindowInstance;
use crate::schema::LabelId;
use crate::tensor::{Gradients, Graph, Mode, Scalar, TensorError, Var};

pub use optimizer::{Optimizer, OptimizerConfig, StepInfo};
pub use trainer::{
    read_loss_curve, write_loss_curve, EpochSummary, LossRecord, TrainConfig, Trainer,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gold label id {label} outside {labels} REL slots")]
    Label { label: u8, labels: usize },
    #[error("{0}")]
    Shape(String),
    #[error("non-finite loss input")]
    NonFinite,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("training needs at least one window with a gold relation")]
    NoTrainingData,
    #[error("training diverged at step {step} (window {doc_id}#{index}): {detail}")]
    Diverged {
        step: u64,
        doc_id: String,
        index: usize,
        detail: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Mean BCE between `sigmoid(s_arc)` and the gold arcs over the masked cells.
pub fn arc_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    s_arc: Var,
    arc_gold: &Square<bool>,
    loss_mask: &Square<bool>,
) -> Result<Var, ObjectiveError> {
    let n = arc_gold.n();
    if g.shape(s_arc) != [n, n] || loss_mask.n() != n {
        return Err(ObjectiveError::Shape(format!(
            "arc scores {:?} vs gold {n}x{n} and mask {}x{}",
            g.shape(s_arc),
            loss_mask.n(),
            loss_mask.n()
        )));
    }
    Ok(g.bce_with_logits(s_arc, arc_gold.as_slice(), loss_mask.as_slice())?)
}

/// Cross-entropy picks `(i * n + j, slot)` for the upper-triangle pairs that
/// the REL loss scores.
///
/// With the ARC module, only gold relations count and slot = id - 1. Without
/// it, NONE is a regular class: masked NONE pairs are added as negatives and
/// slot = id.
pub fn rel_targets(
    rel_gold: &Square<LabelId>,
    loss_mask: &Square<bool>,
    labels: usize,
    includes_none: bool,
) -> Result<Vec<(usize, usize)>, ObjectiveError> {
    let n = rel_gold.n();
    if loss_mask.n() != n {
        return Err(ObjectiveError::Shape(format!(
            "rel gold {n}x{n} vs mask {}x{}",
            loss_mask.n(),
            loss_mask.n()
        )));
    }
    let mut picks = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let id = rel_gold.at(i, j);
            let slot = if includes_none {
                if id.is_none() && !(loss_mask.at(i, j) || loss_mask.at(j, i)) {
                    continue;
                }
                id.index()
            } else {
                if id.is_none() {
                    continue;
                }
                id.index() - 1
            };
            if slot >= labels {
                return Err(ObjectiveError::Label { label: id.0, labels });
            }
            picks.push((i * n + j, slot));
        }
    }
    Ok(picks)
}

/// Softmax cross-entropy over the upper-triangle pairs, summed and divided
/// by the pair count. `None` when the window has no scored pair.
pub fn rel_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    s_rel: Var,
    rel_gold: &Square<LabelId>,
    loss_mask: &Square<bool>,
    includes_none: bool,
) -> Result<Option<Var>, ObjectiveError> {
    let n = rel_gold.n();
    let shape = g.shape(s_rel).to_vec();
    if shape.len() != 3 || shape[0] != n || shape[1] != n {
        return Err(ObjectiveError::Shape(format!(
            "rel scores {shape:?} vs gold {n}x{n}"
        )));
    }
    let picks = rel_targets(rel_gold, loss_mask, shape[2], includes_none)?;
    if picks.is_empty() {
        return Ok(None);
    }
    let norm = F::of(picks.len() as f64);
    Ok(Some(g.softmax_cross_entropy(s_rel, &picks, norm)?))
}

/// Unweighted sum of the two module losses.
pub fn joint_loss(arc: f64, rel: f64) -> Result<f64, ObjectiveError> {
    if !arc.is_finite() || !rel.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    Ok(arc + rel)
}

/// Loss values and parameter gradients for one window.
#[derive(Debug, Clone)]
pub struct WindowLoss<F> {
    pub arc: F,
    pub rel: F,
    pub joint: F,
    pub grads: Gradients<F>,
}

/// Builds the joint loss of one window on `g`; returns `(arc, rel, joint)`.
pub fn build_window_loss<F: Scalar, R: Rng>(
    g: &mut Graph<'_, F>,
    model: &Model<F>,
    window: &WindowInstance,
    mask: &Square<bool>,
    rng: &mut R,
) -> Result<(Option<Var>, Option<Var>, Var), ObjectiveError> {
    let scores = model.forward(g, &window.tokens, rng)?;
    let arc = match scores.arc {
        Some(s) => Some(arc_loss(g, s, &window.arc_gold, mask)?),
        None => None,
    };
    let rel = rel_loss(g, scores.rel, &window.rel_gold, mask, scores.arc.is_none())?;
    let joint = match (arc, rel) {
        (Some(a), Some(r)) => g.add(a, r)?,
        (Some(a), None) => a,
        (None, Some(r)) => r,
        (None, None) => {
            return Err(ObjectiveError::Shape(format!(
                "window {}#{} has nothing to score",
                window.doc_id, window.index
            )))
        }
    };
    Ok((arc, rel, joint))
}

/// Forward and backward pass of the joint loss on one window in train mode.
pub fn window_loss<F: Scalar, R: Rng>(
    model: &Model<F>,
    window: &WindowInstance,
    mask: &Square<bool>,
    rng: &mut R,
) -> Result<WindowLoss<F>, ObjectiveError> {
    let mut g = Graph::new(model.params(), Mode::Train);
    let (arc, rel, joint) = build_window_loss(&mut g, model, window, mask, rng)?;
    let grads = g.backward(joint)?;
    let value = |v: Option<Var>| v.map_or(F::zero(), |v| g.scalar_value(v));
    Ok(WindowLoss {
        arc: value(arc),
        rel: value(rel),
        joint: g.scalar_value(joint),
        grads,
    })
}

/// Joint loss value only (no backward pass).
pub fn window_loss_value<F: Scalar, R: Rng>(
    model: &Model<F>,
    window: &WindowInstance,
    mask: &Square<bool>,
    mode: Mode,
    rng: &mut R,
) -> Result<F, ObjectiveError> {
    let mut g = Graph::new(model.params(), mode);
    let (_, _, joint) = build_window_loss(&mut g, model, window, mask, rng)?;
    Ok(g.scalar_value(joint))
}

#[cfg(test)]
mod tests;
