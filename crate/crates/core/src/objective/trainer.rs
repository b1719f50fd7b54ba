use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{window_loss, ObjectiveError, Optimizer, OptimizerConfig, WindowLoss};
use crate::exec::Execution;
use crate::model::{Model, ModelError};
use crate::preprocess::{sample_mask, splitmix, window_seed, WindowInstance};
use crate::schema::DatasetProfile;
use crate::tensor::{Gradients, Scalar, TensorError};

const LOSS_CURVE_MAGIC: &str = "# tgraph-loss-curve v1";
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Defaults to 19 for the matres profile and 40 otherwise.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Windows per update; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Draw a fresh negative-sampling mask for every window each epoch after
    /// the first (the first uses the mask stored with the window).
    pub resample_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: None,
            seed: 13,
            batch_size: 1,
            resample_mask: true,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, profile: &DatasetProfile) -> usize {
        self.epochs
            .unwrap_or(if profile.name() == "matres" { 19 } else { 40 })
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.batch_size == 0 {
            return Err(ObjectiveError::Config("train: batch_size must be at least 1".into()));
        }
        if self.epochs == Some(0) {
            return Err(ObjectiveError::Config("train: epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One optimizer step on the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub arc: f64,
    pub rel: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// Zero-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_arc: f64,
    pub mean_rel: f64,
    pub mean_joint: f64,
}

/// Owns a model and its optimizer and runs epochs over training windows.
#[derive(Debug)]
pub struct Trainer<F: Scalar> {
    model: Model<F>,
    optimizer: Optimizer<F>,
    config: TrainConfig,
    execution: Execution,
    epoch: usize,
    curve: Vec<LossRecord>,
}

fn is_non_finite(e: &ObjectiveError) -> bool {
    matches!(
        e,
        ObjectiveError::Tensor(TensorError::NonFinite { .. })
            | ObjectiveError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
            | ObjectiveError::NonFiniteGradient { .. }
    )
}

impl<F: Scalar> Trainer<F> {
    pub fn new(
        model: Model<F>,
        optimizer: OptimizerConfig,
        config: TrainConfig,
    ) -> Result<Self, ObjectiveError> {
        config.validate()?;
        let optimizer = Optimizer::new(optimizer, model.params())?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            execution: Execution::default(),
            epoch: 0,
            curve: Vec::new(),
        })
    }

    /// How per-window gradients inside a batch are computed. Results do not
    /// depend on this choice.
    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn optimizer(&self) -> &Optimizer<F> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Epochs completed so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn curve(&self) -> &[LossRecord] {
        &self.curve
    }

    /// Mask and dropout generator for one window in the current epoch.
    fn window_inputs(&self, w: &WindowInstance) -> (Option<crate::grid::Square<bool>>, ChaCha8Rng) {
        let epoch_seed = splitmix(self.config.seed ^ splitmix(self.epoch as u64 + 1));
        let mask = (self.config.resample_mask && self.epoch > 0)
            .then(|| sample_mask(&w.arc_gold, window_seed(epoch_seed, &w.doc_id, w.index)));
        let rng = ChaCha8Rng::seed_from_u64(window_seed(
            epoch_seed ^ DROPOUT_STREAM,
            &w.doc_id,
            w.index,
        ));
        (mask, rng)
    }

    /// One pass over `windows` in a seeded order. Windows without any gold
    /// relation are skipped.
    pub fn run_epoch(&mut self, windows: &[WindowInstance]) -> Result<EpochSummary, ObjectiveError> {
        let trainable: Vec<&WindowInstance> = windows.iter().filter(|w| w.has_gold()).collect();
        if trainable.is_empty() {
            return Err(ObjectiveError::NoTrainingData);
        }
        let mut order: Vec<usize> = (0..trainable.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(splitmix(self.config.seed.wrapping_add(self.epoch as u64)));
        order.shuffle(&mut shuffle_rng);

        let (mut sum_arc, mut sum_rel, mut sum_joint) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for batch in order.chunks(self.config.batch_size) {
            let this = &*self;
            let results: Vec<Result<WindowLoss<F>, (usize, ObjectiveError)>> =
                self.execution.map(batch, |&k| {
                    let w = trainable[k];
                    let (mask, mut rng) = this.window_inputs(w);
                    window_loss(&this.model, w, mask.as_ref().unwrap_or(&w.loss_mask), &mut rng)
                        .map_err(|e| (k, e))
                });
            let step = self.optimizer.step_count() + 1;
            let mut grads = Gradients::new(self.model.params().len());
            let (mut arc, mut rel, mut joint) = (0.0, 0.0, 0.0);
            for r in results {
                let loss = r.map_err(|(k, e)| {
                    if is_non_finite(&e) {
                        ObjectiveError::Diverged {
                            step,
                            doc_id: trainable[k].doc_id.clone(),
                            index: trainable[k].index,
                            detail: e.to_string(),
                        }
                    } else {
                        e
                    }
                })?;
                arc += loss.arc.to_f64().unwrap_or(f64::NAN);
                rel += loss.rel.to_f64().unwrap_or(f64::NAN);
                joint += loss.joint.to_f64().unwrap_or(f64::NAN);
                grads.merge_owned(loss.grads);
            }
            let b = batch.len() as f64;
            if batch.len() > 1 {
                grads.scale(F::of(1.0 / b));
            }
            let record = LossRecord {
                step,
                arc: arc / b,
                rel: rel / b,
                joint: joint / b,
            };
            let first = trainable[batch[0]];
            let diverged = |detail: String| ObjectiveError::Diverged {
                step,
                doc_id: first.doc_id.clone(),
                index: first.index,
                detail,
            };
            if !record.joint.is_finite() {
                return Err(diverged(format!("joint loss {}", record.joint)));
            }
            let info = self
                .optimizer
                .step(self.model.params_mut(), grads)
                .map_err(|e| diverged(e.to_string()))?;
            debug!(
                "step {} joint {:.5} grad_norm {:.4} lr {:.3e}",
                info.step, record.joint, info.grad_norm, info.lr
            );
            self.curve.push(record);
            sum_arc += record.arc;
            sum_rel += record.rel;
            sum_joint += record.joint;
            steps += 1;
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            mean_arc: sum_arc / steps as f64,
            mean_rel: sum_rel / steps as f64,
            mean_joint: sum_joint / steps as f64,
        };
        self.epoch += 1;
        Ok(summary)
    }

    /// Runs the configured number of epochs; returns one summary per epoch.
    pub fn train(&mut self, windows: &[WindowInstance]) -> Result<Vec<EpochSummary>, ObjectiveError> {
        let epochs = self.config.epochs_for(self.model.profile());
        (0..epochs).map(|_| self.run_epoch(windows)).collect()
    }
}

/// Writes the loss curve as tab-separated text with a version line.
pub fn write_loss_curve(path: &Path, records: &[LossRecord]) -> Result<(), ObjectiveError> {
    let io = |source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{LOSS_CURVE_MAGIC}").map_err(io)?;
    writeln!(out, "step\tarc_loss\trel_loss\tjoint").map_err(io)?;
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.step, r.arc, r.rel, r.joint).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRecord>, ObjectiveError> {
    let io = |source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let bad = |line: usize, what: &str| ObjectiveError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("line {line}: {what}"),
        ),
    };
    let reader = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    match lines.next().transpose().map_err(io)? {
        Some(l) if l == LOSS_CURVE_MAGIC => {}
        _ => return Err(bad(1, "missing loss-curve version line")),
    }
    lines.next().transpose().map_err(io)?;
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(k + 3, "bad number"));
        if f.len() != 4 {
            return Err(bad(k + 3, "expected 4 columns"));
        }
        out.push(LossRecord {
            step: f[0].parse().map_err(|_| bad(k + 3, "bad step"))?,
            arc: parse(f[1])?,
            rel: parse(f[2])?,
            joint: parse(f[3])?,
        });
    }
    Ok(out)
}
