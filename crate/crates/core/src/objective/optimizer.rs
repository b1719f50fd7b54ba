use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::tensor::{Gradients, ParamStore, Scalar};

/// Adam-style optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub mu: f64,
    pub nu: f64,
    pub epsilon: f64,
    /// Global gradient norm ceiling.
    pub clip_norm: f64,
    /// Learning-rate factor applied every `decay_interval` steps.
    pub decay: f64,
    pub decay_interval: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-5,
            mu: 0.9,
            nu: 0.9,
            epsilon: 1e-12,
            clip_norm: 5.0,
            decay: 0.75,
            decay_interval: 5000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |what: &str| Err(ObjectiveError::Config(format!("optimizer: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.mu) || !(0.0..1.0).contains(&self.nu) {
            return bad("mu and nu must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be at least 1");
        }
        Ok(())
    }
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually used.
    pub clipped_norm: f64,
}

/// Optimizer state: step counter and per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<F>) -> Result<Self, ObjectiveError> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![F::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Ok(Optimizer {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        let decays = self.step / self.config.decay_interval;
        self.config.lr * self.config.decay.powi(decays.min(i32::MAX as u64) as i32)
    }

    /// Scales `grads` so their global norm is at most `clip_norm`; returns
    /// the norm before clipping.
    pub fn clip(&self, grads: &mut Gradients<F>) -> f64 {
        let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
        if norm > self.config.clip_norm {
            grads.scale(F::of(self.config.clip_norm / norm));
        }
        norm
    }

    /// Clips, updates the moments and applies one bias-corrected step.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        mut grads: Gradients<F>,
    ) -> Result<StepInfo, ObjectiveError> {
        let lr = self.current_lr();
        let grad_norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
        // A NaN or Inf entry makes the norm non-finite; an Inf norm from
        // finite entries is just an overflow and gets clipped.
        if !grad_norm.is_finite() && !grads.all_finite() {
            return Err(ObjectiveError::NonFiniteGradient {
                step: self.step + 1,
            });
        }
        let clipped_norm = if grad_norm > self.config.clip_norm {
            grads.scale(F::of(self.config.clip_norm / grad_norm));
            self.config.clip_norm
        } else {
            grad_norm
        };
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let (mu, nu) = (self.config.mu, self.config.nu);
        let m_corr = F::of(1.0 - mu.powi(t));
        let v_corr = F::of(1.0 - nu.powi(t));
        let (mu, nu) = (F::of(mu), F::of(nu));
        let (lr_f, eps) = (F::of(lr), F::of(self.config.epsilon));
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.get_mut(id).data_mut();
            let (one_mu, one_nu) = (F::one() - mu, F::one() - nu);
            let (m_scale, v_scale) = (F::one() / m_corr, F::one() / v_corr);
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = mu * *m + one_mu * g;
                *v = nu * *v + one_nu * g * g;
                *p -= lr_f * (*m * m_scale) / ((*v * v_scale).sqrt() + eps);
            }
        }
        Ok(StepInfo {
            step: self.step,
            lr,
            grad_norm,
            clipped_norm,
        })
    }
}
