//! Adam with decoupled weight decay, and patience-based early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// How the optimizer's decay factor is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// Decoupled weight decay: `θ ← θ − lr·wd·θ` alongside the Adam step.
    #[default]
    Weight,
    /// Inverse-time learning-rate decay: `lr_t = lr / (1 + wd·(t−1))`.
    Lr,
}

impl std::str::FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(DecayMode::Weight),
            "lr" => Ok(DecayMode::Lr),
            other => Err(Error::Config(format!(
                "unknown decay mode {other:?} (expected weight or lr)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            decay_mode: DecayMode::Weight,
        }
    }
}

/// Moment estimates for one optimization run.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Non-finite gradients abort the step before any
    /// parameter or moment changes.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            g.ensure_finite(&format!("gradient {i}"))?;
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::Contract(
                "parameter layout changed between Adam steps".into(),
            ));
        }

        self.t += 1;
        let c = self.config;
        let t = self.t as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (lr, wd) = match c.decay_mode {
            DecayMode::Weight => (c.lr, c.weight_decay),
            DecayMode::Lr => (c.lr / (1.0 + c.weight_decay * (t - 1.0)), 0.0),
        };

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.as_mut_slice();
            for (((theta, &gi), mi), vi) in pd
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * *theta);
            }
        }
        for (i, p) in params.iter().enumerate() {
            p.ensure_finite(&format!("parameter {i} after Adam step"))?;
        }
        Ok(())
    }
}

/// Outcome of an early-stopping update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation metric and its snapshot.
#[derive(Clone, Debug)]
pub struct EarlyStopping<T> {
    pub patience: usize,
    pub max_epochs: usize,
    pub min_delta: f64,
    best_metric: f64,
    best_epoch: usize,
    stale: usize,
    best: Option<T>,
}

impl<T: Clone> EarlyStopping<T> {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            min_delta: 1e-6,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
            best: None,
        }
    }

    /// Records the metric of `epoch` (1-based). An improvement larger than
    /// `min_delta` snapshots `model`; ties keep the earlier epoch.
    pub fn update(&mut self, epoch: usize, metric: f64, model: &T) -> StopDecision {
        if metric > self.best_metric + self.min_delta {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.best = Some(model.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.stale >= self.patience || epoch >= self.max_epochs {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }

    /// Epoch of the best snapshot; 0 before any update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_checkpoint(&self) -> Option<&T> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<T> {
        self.best
    }
}
