//! Training objectives: binary cross-entropy, the cross-corpus
//! gender-similarity contrastive loss, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the gender-similarity term.
    pub alpha: f64,
    /// Weight of the gender-classification term.
    pub beta: f64,
    /// Contrastive margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

fn column_leaf(tape: &mut Tape, values: &[f64]) -> Result<Var> {
    Ok(tape.leaf(Matrix::column(values)?))
}

/// Mean binary cross-entropy of probabilities `p` (an `N×1` column on the
/// tape) against labels in {0, 1}, optionally with per-sample weights.
pub fn bce(tape: &mut Tape, p: Var, y: &[f64], weights: Option<&[f64]>) -> Result<Var> {
    let shape = tape.value(p).shape();
    if shape.0 == 0 {
        return Err(Error::Contract("bce on an empty batch".into()));
    }
    if shape != (y.len(), 1) {
        return Err(Error::Shape {
            op: "bce",
            left: shape,
            right: (y.len(), 1),
        });
    }
    if let Some(w) = weights {
        if w.len() != y.len() {
            return Err(Error::Shape {
                op: "bce weights",
                left: (w.len(), 1),
                right: (y.len(), 1),
            });
        }
    }
    if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("bce label {bad} is not 0 or 1")));
    }
    let n = y.len() as f64;
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.ln(pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.ln(one_minus)?;
    let pos_mask = column_leaf(tape, y)?;
    let neg_labels: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let neg_mask = column_leaf(tape, &neg_labels)?;
    let a = tape.mul(pos_mask, log_p)?;
    let b = tape.mul(neg_mask, log_q)?;
    let mut per_sample = tape.add(a, b)?;
    if let Some(w) = weights {
        let wv = column_leaf(tape, w)?;
        per_sample = tape.mul(per_sample, wv)?;
    }
    let total = tape.sum(per_sample);
    tape.scale(total, -1.0 / n)
}

/// [`bce`] on plain slices.
pub fn bce_value(p: &[f64], y: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = column_leaf(&mut tape, p)?;
    let loss = bce(&mut tape, pv, y, None)?;
    tape.value(loss).item()
}

/// Mean contrastive loss over row pairs of `z1` and `z2`.
///
/// Per pair: `(1-y)·½D² + y·½·max(0, m-D)²` with `D` the Euclidean distance
/// and `y = 1` for a different-gender pair. The same-gender branch uses `D²`
/// directly; the margin branch takes a square root whose derivative at
/// `D = 0` is defined as zero.
pub fn gsim(tape: &mut Tape, z1: Var, z2: Var, y_pair: &[f64], margin: f64) -> Result<Var> {
    let (s1, s2) = (tape.value(z1).shape(), tape.value(z2).shape());
    if s1 != s2 {
        return Err(Error::Shape {
            op: "gsim",
            left: s1,
            right: s2,
        });
    }
    if s1.0 != y_pair.len() {
        return Err(Error::Shape {
            op: "gsim pair labels",
            left: s1,
            right: (y_pair.len(), 1),
        });
    }
    if s1.0 == 0 {
        return Err(Error::Contract("gsim on an empty pair batch".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::Contract(format!("margin must be > 0, got {margin}")));
    }
    let diff = tape.sub(z1, z2)?;
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.row_sum(sq);

    let same: Vec<f64> = y_pair.iter().map(|y| 1.0 - y).collect();
    let same_mask = column_leaf(tape, &same)?;
    let pull = tape.mul(d2, same_mask)?;

    let d = tape.sqrt(d2)?;
    let neg_d = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(neg_d, margin)?;
    let hinge = tape.relu(gap);
    let hinge_sq = tape.mul(hinge, hinge)?;
    let diff_mask = column_leaf(tape, y_pair)?;
    let push = tape.mul(hinge_sq, diff_mask)?;

    let both = tape.add(pull, push)?;
    let half = tape.scale(both, 0.5)?;
    tape.mean(half)
}

/// Contrastive loss for a single pair of embeddings.
pub fn gsim_pair(z1: &[f64], z2: &[f64], different_gender: bool, margin: f64) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Shape {
            op: "gsim_pair",
            left: (1, z1.len()),
            right: (1, z2.len()),
        });
    }
    let mut tape = Tape::new();
    let a = tape.leaf(Matrix::new(1, z1.len(), z1.to_vec())?);
    let b = tape.leaf(Matrix::new(1, z2.len(), z2.to_vec())?);
    let y = if different_gender { 1.0 } else { 0.0 };
    let l = gsim(&mut tape, a, b, &[y], margin)?;
    tape.value(l).item()
}

/// Reported total: `l_ec + α·l_gsim − β·l_gc`.
pub fn total_loss(l_ec: f64, l_gsim: f64, l_gc: f64, w: &LossWeights) -> Result<f64> {
    let total = l_ec + w.alpha * l_gsim - w.beta * l_gc;
    if [l_ec, l_gsim, l_gc, total].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("total_loss".into()));
    }
    Ok(total)
}
