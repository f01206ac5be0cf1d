//! Cross-quantized contrastive loss, the two Siamese backbone objectives, and
//! their combination.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Normalised-temperature cross entropy over both branches.
    Ntxent,
    /// Symmetric negative cosine with a stop-gradient target.
    SiameseStopgrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_l: f64,
    pub backbone: Backbone,
    /// Drop the positive from the softmax denominator, as the indicator in
    /// the original formula reads. Unbounded below; for study only.
    pub literal_indicator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_l: 0.5,
            backbone: Backbone::SiameseStopgrad,
            literal_indicator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_l > 0.0 && self.tau_l.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("tau_l must be > 0, got {}", self.tau_l)))
        }
    }
}

fn batch_rows(tape: &Tape, vars: &[Var], op: &'static str) -> Result<usize> {
    let shape = tape.value(vars[0]).shape().to_vec();
    for v in &vars[1..] {
        if tape.value(*v).shape() != shape.as_slice() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {shape:?}", tape.value(*v).shape()),
            ));
        }
    }
    tape.value(vars[0]).dims2().map(|d| d.0)
}

/// One direction of the cross loss: anchors `x` against every row of `z`,
/// positive on the diagonal. Returns the batch mean.
fn cross_direction(tape: &mut Tape, x: Var, z: Var, tau: f64, literal: bool) -> Result<Var> {
    let b = tape.value(x).rows();
    let sims = tape.cosine_matrix(x, z)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let eye = Array::eye(b);
    let diag_mask = tape.constant(eye.clone());
    let pos = tape.mul(logits, diag_mask)?;
    let pos = tape.sum_rows(pos)?;

    // Shift by the constant row bound 1/tau so exp stays in range; the shift
    // cancels in log-sum-exp.
    let shift = tape.constant(Array::filled(&[b, b], 1.0 / tau));
    let shifted = tape.sub(logits, shift)?;
    let mut exps = tape.exp(shifted)?;
    if literal {
        let off = eye.data().iter().map(|v| 1.0 - v).collect();
        let off = tape.constant(Array::matrix(b, b, off)?);
        exps = tape.mul(exps, off)?;
    }
    let denom = tape.sum_rows(exps)?;
    let log_denom = tape.log(denom)?;
    let shift_col = tape.constant(Array::filled(&[b, 1], 1.0 / tau));
    let lse = tape.add(log_denom, shift_col)?;
    let per_anchor = tape.sub(lse, pos)?;
    tape.mean(per_anchor)
}

/// Cross-quantized contrastive loss.
///
/// The mean of two directions: rows of `x_a` anchored against the quantized
/// rows `z_b` of the other branch, and `x_b` against `z_a`. Same-index pairs
/// are positives, every other row of the batch is a negative.
pub fn cucl_loss(
    tape: &mut Tape,
    x_a: Var,
    z_b: Var,
    x_b: Var,
    z_a: Var,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let rows = batch_rows(tape, &[x_a, z_b, x_b, z_a], "cucl_loss")?;
    if rows < 2 {
        return Err(Error::BatchTooSmall { rows });
    }
    let ab = cross_direction(tape, x_a, z_b, config.tau_l, config.literal_indicator)?;
    let ba = cross_direction(tape, x_b, z_a, config.tau_l, config.literal_indicator)?;
    let both = tape.add(ab, ba)?;
    tape.scale(both, 0.5)
}

/// NT-Xent over the `2B` views: each view's positive is its counterpart in
/// the other branch, self-similarity is excluded, and the result is the mean
/// over all `2B` anchors.
pub fn ntxent_loss(tape: &mut Tape, x_a: Var, x_b: Var, tau_l: f64) -> Result<Var> {
    if !(tau_l > 0.0 && tau_l.is_finite()) {
        return Err(Error::InvalidConfig(format!("tau_l must be > 0, got {tau_l}")));
    }
    let b = batch_rows(tape, &[x_a, x_b], "ntxent_loss")?;
    if b < 2 {
        return Err(Error::BatchTooSmall { rows: b });
    }
    let n = 2 * b;
    let all = tape.concat_rows(&[x_a, x_b])?;
    let sims = tape.cosine_matrix(all, all)?;
    let logits = tape.scale(sims, 1.0 / tau_l)?;

    let mut pos_mask = vec![0.0; n * n];
    let mut off_diag = vec![1.0; n * n];
    for i in 0..n {
        pos_mask[i * n + (i + b) % n] = 1.0;
        off_diag[i * n + i] = 0.0;
    }
    let pos_mask = tape.constant(Array::matrix(n, n, pos_mask)?);
    let off_diag = tape.constant(Array::matrix(n, n, off_diag)?);
    let pos = tape.mul(logits, pos_mask)?;
    let pos = tape.sum_rows(pos)?;

    let shift = tape.constant(Array::filled(&[n, n], 1.0 / tau_l));
    let shifted = tape.sub(logits, shift)?;
    let exps = tape.exp(shifted)?;
    let exps = tape.mul(exps, off_diag)?;
    let denom = tape.sum_rows(exps)?;
    let log_denom = tape.log(denom)?;
    let shift_col = tape.constant(Array::filled(&[n, 1], 1.0 / tau_l));
    let lse = tape.add(log_denom, shift_col)?;
    let per_anchor = tape.sub(lse, pos)?;
    tape.mean(per_anchor)
}

/// `-½·mean cos(p_a, sg(z_b)) - ½·mean cos(p_b, sg(z_a))`.
pub fn siamese_stopgrad_loss(tape: &mut Tape, p_a: Var, z_a: Var, p_b: Var, z_b: Var) -> Result<Var> {
    batch_rows(tape, &[p_a, z_a, p_b, z_b], "siamese_stopgrad_loss")?;
    let target_a = tape.detach(z_a);
    let target_b = tape.detach(z_b);
    let cos_ab = tape.cosine_rows(p_a, target_b)?;
    let cos_ba = tape.cosine_rows(p_b, target_a)?;
    let mean_ab = tape.mean(cos_ab)?;
    let mean_ba = tape.mean(cos_ba)?;
    let total = tape.add(mean_ab, mean_ba)?;
    tape.scale(total, -0.5)
}

/// Unweighted sum of the backbone loss and the cross-quantized term.
pub fn total_loss(l_unsup: f64, l_cucl: f64) -> Result<f64> {
    if !l_unsup.is_finite() || !l_cucl.is_finite() {
        return Err(Error::NonFinite {
            op: "total_loss",
            stage: "forward",
        });
    }
    Ok(l_unsup + l_cucl)
}

pub fn total_loss_var(tape: &mut Tape, l_unsup: Var, l_cucl: Var) -> Result<Var> {
    tape.add(l_unsup, l_cucl)
}
