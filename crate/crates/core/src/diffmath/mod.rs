//! Dense float64 arrays and a tape-based reverse-mode differentiator.
//!
//! The primitive set is small: matrix multiply, elementwise
//! add/sub/mul/scale/exp/log/tanh, sum/mean/row-sum reductions, row-wise L2
//! normalisation, row-wise softmax, pairwise squared distance, and column or
//! row slicing and concatenation. Everything the losses and the quantizer
//! need is composed from these.

mod array;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var, NORM_EPS};

use crate::error::{Error, Result};

/// Evaluates a scalar program and its gradient with respect to every input.
///
/// Each input is registered as a trainable leaf; the program receives the
/// matching handles in order.
pub fn forward_backward<F>(inputs: &[Array], program: F) -> Result<(f64, Vec<Array>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let value = tape.scalar(out).map_err(|_| Error::NonScalar {
        shape: tape.value(out).shape().to_vec(),
    })?;
    let grads = tape.backward(out)?;
    let gradients = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().expect("inputs are parameter leaves"))
        .collect();
    Ok((value, gradients))
}

/// Cosine similarity of two equally sized arrays, each norm clamped below by
/// [`NORM_EPS`]; a zero vector therefore has similarity 0 with anything.
pub fn cosine_similarity(a: &Array, b: &Array) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(cosine(a.data(), b.data()))
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (na * nb)
}

impl Tape {
    /// Row-wise cosine similarity of two `m×d` matrices, as an `m×1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let prod = self.mul(an, bn)?;
        self.sum_rows(prod)
    }

    /// All-pairs cosine similarity between the rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }
}
