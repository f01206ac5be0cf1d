//! Product quantization: `M` codebooks of `K` codewords over contiguous
//! subvectors, with a temperature-softened differentiable assignment and a
//! hard nearest-codeword assignment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Gradients, Tape, Var};
use crate::encoder::sgd;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codebooks: usize,
    pub codewords: usize,
    pub sub_dim: usize,
    pub tau_q: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            codebooks: 8,
            codewords: 8,
            sub_dim: 16,
            tau_q: 5.0,
        }
    }
}

impl QuantizerConfig {
    pub fn dim(&self) -> usize {
        self.codebooks * self.sub_dim
    }

    /// Bits needed to store one code: `M · log2(K)`.
    pub fn code_bits(&self) -> f64 {
        self.codebooks as f64 * (self.codewords as f64).log2()
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebooks == 0 || self.codewords == 0 || self.sub_dim == 0 {
            return Err(Error::InvalidConfig(
                "codebooks, codewords and sub_dim must be >= 1".into(),
            ));
        }
        check_tau(self.tau_q)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")))
    }
}

/// `M` sub-codebooks, each a `K × sub_dim` matrix of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    books: Vec<Array>,
}

/// Tape handles for the codewords of one [`Codebook`].
#[derive(Clone, Debug)]
pub struct CodebookVars {
    books: Vec<Var>,
}

impl CodebookVars {
    /// Wraps existing tape handles, one `K × sub_dim` matrix per book.
    pub fn new(books: Vec<Var>) -> Self {
        CodebookVars { books }
    }

    pub fn books(&self) -> &[Var] {
        &self.books
    }
}

impl Codebook {
    pub fn from_books(books: Vec<Array>) -> Result<Self> {
        let first = books
            .first()
            .ok_or_else(|| Error::InvalidConfig("codebook needs at least one book".into()))?;
        let shape = first.dims2()?;
        for b in &books {
            if b.shape().len() != 2 || b.dims2()? != shape {
                return Err(Error::shape(
                    "codebook",
                    format!("book shape {:?} vs {:?}", b.shape(), first.shape()),
                ));
            }
        }
        Ok(Codebook { books })
    }

    /// Builds `M` books from a flat `M·K·sub_dim` row-major buffer.
    pub fn from_flat(m: usize, k: usize, sub_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * k * sub_dim || m == 0 {
            return Err(Error::LengthMismatch {
                left: m * k * sub_dim,
                right: data.len(),
            });
        }
        let books = data
            .chunks(k * sub_dim)
            .map(|chunk| Array::matrix(k, sub_dim, chunk.to_vec()))
            .collect::<Result<_>>()?;
        Self::from_books(books)
    }

    /// Zero-mean Gaussian codewords whose per-book scale matches the
    /// standard deviation of the corresponding subvector entries of `sample`.
    ///
    /// Redraws a book in the (practically impossible) case that two of its
    /// codewords come out bit-identical.
    pub fn init_from_batch<R: Rng>(config: &QuantizerConfig, sample: &Array, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = sample.dims2()?;
        if cols != config.dim() {
            return Err(Error::shape(
                "codebook_init",
                format!("{cols} features vs {} = M·sub_dim", config.dim()),
            ));
        }
        let mut books = Vec::with_capacity(config.codebooks);
        for i in 0..config.codebooks {
            let lo = i * config.sub_dim;
            let values: Vec<f64> = sample
                .row_iter()
                .flat_map(|r| r[lo..lo + config.sub_dim].iter().copied())
                .collect();
            let n = (rows * config.sub_dim) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            loop {
                let data: Vec<f64> = (0..config.codewords * config.sub_dim)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                let book = Array::matrix(config.codewords, config.sub_dim, data)?;
                if !has_duplicate_rows(&book) {
                    books.push(book);
                    break;
                }
            }
        }
        Self::from_books(books)
    }

    pub fn codebooks(&self) -> usize {
        self.books.len()
    }

    pub fn codewords(&self) -> usize {
        self.books[0].rows()
    }

    pub fn sub_dim(&self) -> usize {
        self.books[0].cols()
    }

    pub fn dim(&self) -> usize {
        self.codebooks() * self.sub_dim()
    }

    pub fn book(&self, i: usize) -> &Array {
        &self.books[i]
    }

    pub fn codeword(&self, book: usize, word: usize) -> &[f64] {
        self.books[book].row(word)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.books.iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> CodebookVars {
        CodebookVars {
            books: self.books.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> CodebookVars {
        CodebookVars {
            books: self.books.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    pub fn sgd_step(&mut self, vars: &CodebookVars, grads: &Gradients, lr: f64) -> Result<()> {
        let updated = self
            .books
            .iter()
            .zip(&vars.books)
            .map(|(b, v)| sgd(b, grads.wrt(*v), lr))
            .collect::<Result<Vec<_>>>()?;
        self.books = updated;
        Ok(())
    }

    fn check_dim(&self, op: &'static str, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::shape(
                op,
                format!("{d} features vs codebook dimension {}", self.dim()),
            ));
        }
        Ok(())
    }
}

fn has_duplicate_rows(book: &Array) -> bool {
    let k = book.rows();
    (0..k).any(|a| {
        (a + 1..k).any(|b| {
            book.row(a)
                .iter()
                .zip(book.row(b))
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    })
}

/// Splits a vector into `m` contiguous slices of equal length.
pub fn split(x: &[f64], m: usize) -> Result<Vec<&[f64]>> {
    if m == 0 || x.len() % m != 0 {
        return Err(Error::shape(
            "split",
            format!("dimension {} not divisible by {m}", x.len()),
        ));
    }
    Ok(x.chunks(x.len() / m).collect())
}

/// Squared Euclidean distance.
pub fn codeword_distance(x: &[f64], c: &[f64]) -> Result<f64> {
    if x.len() != c.len() {
        return Err(Error::shape(
            "codeword_distance",
            format!("{} vs {}", x.len(), c.len()),
        ));
    }
    Ok(x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Softmax over `-dis(x, c_k) / tau_q` for the codewords of one book.
pub fn soft_assign(x: &[f64], book: &Array, tau_q: f64) -> Result<Vec<f64>> {
    check_tau(tau_q)?;
    let logits = book
        .row_iter()
        .map(|c| codeword_distance(x, c).map(|d| -d / tau_q))
        .collect::<Result<Vec<_>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Differentiable soft quantization of a `B × D` variable.
///
/// Each subvector is replaced by the assignment-weighted mean of its
/// codebook, and the per-book results are concatenated back to `B × D`.
pub fn soft_quantize_var(tape: &mut Tape, x: Var, codebook: &CodebookVars, tau_q: f64) -> Result<Var> {
    check_tau(tau_q)?;
    let (_, d) = tape.value(x).dims2()?;
    let m = codebook.books.len();
    let sub_dim = tape.value(codebook.books[0]).cols();
    if d != m * sub_dim {
        return Err(Error::shape(
            "soft_quantize",
            format!("{d} features vs {m}·{sub_dim}"),
        ));
    }
    let mut parts = Vec::with_capacity(m);
    for (i, &book) in codebook.books.iter().enumerate() {
        let sub = tape.slice_cols(x, i * sub_dim, (i + 1) * sub_dim)?;
        let dist = tape.sq_dist(sub, book)?;
        let logits = tape.scale(dist, -1.0 / tau_q)?;
        let weights = tape.softmax_rows(logits)?;
        parts.push(tape.matmul(weights, book)?);
    }
    tape.concat_cols(&parts)
}

/// Soft quantization of plain arrays.
pub fn soft_quantize(x: &Array, codebook: &Codebook, tau_q: f64) -> Result<Array> {
    codebook.check_dim("soft_quantize", x.dims2()?.1)?;
    let mut tape = Tape::new();
    let books = codebook.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let z = soft_quantize_var(&mut tape, xv, &books, tau_q)?;
    Ok(tape.value(z).clone())
}

/// Index of the nearest codeword and its squared distance; ties go to the
/// lowest index.
pub fn nearest_codeword(x: &[f64], book: &Array) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (k, c) in book.row_iter().enumerate() {
        let d = codeword_distance(x, c)?;
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

/// Hard assignment: per row and book, the nearest codeword index, plus the
/// reassembled quantized rows.
pub fn hard_quantize(x: &Array, codebook: &Codebook) -> Result<(Array, Vec<Vec<usize>>)> {
    let (rows, d) = x.dims2()?;
    codebook.check_dim("hard_quantize", d)?;
    let mut data = Vec::with_capacity(rows * d);
    let mut indices = Vec::with_capacity(rows);
    for row in x.row_iter() {
        let subs = split(row, codebook.codebooks())?;
        let mut codes = Vec::with_capacity(subs.len());
        for (i, sub) in subs.into_iter().enumerate() {
            let (k, _) = nearest_codeword(sub, codebook.book(i))?;
            data.extend_from_slice(codebook.codeword(i, k));
            codes.push(k);
        }
        indices.push(codes);
    }
    Ok((Array::matrix(rows, d, data)?, indices))
}
