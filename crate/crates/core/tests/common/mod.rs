//! Plain-loop reference implementations used as independent oracles.
#![allow(dead_code)]

use cucl::diffmath::Array;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rows = Vec<Vec<f64>>;

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Array::matrix(rows, cols, data).unwrap()
}

pub fn to_rows(a: &Array) -> Rows {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(1e-12);
    let nb = dot(b, b).sqrt().max(1e-12);
    dot(a, b) / (na * nb)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cross_direction(x: &Rows, z: &Rows, tau: f64, literal: bool) -> f64 {
    let b = x.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = Vec::new();
        for j in 0..b {
            if literal && i == j {
                continue;
            }
            denom.push(cos(&x[i], &z[j]) / tau);
        }
        total += log_sum_exp(&denom) - cos(&x[i], &z[i]) / tau;
    }
    total / b as f64
}

pub fn cucl(x_a: &Rows, z_b: &Rows, x_b: &Rows, z_a: &Rows, tau: f64, literal: bool) -> f64 {
    0.5 * (cross_direction(x_a, z_b, tau, literal) + cross_direction(x_b, z_a, tau, literal))
}

pub fn ntxent(x_a: &Rows, x_b: &Rows, tau: f64) -> f64 {
    let b = x_a.len();
    let views: Rows = x_a.iter().chain(x_b).cloned().collect();
    let n = 2 * b;
    let mut total = 0.0;
    for k in 0..n {
        let partner = if k < b { k + b } else { k - b };
        let others: Vec<f64> = (0..n)
            .filter(|&j| j != k)
            .map(|j| cos(&views[k], &views[j]) / tau)
            .collect();
        total += log_sum_exp(&others) - cos(&views[k], &views[partner]) / tau;
    }
    total / n as f64
}

pub fn siamese(p_a: &Rows, z_a: &Rows, p_b: &Rows, z_b: &Rows) -> f64 {
    let b = p_a.len() as f64;
    let ab: f64 = p_a.iter().zip(z_b).map(|(p, z)| cos(p, z)).sum();
    let ba: f64 = p_b.iter().zip(z_a).map(|(p, z)| cos(p, z)).sum();
    -0.5 * ab / b - 0.5 * ba / b
}

/// Soft assignment of one subvector: softmax of negative squared distances.
pub fn soft_weights(x: &[f64], words: &Rows, tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = words
        .iter()
        .map(|c| -x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau)
        .collect();
    let lse = log_sum_exp(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `books[m][k]` is codeword `k` of sub-codebook `m`.
pub fn soft_quantize(x: &Rows, books: &[Rows], tau: f64) -> Rows {
    let m = books.len();
    let s = books[0][0].len();
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; m * s];
            for (mi, words) in books.iter().enumerate() {
                let sub = &row[mi * s..(mi + 1) * s];
                let w = soft_weights(sub, words, tau);
                for (k, c) in words.iter().enumerate() {
                    for d in 0..s {
                        out[mi * s + d] += w[k] * c[d];
                    }
                }
            }
            out
        })
        .collect()
}

/// Nearest codeword per subvector by exhaustive scan; first minimum wins.
pub fn hard_quantize(x: &Rows, books: &[Rows]) -> Rows {
    let s = books[0][0].len();
    x.iter()
        .map(|row| {
            let mut out = Vec::with_capacity(row.len());
            for (mi, words) in books.iter().enumerate() {
                let sub = &row[mi * s..(mi + 1) * s];
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, c) in words.iter().enumerate() {
                    let d: f64 = sub.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                out.extend_from_slice(&words[best]);
            }
            out
        })
        .collect()
}

pub fn residual(x: &[f64], books: &[Rows]) -> f64 {
    let s = books[0][0].len();
    let mut total = 0.0;
    for (mi, words) in books.iter().enumerate() {
        let sub = &x[mi * s..(mi + 1) * s];
        let mut best = f64::INFINITY;
        for c in words {
            let d: f64 = sub.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d);
        }
        total += best;
    }
    total
}

/// Indices of the `s` largest distances, ties to the lower index, by full sort.
pub fn furthest_by_sort(distances: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    idx.truncate(s);
    idx
}

/// Smallest gap, over all books, between the nearest and second-nearest
/// codeword distance of `x`.
pub fn min_top_two_gap(x: &[f64], books: &[Rows]) -> f64 {
    let s = books[0][0].len();
    let mut gap = f64::INFINITY;
    for (mi, words) in books.iter().enumerate() {
        let sub = &x[mi * s..(mi + 1) * s];
        let mut d: Vec<f64> = words
            .iter()
            .map(|c| sub.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        d.sort_by(f64::total_cmp);
        gap = gap.min(d[1] - d[0]);
    }
    gap
}

/// ACC, BWT and MAA written directly from their definitions.
pub fn metrics(a: &Rows) -> (f64, Option<f64>, f64) {
    let t = a.len();
    let mut acc = 0.0;
    for i in 0..t {
        acc += a[t - 1][i];
    }
    acc /= t as f64;
    let bwt = if t > 1 {
        let mut s = 0.0;
        for i in 0..t - 1 {
            s += a[t - 1][i] - a[i][i];
        }
        Some(s / (t - 1) as f64)
    } else {
        None
    };
    let mut maa = 0.0;
    for j in 0..t {
        let mut row = 0.0;
        for i in 0..=j {
            row += a[j][i];
        }
        maa += row / (j + 1) as f64;
    }
    (acc, bwt, maa / t as f64)
}

pub fn random_triangular<R: Rng>(rng: &mut R, t: usize) -> Rows {
    (0..t)
        .map(|j| (0..=j).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_gradients<F>(inputs: &[Array], f: F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Rows]) -> f64,
{
    let base: Vec<Rows> = inputs.iter().map(to_rows).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for (n, input) in inputs.iter().enumerate() {
        let cols = input.cols();
        let mut g = vec![0.0; input.len()];
        for (idx, slot) in g.iter_mut().enumerate() {
            let (r, c) = (idx / cols, idx % cols);
            let mut plus = base.clone();
            plus[n][r][c] += h;
            let mut minus = base.clone();
            minus[n][r][c] -= h;
            *slot = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}
