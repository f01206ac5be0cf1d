use super::array::Array;
use crate::error::{Error, Result};

/// Lower clamp applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    SqDist(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SqDist(..) => "sq_dist",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of 2-D array computations.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and the backward sweep simply walks them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the trainable leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; `None` for constants and interior nodes.
    pub fn wrt(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted buffer lengths cover every index reachable through
    // the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `tanh` through a single `exp`; absolute error stays at rounding level.
fn fast_tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn accumulate(slot: &mut Option<Array>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(Array::from_raw(shape.to_vec(), delta)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn dims(&self, var: Var) -> Result<(usize, usize)> {
        self.value(var).dims2()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                stage: "forward",
            });
        }
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqDist(a, b) => self.grad_flag(*a) || self.grad_flag(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::NormalizeRows(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, _, _) => self.grad_flag(*a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                parts.iter().any(|p| self.grad_flag(*p))
            }
        };
        self.nodes.push(Node {
            value: Array::from_raw(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), vec![c, r], out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, shape, out)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (r, n2) = self.dims(row)?;
        if r != 1 || n != n2 {
            return Err(Error::shape("add_row", format!("{m}x{n} plus {r}x{n2}")));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        self.push(Op::AddRow(a, row), vec![m, n], out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(Op::Scale(a, factor), a, |x| x * factor)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Log(a), a, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh(a), a, fast_tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Vec::new(), vec![total])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), Vec::new(), vec![mean])
    }

    /// Row sums as an `m×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|row| row.iter().sum())
            .collect();
        self.push(Op::SumRows(a), vec![m, 1], out)
    }

    /// Divides each row by its L2 norm, clamped below by [`NORM_EPS`].
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        self.push(Op::NormalizeRows(a), vec![m, n], out)
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(Op::SoftmaxRows(a), vec![m, n], out)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`m×d`)
    /// and the rows of `b` (`n×d`), as an `m×n` matrix.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims(a)?;
        let (n, d2) = self.dims(b)?;
        if d != d2 {
            return Err(Error::shape("sq_dist", format!("{m}x{d} vs {n}x{d2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &bv[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        self.push(Op::SqDist(a, b), vec![m, n], out)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {n} columns"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(Op::SliceCols(a, start, end), vec![m, end - start], out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let m = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let n = self.dims(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("{c} cols vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, n], out)
    }

    /// Propagates adjoints from a scalar output back to every parameter leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NonScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array::from_raw(out_value.shape().to_vec(), vec![1.0]));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    stage: "backward",
                });
            }
            self.propagate(node, &g, &mut grads)?;
        }

        for (id, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param => {
                    let slot = &mut grads[id];
                    match slot {
                        Some(g) if !g.is_finite() => {
                            return Err(Error::NonFinite {
                                op: "param",
                                stage: "backward",
                            })
                        }
                        Some(_) => {}
                        None => *slot = Some(Array::zeros(node.value.shape())),
                    }
                }
                _ => grads[id] = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                if self.grad_flag(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut da);
                    accumulate(&mut grads[a.0], self.value(*a).shape(), da);
                }
                if self.grad_flag(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    accumulate(&mut grads[b.0], self.value(*b).shape(), db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a)?;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j * r + i];
                    }
                }
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.grad_flag(*v) {
                        accumulate(&mut grads[v.0], self.value(*v).shape(), gd.to_vec());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.grad_flag(*a) {
                    accumulate(&mut grads[a.0], self.value(*a).shape(), gd.to_vec());
                }
                if self.grad_flag(*row) {
                    let n = self.dims(*row)?.1;
                    let mut db = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    accumulate(&mut grads[row.0], self.value(*row).shape(), db);
                }
            }
            Op::Sub(a, b) => {
                if self.grad_flag(*a) {
                    accumulate(&mut grads[a.0], self.value(*a).shape(), gd.to_vec());
                }
                if self.grad_flag(*b) {
                    let neg = gd.iter().map(|x| -x).collect();
                    accumulate(&mut grads[b.0], self.value(*b).shape(), neg);
                }
            }
            Op::Mul(a, b) => {
                if self.grad_flag(*a) {
                    let bv = self.value(*b).data();
                    let da = gd.iter().zip(bv).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[a.0], self.value(*a).shape(), da);
                }
                if self.grad_flag(*b) {
                    let av = self.value(*a).data();
                    let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], self.value(*b).shape(), db);
                }
            }
            Op::Scale(a, factor) => {
                let da = gd.iter().map(|g| g * factor).collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::Exp(a) => {
                let da = gd.iter().zip(y).map(|(g, e)| g * e).collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                let da = gd.iter().zip(av).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::Tanh(a) => {
                let da = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], self.value(*a).shape(), vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let share = gd[0] / n as f64;
                accumulate(&mut grads[a.0], self.value(*a).shape(), vec![share; n]);
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a)?;
                let mut da = Vec::with_capacity(m * n);
                for &gi in gd.iter().take(m) {
                    da.extend(std::iter::repeat_n(gi, n));
                }
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::NormalizeRows(a) => {
                let n = self.dims(*a)?.1;
                let av = self.value(*a).data();
                let mut da = Vec::with_capacity(av.len());
                for ((arow, yrow), grow) in av.chunks(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let norm = arow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > NORM_EPS {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        da.extend(yrow.iter().zip(grow).map(|(yi, gi)| (gi - yi * dot) / norm));
                    } else {
                        da.extend(grow.iter().map(|gi| gi / NORM_EPS));
                    }
                }
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::SoftmaxRows(a) => {
                let n = self.dims(*a)?.1;
                let mut da = Vec::with_capacity(y.len());
                for (yrow, grow) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    da.extend(yrow.iter().zip(grow).map(|(yi, gi)| yi * (gi - dot)));
                }
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::SqDist(a, b) => {
                let (m, d) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.grad_flag(*a) {
                    let mut da = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * gd[i * n + j];
                            for t in 0..d {
                                da[i * d + t] += w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], self.value(*a).shape(), da);
                }
                if self.grad_flag(*b) {
                    let mut db = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * gd[i * n + j];
                            for t in 0..d {
                                db[j * d + t] -= w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], self.value(*b).shape(), db);
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.dims(*a)?;
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                accumulate(&mut grads[a.0], self.value(*a).shape(), da);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    if self.grad_flag(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], self.value(p).shape(), dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.grad_flag(p) {
                        let dp = gd[offset..offset + len].to_vec();
                        accumulate(&mut grads[p.0], self.value(p).shape(), dp);
                    }
                    offset += len;
                }
            }
        }
        Ok(())
    }
}
