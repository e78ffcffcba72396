//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated (define-by-run).
//! Values are available immediately after each call; calling
//! [`Tape::backward`] on a scalar output accumulates gradients for every
//! node in reverse insertion order, which is always a valid topological
//! order of the recorded graph.
//!
//! The op set is exactly what the encoder, graph encoder and fusion stages
//! need. Masked ops (`softmax_masked_rows`, `mean_rows_masked`, `zero_rows`)
//! skip excluded entries rather than multiplying by zero, so garbage at
//! masked positions can never leak into valid outputs, not even as `0 * inf`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// (m, n) + (1, n) broadcast over rows.
    AddRow(usize, usize),
    Mul(usize, usize),
    /// (m, n) * (m, 1) broadcast over columns.
    MulCol(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Transpose(usize),
    ReverseRows(usize),
    SoftmaxMaskedRows { x: usize, key_mask: Vec<bool> },
    LogSoftmaxRows(usize),
    RowMax { x: usize, argmax: Vec<usize> },
    ZeroRows { x: usize, keep: Vec<bool> },
    MeanRowsMasked { x: usize, keep: Vec<bool> },
    SumAll(usize),
    /// Elementwise product with a fixed matrix (dropout masks).
    MulConst { x: usize, factor: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Inverted-dropout context: present only during training.
pub struct DropoutState<'a> {
    pub rng: &'a mut rand_chacha::ChaCha8Rng,
    pub rate: f64,
}

/// Apply inverted dropout to `x` when a training context is present;
/// identity otherwise. Kept entries are scaled by `1/(1-rate)`.
pub fn apply_dropout(tape: &mut Tape, x: Var, state: &mut Option<DropoutState>) -> Var {
    let Some(s) = state else { return x };
    if s.rate <= 0.0 {
        return x;
    }
    use rand::Rng;
    let keep = 1.0 - s.rate;
    let dim = tape.value(x).raw_dim();
    let mask = Array2::from_shape_fn(dim, |_| {
        if s.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via `erf`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * pdf
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    /// Zero if the node does not influence the differentiated output.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    /// `a + row` where `row` has shape `(1, n)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    /// `a * col` where `col` has shape `(m, 1)`, broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(value, Op::MulCol(a.0, col.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(value, Op::SliceRows { x: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols { x: a.0, start })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.slice(ndarray::s![..;-1, ..]).to_owned();
        self.push(value, Op::ReverseRows(a.0))
    }

    /// Row-wise softmax over the unmasked columns only. Masked columns get
    /// probability exactly `0.0` and are skipped entirely, so their scores
    /// never enter the normalization (equivalent to a `-inf` logit).
    ///
    /// Errors if `key_mask` has no `true` entry.
    pub fn softmax_masked_rows(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::AllMasked("softmax keys".into()));
        }
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ncols(), key_mask.len(), "key mask length");
        let mut value = Array2::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, &keep) in key_mask.iter().enumerate() {
                if keep && row[j] > max {
                    max = row[j];
                }
            }
            let mut denom = 0.0;
            for (j, &keep) in key_mask.iter().enumerate() {
                if keep {
                    denom += (row[j] - max).exp();
                }
            }
            for (j, &keep) in key_mask.iter().enumerate() {
                if keep {
                    value[[i, j]] = (row[j] - max).exp() / denom;
                }
            }
        }
        Ok(self.push(
            value,
            Op::SoftmaxMaskedRows {
                x: a.0,
                key_mask: key_mask.to_vec(),
            },
        ))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = v - lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    /// Per-row maximum over columns, shape `(m, 1)`. The backward pass routes
    /// the gradient to the first position attaining the maximum.
    pub fn row_max(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros((x.nrows(), 1));
        let mut argmax = Vec::with_capacity(x.nrows());
        for (i, row) in x.outer_iter().enumerate() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            value[[i, 0]] = row[best];
            argmax.push(best);
        }
        self.push(value, Op::RowMax { x: a.0, argmax })
    }

    /// Copy of `a` with rows where `keep` is false set to exactly zero.
    pub fn zero_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), keep.len(), "row mask length");
        let mut value = Array2::zeros(x.raw_dim());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                value.row_mut(i).assign(&x.row(i));
            }
        }
        self.push(
            value,
            Op::ZeroRows {
                x: a.0,
                keep: keep.to_vec(),
            },
        )
    }

    /// Mean of the rows where `keep` is true, shape `(1, n)`. Excluded rows
    /// are never read. Errors if no row is kept.
    pub fn mean_rows_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), keep.len(), "row mask length");
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::AllMasked("mean pooling".into()));
        }
        let mut acc = Array2::zeros((1, x.ncols()));
        for (i, &k) in keep.iter().enumerate() {
            if k {
                let row = x.row(i);
                acc.row_mut(0).zip_mut_with(&row, |a, &b| *a += b);
            }
        }
        acc /= count as f64;
        Ok(self.push(
            acc,
            Op::MeanRowsMasked {
                x: a.0,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Sum of all entries, shape `(1, 1)`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a.0))
    }

    /// Elementwise product with a fixed (non-differentiated) matrix.
    pub fn mul_const(&mut self, a: Var, factor: Array2<f64>) -> Var {
        let value = &self.nodes[a.0].value * &factor;
        self.push(value, Op::MulConst { x: a.0, factor })
    }

    fn accumulate(&mut self, idx: usize, g: &Array2<f64>) {
        match &mut self.nodes[idx].grad {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Run reverse-mode accumulation from a scalar `(1, 1)` output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(
            self.nodes[out.0].value.dim(),
            (1, 1),
            "backward requires a scalar output"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(Array2::ones((1, 1)));

        for i in (0..=out.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    self.accumulate(a, &g);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(row, &dr);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b].value;
                    let db = &g * &self.nodes[a].value;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MulCol(a, col) => {
                    let (a, col) = (*a, *col);
                    let da = &g * &self.nodes[col].value;
                    let dc = (&g * &self.nodes[a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    self.accumulate(a, &da);
                    self.accumulate(col, &dc);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da = &g * c;
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let s = &self.nodes[i].value;
                    let da = &g * &(s * &(1.0 - s));
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let t = &self.nodes[i].value;
                    let da = &g * &(1.0 - t * t);
                    self.accumulate(a, &da);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let da = &g * &self.nodes[a].value.mapv(gelu_grad_scalar);
                    self.accumulate(a, &da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let h = self.nodes[p].value.nrows();
                        let dp = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                        self.accumulate(p, &dp);
                        offset += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx = Array2::zeros(self.nodes[x].value.raw_dim());
                    dx.slice_mut(ndarray::s![start..start + g.nrows(), ..])
                        .assign(&g);
                    self.accumulate(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx = Array2::zeros(self.nodes[x].value.raw_dim());
                    dx.slice_mut(ndarray::s![.., start..start + g.ncols()])
                        .assign(&g);
                    self.accumulate(x, &dx);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let da = g.t().to_owned();
                    self.accumulate(a, &da);
                }
                Op::ReverseRows(a) => {
                    let a = *a;
                    let da = g.slice(ndarray::s![..;-1, ..]).to_owned();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxMaskedRows { x, key_mask } => {
                    let x = *x;
                    let key_mask = key_mask.clone();
                    let p = self.nodes[i].value.clone();
                    let mut dx = Array2::zeros(p.raw_dim());
                    for r in 0..p.nrows() {
                        let mut dot = 0.0;
                        for (c, &keep) in key_mask.iter().enumerate() {
                            if keep {
                                dot += g[[r, c]] * p[[r, c]];
                            }
                        }
                        for (c, &keep) in key_mask.iter().enumerate() {
                            if keep {
                                dx[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let logp = &self.nodes[i].value;
                    let p = logp.mapv(f64::exp);
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = &g - &(&p * &row_sums);
                    self.accumulate(a, &da);
                }
                Op::RowMax { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let mut dx = Array2::zeros(self.nodes[x].value.raw_dim());
                    for (r, &j) in argmax.iter().enumerate() {
                        dx[[r, j]] += g[[r, 0]];
                    }
                    self.accumulate(x, &dx);
                }
                Op::ZeroRows { x, keep } => {
                    let x = *x;
                    let keep = keep.clone();
                    let mut dx = g.clone();
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            dx.row_mut(r).fill(0.0);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::MeanRowsMasked { x, keep } => {
                    let x = *x;
                    let keep = keep.clone();
                    let count = keep.iter().filter(|&&k| k).count() as f64;
                    let mut dx = Array2::zeros(self.nodes[x].value.raw_dim());
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            let scaled = g.row(0).mapv(|v| v / count);
                            dx.row_mut(r).assign(&scaled);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let da = Array2::from_elem(self.nodes[a].value.raw_dim(), g[[0, 0]]);
                    self.accumulate(a, &da);
                }
                Op::MulConst { x, factor } => {
                    let x = *x;
                    let da = &g * factor;
                    self.accumulate(x, &da);
                }
            }
        }
    }
}
