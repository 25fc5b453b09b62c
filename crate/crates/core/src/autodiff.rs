//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the tape in reverse and
//! returns gradients for every node. Leaves are created with
//! [`Graph::leaf`]; parameters are ordinary leaves whose gradients the caller
//! reads back by handle.
//!
//! Rows are vectors throughout: a batch of `n` vectors of width `d` is an
//! `n × d` matrix, and a linear map `W` is applied as `x · Wᵀ`.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Builds a CSR matrix from `(row, col, value)` entries. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut data: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            debug_assert!(r < rows && c < cols);
            if last == Some((r, c)) {
                *data.last_mut().expect("entry present") += v;
                continue;
            }
            indices.push(c);
            data.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr { rows, cols, indptr, indices, data }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.data[span].iter().copied())
    }

    /// `self · x`
    pub fn matmul(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ · y`
    pub fn matmul_transposed(&self, y: &Mat) -> Mat {
        let mut out = Mat::zeros((self.cols, y.ncols()));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &y.row(r));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Mat>),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SpMM(Arc<Csr>, Var),
    PadCols(Var, usize),
    Sum(Var),
    MaskedXent {
        logits: Var,
        allowed: Vec<Range<usize>>,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node handle.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise softmax; entries equal to `-inf` receive probability exactly 0.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dims");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_t inner dims");
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        debug_assert_eq!(self.shape(a).1, self.shape(row).1, "add_row widths");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let value = self.value(a) * &*c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Row-wise softmax. `-inf` inputs map to probability 0.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise softmax of a square score matrix with the strict upper
    /// triangle masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let mut masked = self.value(a).clone();
        for ((i, j), v) in masked.indexed_iter_mut() {
            if j > i {
                *v = f64::NEG_INFINITY;
            }
        }
        let value = softmax_rows(&masked);
        self.push(value, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut normalized = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(normalized.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * is);
        }
        let value = &normalized * self.value(gamma) + self.value(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, normalized, inv_std })
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::Gather(a, rows.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let value = self.value(a).slice(s![.., cols.clone()]).to_owned();
        self.push(value, Op::SliceCols(a, cols.start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, m: Arc<Csr>, a: Var) -> Var {
        debug_assert_eq!(m.cols, self.shape(a).0);
        let value = m.matmul(self.value(a));
        self.push(value, Op::SpMM(m, a))
    }

    /// Embeds `a` into a zero matrix of width `width`, starting at column `offset`.
    pub fn pad_cols(&mut self, a: Var, offset: usize, width: usize) -> Var {
        let (n, d) = self.shape(a);
        debug_assert!(offset + d <= width);
        let mut value = Mat::zeros((n, width));
        value.slice_mut(s![.., offset..offset + d]).assign(self.value(a));
        self.push(value, Op::PadCols(a, offset))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Sums a list of scalars; an empty list yields a constant 0.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter().copied();
        match iter.next() {
            None => self.scalar(0.0),
            Some(first) => iter.fold(first, |acc, t| self.add(acc, t)),
        }
    }

    /// Summed cross-entropy of `targets` under a softmax restricted, row by
    /// row, to the column range `allowed[i]`. Columns outside the range carry
    /// an additive `-inf` and receive zero probability and zero gradient.
    pub fn masked_xent(&mut self, logits: Var, allowed: Vec<Range<usize>>, targets: Vec<usize>) -> Result<Var> {
        let z = self.value(logits);
        let (n, width) = z.dim();
        if allowed.len() != n || targets.len() != n {
            return Err(Error::Shape(format!(
                "masked_xent: {} rows, {} ranges, {} targets",
                n,
                allowed.len(),
                targets.len()
            )));
        }
        let mut probs = Mat::zeros((n, width));
        let mut loss = 0.0;
        for i in 0..n {
            let range = allowed[i].clone();
            let t = targets[i];
            if !range.contains(&t) || range.end > width {
                return Err(Error::Masked { row: i, token: t });
            }
            let row = z.row(i);
            let lse = log_sum_exp(row.slice(s![range.clone()]).iter().copied());
            loss += lse - row[t];
            for j in range {
                probs[[i, j]] = (row[j] - lse).exp();
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("masked_xent loss".into()));
        }
        Ok(self.push(Mat::from_elem((1, 1), loss), Op::MaskedXent { logits, allowed, targets, probs }))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, grow);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * &**c),
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|o, &x| {
                        if x <= 0.0 {
                            *o = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&node.value).for_each(|o, &y| *o *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|o, &x| *o *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(p, q)| p * q).sum();
                        Zip::from(ga.row_mut(i)).and(yr).and(gr).for_each(|o, &p, &q| *o = p * (q - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                    let gv = self.value(*gamma);
                    let d = normalized.ncols() as f64;
                    let ggamma = (&g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let mut gx = Mat::zeros(normalized.dim());
                    for i in 0..normalized.nrows() {
                        let dr = dxhat.row(i);
                        let xr = normalized.row(i);
                        let sum_d = dr.sum();
                        let sum_dx: f64 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                        let is = inv_std[i];
                        Zip::from(gx.row_mut(i))
                            .and(dr)
                            .and(xr)
                            .for_each(|o, &dv, &xv| *o = is / d * (d * dv - sum_d - xv * sum_dx));
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gather(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        ga.row_mut(r).scaled_add(1.0, &g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SpMM(m, a) => acc(&mut grads, *a, m.matmul_transposed(&g)),
                Op::PadCols(a, offset) => {
                    let w = self.value(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., *offset..*offset + w]).to_owned());
                }
                Op::Sum(a) => {
                    let scale = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).dim(), scale));
                }
                Op::MaskedXent { logits, allowed, targets, probs } => {
                    let scale = g[[0, 0]];
                    let mut gl = probs * scale;
                    for (i, (range, &t)) in allowed.iter().zip(targets).enumerate() {
                        debug_assert!(range.contains(&t));
                        gl[[i, t]] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }
}
