//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Each forward call records its result and the indices of its operands;
//! [`Tape::backward`] walks the records in reverse and accumulates adjoints.
//! The op set is exactly what the encoders and losses need.

use std::sync::Arc;

use crate::error::{Result, SvtError};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        scale: usize,
        offset: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    /// Masked entries have zero probability, so the backward pass needs no
    /// mask.
    Softmax {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    SumSquares(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reachable from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> SvtError {
    SvtError::Shape(format!("{op}: {}×{} vs {}×{}", a.0, a.1, b.0, b.1))
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Scalar GELU (tanh approximation) shared with test oracles.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..sa.0 {
            for (o, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a.0, row.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(value, Op::Gelu(a.0))
    }

    /// Row-wise layer normalization with learned `1 × c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(scale) != (1, cols) || self.shape(offset) != (1, cols) {
            return Err(shape_err("layer_norm", (rows, cols), self.shape(scale)));
        }
        let xv = self.value(x);
        let g = self.value(scale).data();
        let b = self.value(offset).data();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let n = cols as f64;
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                scale: scale.0,
                offset: offset.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Entries whose mask bit is `false` get probability
    /// exactly zero; every row must keep at least one entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(SvtError::Shape(format!(
                    "softmax mask of {} entries for {rows}×{cols} scores",
                    m.len()
                )));
            }
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if allowed(c) {
                    max = max.max(xv.get(r, c));
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(SvtError::Numeric(format!("softmax row {r} fully masked")));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (xv.get(r, c) - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(out, Op::Softmax { x: x.0 }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(SvtError::Shape(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x: x.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.shape(*p).0)
            .ok_or_else(|| SvtError::Empty("concat_cols of nothing".into()))?;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", (rows, total), pv.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Selects rows by index (repeats allowed). Embedding lookup and window
    /// partitioning are both gathers.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), cols);
        for (i, &src) in index.iter().enumerate() {
            if src >= rows {
                return Err(SvtError::Index {
                    index: src,
                    len: rows,
                });
            }
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        Ok(self.push(out, Op::GatherRows { x: x.0, index }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.shape(*p).1)
            .ok_or_else(|| SvtError::Empty("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), pv.shape()));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Column means as a `1 × c` row, summed in row order.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).0 == 0 {
            return Err(SvtError::Empty("mean over zero rows".into()));
        }
        let out = self.value(x).mean_rows();
        Ok(self.push(out, Op::MeanRows(x.0)))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Matrix::row_vector(vec![s]), Op::SumSquares(x.0))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`B × C`). Returns a `1 × 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if rows != targets.len() || rows == 0 {
            return Err(SvtError::Shape(format!(
                "cross_entropy over {rows} logit rows with {} targets",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        if !lv.is_finite() {
            return Err(SvtError::Numeric("cross-entropy logits".into()));
        }
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(SvtError::Label {
                    label: t,
                    classes: cols,
                });
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for c in 0..cols {
                probs.set(r, c, (row[c] - lse).exp());
            }
        }
        let value = Matrix::row_vector(vec![total / rows as f64]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(SvtError::Shape(
                "backward needs a scalar (1×1) output".into(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.column_sums());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let xv = &self.nodes[*a].value;
                    let mut ga = g.clone();
                    for (o, x) in ga.data_mut().iter_mut().zip(xv.data()) {
                        *o *= gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    scale,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gamma = self.nodes[*scale].value.data();
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let dy = g.row(r);
                        let h = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = dy[c] * gamma[c];
                            sum_d += d;
                            sum_dh += d * h[c];
                            gg[c] += dy[c] * h[c];
                            gb[c] += dy[c];
                        }
                        for c in 0..cols {
                            let d = dy[c] * gamma[c];
                            gx.set(r, c, inv_std[r] / n * (n * d - sum_d - h[c] * sum_dh));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *scale, Matrix::row_vector(gg));
                    accumulate(&mut grads, *offset, Matrix::row_vector(gb));
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let (rows, cols) = p.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx.set(r, c, pr[c] * (gr[c] - inner));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.nodes[*x].value.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.nodes[*p].value.shape();
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::GatherRows { x, index } => {
                    let (rows, cols) = self.nodes[*x].value.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for (i, &src) in index.iter().enumerate() {
                        for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.nodes[*p].value.shape();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        accumulate(&mut grads, *p, Matrix::from_vec(rows, cols, slice)?);
                    }
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.nodes[*x].value.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            gx.set(r, c, g.get(0, c) / n);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumSquares(x) => {
                    let mut gx = self.nodes[*x].value.clone();
                    let s = 2.0 * g.get(0, 0);
                    gx.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    let scale = g.get(0, 0) / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let v = gl.get(r, t);
                        gl.set(r, t, v - 1.0);
                    }
                    gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl Matrix {
    /// Column sums as a `1 × c` row (the adjoint of a row broadcast).
    fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols()];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix::row_vector(out)
    }
}
