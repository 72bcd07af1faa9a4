//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation as a node whose inputs precede it, so
//! the backward pass is a single sweep in reverse id order. Trainable leaves
//! are registered with [`Tape::param`]; constants never receive gradients.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Pick(Var, usize, usize),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm(Var),
    MeanRows(Var),
    NormalizeRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the node was not on the path to the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
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

    /// Trainable leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Adds `a` and `b`, broadcasting whichever is a single row when the row counts differ.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (self.value(a).rows(), self.value(b).rows());
        if ra == rb {
            self.add(a, b)
        } else if rb == 1 {
            self.add_row(a, b)
        } else if ra == 1 {
            self.add_row(b, a)
        } else {
            Err(shape_err("add_broadcast", self.value(a), self.value(b)))
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `factor · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| factor * x + shift);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, factor), rg)
    }

    /// Scalar node `s` (1×1) times matrix `a`.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape_err("mul_scalar", self.value(s), self.value(a)));
        }
        let value = self.value(a).scale(self.scalar(s));
        let rg = self.rg(s) || self.rg(a);
        Ok(self.push(value, Op::MulScalar(s, a), rg))
    }

    /// Entry (r, c) of `a` as a 1×1 node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let m = self.value(a);
        if r >= m.rows() || c >= m.cols() {
            return Err(Error::Argument(format!(
                "pick ({r}, {c}) outside {:?}",
                m.shape()
            )));
        }
        let value = Matrix::scalar(m.get(r, c));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Pick(a, r, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// Per-row standardization (no affine parameters).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let value = layer_norm(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a), rg)
    }

    /// Mean over rows, giving 1×cols.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// L2-normalizes each row; zero rows are an argument error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut value = m.clone();
        for r in 0..m.rows() {
            let norm = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Argument("normalizing a zero-norm row".into()));
            }
            value.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::NormalizeRows(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Matrix::hstack(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if targets.len() != m.rows() || m.rows() == 0 {
            return Err(Error::Argument(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                m.shape()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m.cols()) {
            return Err(Error::Argument(format!(
                "target class {t} outside {} classes",
                m.cols()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += log_sum_exp(m.row(r)) - m.get(r, t);
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    /// Forward value `hard`, backward identity into `soft` (straight-through estimator).
    pub fn straight_through(&mut self, hard: Matrix, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(shape_err("straight_through", &hard, self.value(soft)));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.0] != (1, 1) {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, g: Matrix| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.matmul_nt(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(dy)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, dy.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone())?;
                acc(*b, dy.clone())?;
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone())?;
                if self.rg(*row) {
                    let mut sum = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (s, &g) in sum.data_mut().iter_mut().zip(dy.row(r)) {
                            *s += g;
                        }
                    }
                    acc(*row, sum)?;
                }
            }
            Op::Affine(a, factor) => acc(*a, dy.scale(*factor))?,
            Op::MulScalar(s, a) => {
                if self.rg(*s) {
                    let ds: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    acc(*s, Matrix::scalar(ds))?;
                }
                if self.rg(*a) {
                    acc(*a, dy.scale(self.scalar(*s)))?;
                }
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Matrix::zeros(rows, cols);
                g.set(*r, *c, dy.get(0, 0));
                acc(*a, g)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    if x.get(r, c) > 0.0 {
                        dy.get(r, c)
                    } else {
                        0.0
                    }
                });
                acc(*a, g)?;
            }
            Op::Sigmoid(a) => {
                let g = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                    let s = y.get(r, c);
                    dy.get(r, c) * s * (1.0 - s)
                });
                acc(*a, g)?;
            }
            Op::RowSoftmax(a) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let inner: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (dr[c] - inner);
                    }
                }
                acc(*a, g)?;
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy = dr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std * (dr[c] - mean_d - yr[c] * mean_dy);
                    }
                }
                acc(*a, g)?;
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let g = Matrix::from_fn(rows, dy.cols(), |_, c| dy.get(0, c) / rows as f64);
                acc(*a, g)?;
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let proj: f64 = yr.iter().zip(dr).map(|(u, d)| u * d).sum();
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        *o = (dr[c] - yr[c] * proj) / norm;
                    }
                }
                acc(*a, g)?;
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(*a, g)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        acc(*p, dy.slice_cols(offset, offset + w)?)?;
                    }
                    offset += w;
                }
            }
            Op::Transpose(a) => acc(*a, dy.transpose())?,
            Op::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                acc(*a, Matrix::filled(rows, cols, dy.get(0, 0)))?;
            }
            Op::CrossEntropy(a, targets) => {
                let x = self.value(*a);
                let batch = targets.len() as f64;
                let mut g = row_softmax(x);
                for (r, &t) in targets.iter().enumerate() {
                    let v = g.get(r, t);
                    g.set(r, t, v - 1.0);
                }
                acc(*a, g.scale(dy.get(0, 0) / batch))?;
            }
            Op::StraightThrough(soft) => acc(*soft, dy.clone())?,
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub(crate) fn layer_norm(m: &Matrix) -> Matrix {
    let n = m.cols() as f64;
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    }
    out
}

/// Worst relative error between analytic and central-difference gradients, per parameter.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares [`Tape::backward`] against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate of every parameter.
///
/// `build_loss` receives a fresh tape and the parameter vars (in the order of
/// `params`) and must return a scalar loss node.
pub fn grad_check<F>(build_loss: F, params: &[Matrix], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Argument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |values: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build_loss(&mut tape, &vars)?;
        let l = tape.value(loss);
        if l.shape() != (1, 1) || !l.get(0, 0).is_finite() {
            return Err(Error::numerical("grad_check loss probe", l.get(0, 0)));
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let mut probe: Vec<Matrix> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst: f64 = 0.0;
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + epsilon;
            let (t, _, l) = eval(&probe)?;
            let up = t.scalar(l);
            probe[p].data_mut()[i] = orig - epsilon;
            let (t, _, l) = eval(&probe)?;
            let down = t.scalar(l);
            probe[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.push(worst);
    }
    Ok(GradReport {
        max_rel_error: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    #[test]
    fn identity_matmul_and_relu() {
        let mut t = Tape::new();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let i = t.constant(Matrix::identity(2));
        let xv = t.constant(x.clone());
        let y = t.matmul(i, xv).unwrap();
        assert_eq!(t.value(y), &x);
        let v = t.constant(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(v);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_classes() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::filled(1, 4, 0.3));
        for target in 0..4 {
            let ce = t.cross_entropy(l, &[target]).unwrap();
            assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.matmul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).get(0, 0), 6.0);
    }

    #[test]
    fn sum_of_linear_map_gradient_is_outer_product() {
        let mut rng = RngStream::new(8);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let x = Matrix::random_normal(4, 1, 1.0, &mut rng);
        let mut t = Tape::new();
        let wv = t.param(w.clone());
        let xv = t.constant(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap().get(wv);
        let expected = Matrix::filled(3, 1, 1.0).matmul_nt(&x).unwrap();
        assert!(g.max_abs_diff(&expected).unwrap() < 1e-15);

        let report = grad_check(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = t.matmul(p[0], xv)?;
                Ok(t.sum(y))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.worst() < 1e-8);
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut t = Tape::new();
        let a = t.param(Matrix::scalar(2.0));
        let b = t.param(Matrix::filled(2, 2, 1.0));
        let y = t.scale(a, 3.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(b), Matrix::zeros(2, 2));
        assert_eq!(g.get(a).get(0, 0), 3.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 1));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"));
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let mut rng = RngStream::new(1);
        let w = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let report = grad_check(
            |t, p| {
                let sq = t.matmul_nt(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-4,
        )
        .unwrap();
        assert!(report.worst() <= 1e-9, "{report:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = RngStream::new(42);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let row = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let s = Matrix::scalar(0.7);
        let report = grad_check(
            |t, p| {
                let (a, b, row, s) = (p[0], p[1], p[2], p[3]);
                let h = t.add_row(a, row)?;
                let h = t.layer_norm(h);
                let g = t.sigmoid(s);
                let h = t.mul_scalar(g, h)?;
                let h2 = t.normalize_rows(h)?;
                let h = t.add(h, h2)?;
                let at = t.transpose(a);
                let back = t.matmul(h, at)?;
                let sm = t.row_softmax(back);
                let left = t.slice_cols(h, 0, 2)?;
                let right = t.slice_cols(h, 2, 4)?;
                let cat = t.concat_cols(&[right, left])?;
                let z = t.matmul(cat, b)?;
                let z = t.relu(z);
                let pooled = t.mean_rows(sm);
                let pooled = t.matmul_nt(pooled, sm)?;
                let e = t.pick(pooled, 0, 1)?;
                let z = t.affine(z, 1.5, 0.2);
                let ce = t.cross_entropy(z, &[0, 1, 1])?;
                let extra = t.mul_scalar(e, ce)?;
                t.add(ce, extra)
            },
            &[a, b, row, s],
            1e-5,
        )
        .unwrap();
        assert!(report.worst() <= 1e-6, "{report:?}");
    }

    #[test]
    fn straight_through_passes_gradient_to_soft() {
        let mut t = Tape::new();
        let logits = t.param(Matrix::row_vector(&[0.2, 0.1]));
        let soft = t.row_softmax(logits);
        let st = t.straight_through(Matrix::row_vector(&[1.0, 0.0]), soft).unwrap();
        assert_eq!(t.value(st).data(), &[1.0, 0.0]);
        let w = t.constant(Matrix::row_vector(&[2.0, -1.0]));
        let prod = t.matmul_nt(st, w).unwrap();
        let g = t.backward(prod).unwrap().get(logits);
        // gradient of softmax·w
        let p = row_softmax(&Matrix::row_vector(&[0.2, 0.1]));
        let inner = 2.0 * p.get(0, 0) - p.get(0, 1);
        assert!((g.get(0, 0) - p.get(0, 0) * (2.0 - inner)).abs() < 1e-15);
    }
}
