//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value plus whatever
//! the reverse pass needs (winning indices, row norms, softmax targets).
//! [`Tape::backward`] walks the nodes in exact reverse order and adds each
//! contribution into the parents' gradient slots, so a value consumed by
//! several operations receives the sum of all of them.

use super::activation::Activation;
use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    ScaleConst(Var, f64),
    Activation(Var, Activation),
    Mul(Var, Var),
    RowNormalize { input: Var, eps: f64, norms: Vec<f64> },
    RowMax { input: Var, argmax: Vec<usize> },
    Sum(Var),
    SliceRows { input: Var, start: usize },
    Concat(Vec<Var>),
    KlDiv { student: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Operation record for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; used for token-to-token similarity tables.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Multiplies `x` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.value(x).shape(),
                right: sv.shape(),
            });
        }
        let out = self.value(x).scale(sv.get(0, 0));
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::ScaleConst(x, c))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Activation(x, kind))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::contract("row_l2_normalize needs at least one column"));
        }
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::RowNormalize { input: x, eps, norms }))
    }

    /// Per-row maximum as a column vector; ties go to the lowest column.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::contract("row_max over zero columns"));
        }
        let mut out = Matrix::zeros(xv.rows(), 1);
        let mut argmax = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (j, best) = first_argmax(xv.row(r));
            out.set(r, 0, best);
            argmax.push(j);
        }
        Ok(self.push(out, Op::RowMax { input: x, argmax }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{end} outside {} rows",
                xv.rows()
            )));
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows { input: x, start }))
    }

    /// Concatenates `1 × 1` values into a `1 × n` row.
    pub fn concat_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(Error::Shape {
                    op: "concat_scalars",
                    left: (1, 1),
                    right: v.shape(),
                });
            }
            values.push(v.get(0, 0));
        }
        let out = Matrix::row_vector(values);
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// MaxSim of already-normalized token rows: `Σᵢ maxⱼ qᵢ·dⱼ`.
    pub fn maxsim(&mut self, q: Var, d: Var) -> Result<Var> {
        let sims = self.matmul_nt(q, d)?;
        let best = self.row_max(sims)?;
        Ok(self.sum(best))
    }

    /// `KL(softmax(teacher) ‖ softmax(student))` for a `1 × n` student row.
    pub fn kl_div(&mut self, student: Var, teacher: &[f64]) -> Result<Var> {
        let sv = self.value(student);
        if sv.rows() != 1 || sv.cols() != teacher.len() {
            return Err(Error::contract(format!(
                "kl_div: student scores {:?} vs {} teacher scores",
                sv.shape(),
                teacher.len()
            )));
        }
        let value = kl_divergence(sv.values(), teacher);
        let target = softmax(teacher);
        Ok(self.push(Matrix::scalar(value), Op::KlDiv { student, target }))
    }

    /// Exact gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            // Parents always precede their consumer, so they live in `before`.
            let (before, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(g)?;
                    accumulate(before, *a, da);
                    accumulate(before, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_tn(self.value(*a))?;
                    accumulate(before, *a, da);
                    accumulate(before, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(before, *a, g.clone());
                    accumulate(before, *b, g.clone());
                }
                Op::AddRow(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.values_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(before, *x, g.clone());
                    accumulate(before, *bias, db);
                }
                Op::ScaleBy(x, s) => {
                    let sv = self.value(*s).get(0, 0);
                    let ds = dot(g.values(), self.value(*x).values());
                    accumulate(before, *x, g.scale(sv));
                    accumulate(before, *s, Matrix::scalar(ds));
                }
                Op::ScaleConst(x, c) => accumulate(before, *x, g.scale(*c)),
                Op::Activation(x, kind) => {
                    let pre = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &p) in dx.values_mut().iter_mut().zip(pre.values()) {
                        *d *= kind.derivative(p);
                    }
                    accumulate(before, *x, dx);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(before, *a, da);
                    accumulate(before, *b, db);
                }
                Op::RowNormalize { input, eps, norms } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for (r, &norm) in norms.iter().enumerate() {
                        let gr = g.row(r);
                        let dst = dx.row_mut(r);
                        if norm > *eps {
                            let yr = y.row(r);
                            let proj = dot(yr, gr);
                            for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                                *d = (gv - yv * proj) / norm;
                            }
                        } else {
                            for (d, &gv) in dst.iter_mut().zip(gr) {
                                *d = gv / eps;
                            }
                        }
                    }
                    accumulate(before, *input, dx);
                }
                Op::RowMax { input, argmax } => {
                    let (rows, cols) = self.value(*input).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for (r, &j) in argmax.iter().enumerate() {
                        dx.set(r, j, g.get(r, 0));
                    }
                    accumulate(before, *input, dx);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    accumulate(before, *x, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::SliceRows { input, start } => {
                    let (rows, cols) = self.value(*input).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(before, *input, dx);
                }
                Op::Concat(parts) => {
                    for (c, p) in parts.iter().enumerate() {
                        accumulate(before, *p, Matrix::scalar(g.get(0, c)));
                    }
                }
                Op::KlDiv { student, target } => {
                    let p = softmax(self.value(*student).values());
                    let scale = g.get(0, 0);
                    let ds: Vec<f64> = p.iter().zip(target).map(|(ps, pt)| scale * (ps - pt)).collect();
                    accumulate(before, *student, Matrix::row_vector(ds));
                }
            }
        }

        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn first_argmax(row: &[f64]) -> (usize, f64) {
    let mut best_j = 0;
    let mut best = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            best_j = j;
        }
    }
    (best_j, best)
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = x.iter().map(|v| v - max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}

/// `KL(softmax(teacher) ‖ softmax(student))`, clamped at zero against rounding.
pub(crate) fn kl_divergence(student: &[f64], teacher: &[f64]) -> f64 {
    let ls = log_softmax(student);
    let lt = log_softmax(teacher);
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .map(|(&t, &s)| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() * (t - s) })
        .sum();
    kl.max(0.0)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; values the loss does not depend on get exact zeros.
    pub fn get(&self, v: Var) -> Matrix {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) if g.shape() == self.shapes[v.0] => g.clone(),
            _ => {
                let (r, c) = self.shapes.get(v.0).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }
}
