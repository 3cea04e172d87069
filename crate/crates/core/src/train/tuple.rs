use crate::autodiff::{kl_divergence, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::heads::{BoundHead, HeadParams};

/// One distillation example: raw (un-projected) query and candidate tokens
/// plus the teacher's score for every candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    pub query: Matrix,
    pub docs: Vec<Matrix>,
    pub teacher_scores: Vec<f64>,
}

impl TrainingTuple {
    pub fn new(query: Matrix, docs: Vec<Matrix>, teacher_scores: Vec<f64>) -> Result<Self> {
        let t = Self {
            query,
            docs,
            teacher_scores,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.query.cols()
    }

    pub fn n_way(&self) -> usize {
        self.docs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.docs.len() < 2 || self.docs.len() != self.teacher_scores.len() {
            return Err(Error::contract(format!(
                "tuple needs ≥ 2 candidates with one teacher score each, got {} candidates and {} scores",
                self.docs.len(),
                self.teacher_scores.len()
            )));
        }
        if self.query.rows() == 0 || self.docs.iter().any(|d| d.rows() == 0) {
            return Err(Error::contract("tuple token matrices must be non-empty"));
        }
        let d = self.dim();
        if let Some(bad) = self.docs.iter().find(|m| m.cols() != d) {
            return Err(Error::Shape {
                op: "training tuple",
                left: self.query.shape(),
                right: bad.shape(),
            });
        }
        if !self.teacher_scores.iter().all(|s| s.is_finite()) {
            return Err(Error::contract("teacher scores must be finite"));
        }
        Ok(())
    }
}

/// `KL(softmax(teacher) ‖ softmax(student))` at temperature 1.
pub fn kl_div_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.len() != teacher.len() || student.len() < 2 {
        return Err(Error::contract(format!(
            "kl_div_loss: {} student vs {} teacher scores (need equal lengths ≥ 2)",
            student.len(),
            teacher.len()
        )));
    }
    if !student.iter().chain(teacher).all(|v| v.is_finite()) {
        return Err(Error::contract("kl_div_loss: non-finite score"));
    }
    Ok(kl_divergence(student, teacher))
}

/// Handles into the graph recorded for one tuple.
#[derive(Clone, Debug)]
pub struct TupleGraph {
    /// All raw tokens stacked as `[query; doc₀; doc₁; …]`.
    pub tokens: Var,
    /// Head output for `tokens`, row-normalized.
    pub projected: Var,
    /// First row of each document inside `tokens`.
    pub doc_offsets: Vec<usize>,
    /// `1 × n` student MaxSim scores.
    pub student: Var,
    pub loss: Var,
}

/// Records projection, MaxSim scoring and the KL loss of `tuple` on `tape`.
pub fn record_tuple(tape: &mut Tape, head: &BoundHead, tuple: &TrainingTuple) -> Result<TupleGraph> {
    let mut parts = vec![&tuple.query];
    parts.extend(tuple.docs.iter());
    let tokens = tape.leaf(Matrix::vstack(&parts)?);
    let projected = head.forward(tape, tokens)?;

    let m = tuple.query.rows();
    let q = tape.slice_rows(projected, 0, m)?;
    let mut doc_offsets = Vec::with_capacity(tuple.docs.len());
    let mut scores = Vec::with_capacity(tuple.docs.len());
    let mut start = m;
    for doc in &tuple.docs {
        doc_offsets.push(start);
        let d = tape.slice_rows(projected, start, start + doc.rows())?;
        scores.push(tape.maxsim(q, d)?);
        start += doc.rows();
    }
    let student = tape.concat_scalars(&scores)?;
    let loss = tape.kl_div(student, &tuple.teacher_scores)?;
    Ok(TupleGraph {
        tokens,
        projected,
        doc_offsets,
        student,
        loss,
    })
}

fn check_dims(params: &HeadParams, tuple: &TrainingTuple) -> Result<()> {
    tuple.validate()?;
    if tuple.dim() != params.config.input_dim {
        return Err(Error::Shape {
            op: "tuple vs head input",
            left: tuple.query.shape(),
            right: (params.config.input_dim, params.config.output_dim),
        });
    }
    Ok(())
}

/// Student MaxSim scores for every candidate of `tuple`.
pub fn student_scores(params: &HeadParams, tuple: &TrainingTuple) -> Result<Vec<f64>> {
    check_dims(params, tuple)?;
    let mut tape = Tape::new();
    let head = params.bind(&mut tape);
    let g = record_tuple(&mut tape, &head, tuple)?;
    Ok(tape.value(g.student).values().to_vec())
}

/// Loss of one tuple without the backward pass.
pub fn tuple_loss(params: &HeadParams, tuple: &TrainingTuple) -> Result<f64> {
    check_dims(params, tuple)?;
    let mut tape = Tape::new();
    let head = params.bind(&mut tape);
    let g = record_tuple(&mut tape, &head, tuple)?;
    Ok(tape.value(g.loss).get(0, 0))
}

/// Loss of one tuple and its gradient for every head tensor in declaration order.
pub fn tuple_loss_and_grads(params: &HeadParams, tuple: &TrainingTuple) -> Result<(f64, Vec<Matrix>)> {
    check_dims(params, tuple)?;
    let mut tape = Tape::new();
    let head = params.bind(&mut tape);
    let g = record_tuple(&mut tape, &head, tuple)?;
    let loss = tape.value(g.loss).get(0, 0);
    let grads = tape.backward(g.loss)?;
    Ok((loss, head.gradients(&grads)))
}
