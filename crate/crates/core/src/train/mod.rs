//! KL distillation of a projection head over frozen token embeddings.

mod optim;
mod trace;
mod tuple;

pub use optim::{lr_at_step, optimizer_step, AdamState, TrainConfig};
pub use trace::{read_trace, write_trace, LossTrace};
pub use tuple::{kl_div_loss, record_tuple, student_scores, tuple_loss, tuple_loss_and_grads, TrainingTuple, TupleGraph};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::heads::{build_head, HeadConfig, HeadParams};
use crate::rng::SeededRng;

/// PRNG stream used for epoch shuffling; the head init uses the base seed.
const SHUFFLE_STREAM: u64 = 1;

/// Hex SHA-256 over every tensor's little-endian bytes, in declaration order.
pub fn head_checksum(params: &HeadParams) -> String {
    let mut hasher = Sha256::new();
    for t in params.tensors() {
        for v in t.value.values() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean loss and mean gradients over a batch, summed in tuple order.
pub fn batch_loss_and_grads(params: &HeadParams, batch: &[&TrainingTuple]) -> Result<(f64, Vec<Matrix>)> {
    let per_tuple: Vec<(f64, Vec<Matrix>)> = batch
        .par_iter()
        .map(|t| tuple_loss_and_grads(params, t))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_tuple.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    Ok((loss * scale, grads.into_iter().map(|g| g.scale(scale)).collect()))
}

/// Trains a freshly initialized head; fully determined by the configs, the data and `train_cfg.seed`.
pub fn train_head(
    config: &HeadConfig,
    train_cfg: &TrainConfig,
    dataset: &[TrainingTuple],
) -> Result<(HeadParams, LossTrace)> {
    let params = build_head(config, train_cfg.seed)?;
    train_from(params, train_cfg, dataset)
}

/// Continues training from `params`.
pub fn train_from(
    mut params: HeadParams,
    train_cfg: &TrainConfig,
    dataset: &[TrainingTuple],
) -> Result<(HeadParams, LossTrace)> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let batch = train_cfg.batch_size;
    if dataset.len() < batch {
        return Err(Error::config(format!(
            "batch_size {batch} exceeds the {} available tuples",
            dataset.len()
        )));
    }
    for (i, t) in dataset.iter().enumerate() {
        t.validate().map_err(|e| Error::contract(format!("tuple {i}: {e}")))?;
        if t.dim() != params.config.input_dim {
            return Err(Error::Shape {
                op: "train_head",
                left: t.query.shape(),
                right: (params.config.input_dim, params.config.output_dim),
            });
        }
    }

    let mut rng = SeededRng::derived(train_cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let per_epoch = dataset.len() / batch;
    let mut state = AdamState::default();
    let mut trace = LossTrace::default();

    for step in 0..train_cfg.total_steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order.sort_unstable();
            rng.shuffle(&mut order);
        }
        let members: Vec<&TrainingTuple> = order[slot * batch..(slot + 1) * batch]
            .iter()
            .map(|&i| &dataset[i])
            .collect();
        let (loss, grads) = batch_loss_and_grads(&params, &members)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        let lr = lr_at_step(step, train_cfg)?;
        optimizer_step(&mut params, &grads, &mut state, lr, train_cfg)?;
        trace.losses.push(loss);
        trace.lrs.push(lr);
    }
    trace.checksum = head_checksum(&params);
    Ok((params, trace))
}
