//! Per-site conditioning vectors for generated adapters.
//!
//! A conditioning vector `I` for one adapter site is the sum of three parts:
//! a *label embedding* (affine map of the batch's mean label distribution),
//! a *context embedding* (affine map of a max-pooled, per-example-normalized
//! hidden-state summary of the batch), and a learned *site-index embedding*.
//! At inference time the label distribution is replaced by the uniform
//! distribution, so the vector never depends on test labels.

use crate::error::{Error, Result};
use crate::tensor::{NormMode, PoolMode, Tape, TensorId};

/// Mean one-hot vector of a labeled batch.
pub fn batch_label_distribution(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("batch_label_distribution", "empty batch"));
    }
    let mut dist = vec![0.0; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::IndexOutOfRange(format!(
                "label {y} out of range {num_classes}"
            )));
        }
        dist[y] += 1.0;
    }
    let n = labels.len() as f64;
    for v in &mut dist {
        *v /= n;
    }
    Ok(dist)
}

/// The label distribution substituted at evaluation time: uniform over classes.
pub fn inference_label_distribution(num_classes: usize) -> Vec<f64> {
    vec![1.0 / num_classes as f64; num_classes]
}

/// Label embedding: `dist · W_L + b_L` for a `[1, C]` distribution input.
///
/// The distribution row must sum to 1 (it is a probability vector by
/// contract); violation is a contract error.
pub fn label_embedding(
    tape: &mut Tape,
    dist: TensorId,
    w_label: TensorId,
    b_label: TensorId,
) -> Result<TensorId> {
    let s: f64 = tape.value(dist).iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "label distribution sums to {s}, expected 1"
        )));
    }
    let proj = tape.matmul(dist, w_label)?;
    tape.add_row_broadcast(proj, b_label)
}

/// Context embedding of a `[B, L, d]` hidden-state tensor.
///
/// Per example: mean over positions, then ℓ2 normalization; the batch is
/// summarized by an elementwise max over examples, then affinely mapped to
/// the conditioning width. Returns a `[1, t]` tensor.
pub fn context_embedding(
    tape: &mut Tape,
    hidden: TensorId,
    w_ctx: TensorId,
    b_ctx: TensorId,
) -> Result<TensorId> {
    if tape.shape(hidden).len() != 3 {
        return Err(Error::invalid("context_embedding", "hidden must be [B, L, d]"));
    }
    let d = tape.shape(hidden)[2];
    let mean = tape.pool(hidden, 1, PoolMode::Mean)?; // [B, d]
    let unit = tape.normalize_rows(mean); // [B, d]
    let pooled = tape.pool(unit, 0, PoolMode::Max)?; // [d]
    let row = tape.reshape(pooled, vec![1, d])?;
    let proj = tape.matmul(row, w_ctx)?;
    tape.add_row_broadcast(proj, b_ctx)
}

/// Sum the available conditioning parts with the site-index embedding row.
pub fn compose_client_embedding(
    tape: &mut Tape,
    label: Option<TensorId>,
    context: Option<TensorId>,
    site_row: TensorId,
) -> Result<TensorId> {
    let mut acc = site_row;
    if let Some(le) = label {
        acc = tape.add(acc, le)?;
    }
    if let Some(ce) = context {
        acc = tape.add(acc, ce)?;
    }
    Ok(acc)
}

/// Whole-vector ℓ2 normalization helper used by tests and probes.
pub fn l2_normalize(tape: &mut Tape, v: TensorId) -> TensorId {
    tape.normalize(v, NormMode::L2Vector)
}
