//! Inference-time evaluation: chunked logit computation over a dataset.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::forward::{build_graph, Batch, Mode};
use crate::model::{Method, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tape;

/// Compute logits for every example in `ds`, in dataset order, processing
/// `chunk` examples per graph. Inference mode: conditional methods see the
/// uniform label distribution and the context of the chunk being scored.
///
/// Returns a row-major `[ds.len(), num_classes]` matrix.
pub fn logits_for(
    cfg: &ModelConfig,
    method: Method,
    frozen: &ParamSet,
    trainable: &ParamSet,
    ds: &Dataset,
    chunk: usize,
) -> Result<Vec<f64>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(ds.len() * cfg.num_classes);
    let mut start = 0usize;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = Batch::from_dataset(ds, &idx)?;
        let mut tape = Tape::new();
        let graph = build_graph(&mut tape, cfg, method, frozen, trainable, &batch, Mode::Inference)?;
        out.extend_from_slice(tape.value(graph.logits));
        start = end;
    }
    Ok(out)
}

/// Classification accuracy of a model on a dataset (argmax of chunked logits;
/// ties resolve to the lowest class index).
pub fn evaluate_accuracy(
    cfg: &ModelConfig,
    method: Method,
    frozen: &ParamSet,
    trainable: &ParamSet,
    ds: &Dataset,
    chunk: usize,
) -> Result<f64> {
    let logits = logits_for(cfg, method, frozen, trainable, ds, chunk)?;
    crate::metrics::accuracy(&logits, &ds.labels(), cfg.num_classes)
}
