//! Masked-token pretraining of the encoder backbone.
//!
//! Stands in for a published pretrained language model at desk scale: the
//! encoder learns the corpus's unigram/band structure from a label-free pool
//! so that adapters later fine-tune nontrivial frozen features. Deterministic
//! given the seed; the returned parameters are marked non-trainable.

use rand::Rng;

use crate::data::MASK_TOKEN;
use crate::error::{Error, Result};
use crate::model::forward::build_masked_token_graph;
use crate::model::{init_backbone, ModelConfig};
use crate::params::ParamSet;
use crate::rng::substream;
use crate::tensor::{AdamWConfig, Optimizer, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-position masking probability (at least one position per sequence
    /// is always masked).
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 300, batch: 32, lr: 1e-3, weight_decay: 0.01, mask_prob: 0.15 }
    }
}

/// Mask a batch of sequences: returns (masked flat tokens, flat positions,
/// original targets).
fn mask_batch<R: Rng>(
    rng: &mut R,
    seqs: &[&[u32]],
    l: usize,
    mask_prob: f64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(seqs.len() * l);
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (row, seq) in seqs.iter().enumerate() {
        let mut any = false;
        let base = row * l;
        for (col, &t) in seq.iter().enumerate() {
            if rng.gen::<f64>() < mask_prob {
                tokens.push(MASK_TOKEN as usize);
                positions.push(base + col);
                targets.push(t as usize);
                any = true;
            } else {
                tokens.push(t as usize);
            }
        }
        if !any {
            let col = rng.gen_range(0..l);
            targets.push(tokens[base + col]);
            tokens[base + col] = MASK_TOKEN as usize;
            positions.push(base + col);
        }
    }
    (tokens, positions, targets)
}

/// Train a fresh backbone on masked-token prediction, then freeze it.
///
/// Returns the frozen parameters and the masked-token accuracy on a held-out
/// evaluation batch drawn after training.
pub fn pretrain_backbone(
    corpus: &[Vec<u32>],
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(ParamSet, f64)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    cfg.validate()?;
    let l = corpus[0].len();
    if l > cfg.max_seq_len || corpus.iter().any(|s| s.len() != l) {
        return Err(Error::Data("pretraining sequences must share one length <= max_seq_len".into()));
    }

    let mut backbone = init_backbone(cfg, &mut substream(seed, "init-backbone", &[]));
    let mut opt = Optimizer::new(AdamWConfig::new(pcfg.lr, pcfg.weight_decay));
    let mut rng = substream(seed, "pretrain", &[]);

    for _step in 0..pcfg.steps {
        let rows: Vec<&[u32]> = (0..pcfg.batch)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].as_slice())
            .collect();
        let (tokens, positions, targets) = mask_batch(&mut rng, &rows, l, pcfg.mask_prob);
        let mut tape = Tape::new();
        let (_logits, loss, binds) = build_masked_token_graph(
            &mut tape, cfg, &backbone, true, &tokens, pcfg.batch, l, &positions, &targets,
        )?;
        tape.backward(loss.expect("training graph has a loss"))?;
        for (name, id) in &binds {
            if let Some(grad) = tape.grad(*id) {
                let grad = grad.to_vec();
                opt.step(name, backbone.get_mut(name)?, &grad)?;
            }
        }
    }

    // held-out evaluation batch from a continuation of the same stream
    let eval_rows: Vec<&[u32]> = (0..pcfg.batch.max(8))
        .map(|_| corpus[rng.gen_range(0..corpus.len())].as_slice())
        .collect();
    let (tokens, positions, targets) = mask_batch(&mut rng, &eval_rows, l, pcfg.mask_prob);
    let mut tape = Tape::new();
    let (logits, _, _) = build_masked_token_graph(
        &mut tape, cfg, &backbone, false, &tokens, eval_rows.len(), l, &positions, &targets,
    )?;
    let lv = tape.value(logits);
    let v = cfg.vocab_size;
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(row, &want)| {
            let r = &lv[row * v..(row + 1) * v];
            let mut best = 0usize;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best == want
        })
        .count();
    let acc = hits as f64 / targets.len() as f64;

    backbone.set_trainable(false);
    Ok((backbone, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, CorpusSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            max_seq_len: 8,
            d: 16,
            n_layers: 1,
            n_heads: 2,
            ffn: 32,
            r: 2,
            num_classes: 4,
            t: 4,
            s: 4,
        }
    }

    fn tiny_corpus() -> Vec<Vec<u32>> {
        let spec = CorpusSpec {
            vocab_size: 64,
            num_classes: 4,
            num_groups: 2,
            train_per_cell: 5,
            test_per_cell: 2,
            seq_len: 8,
            signal: 0.5,
            divergence: 0.8,
            realization: 0.9,
            pretrain_examples: 400,
            seed: 11,
        };
        synthesize_corpus(&spec).unwrap().pretrain
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let cfg = tiny_model();
        let p = PretrainConfig::default();
        assert!(matches!(
            pretrain_backbone(&[], &cfg, &p, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn pretraining_is_deterministic_and_freezes_parameters() {
        let cfg = tiny_model();
        let pcfg = PretrainConfig { steps: 5, batch: 8, ..PretrainConfig::default() };
        let corpus = tiny_corpus();
        let (a, acc_a) = pretrain_backbone(&corpus, &cfg, &pcfg, 3).unwrap();
        let (b, acc_b) = pretrain_backbone(&corpus, &cfg, &pcfg, 3).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(acc_a, acc_b);
        assert!(a.iter().all(|(_, t)| !t.requires_grad));
        let (c, _) = pretrain_backbone(&corpus, &cfg, &pcfg, 4).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn masked_accuracy_beats_the_uniform_baseline() {
        let cfg = tiny_model();
        let pcfg = PretrainConfig { steps: 200, batch: 32, ..PretrainConfig::default() };
        let corpus = tiny_corpus();
        let (_, acc) = pretrain_backbone(&corpus, &cfg, &pcfg, 5).unwrap();
        let baseline = 1.0 / cfg.vocab_size as f64;
        assert!(
            acc > baseline * 3.0,
            "masked accuracy {acc} not clearly above uniform baseline {baseline}"
        );
    }

    #[test]
    fn masking_always_covers_at_least_one_position_per_sequence() {
        let mut rng = substream(9, "mask-test", &[]);
        let seq = vec![5u32; 6];
        let rows: Vec<&[u32]> = vec![&seq; 10];
        // probability 0 would mask nothing without the guarantee
        let (tokens, positions, targets) = mask_batch(&mut rng, &rows, 6, 0.0);
        assert_eq!(positions.len(), 10);
        assert_eq!(targets, vec![5usize; 10]);
        for (row, &p) in positions.iter().enumerate() {
            assert_eq!(p / 6, row);
            assert_eq!(tokens[p], MASK_TOKEN as usize);
        }
    }
}
