//! One client's local optimization between synchronization rounds.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::partition::ClientPartition;
use crate::model::forward::{build_graph, Batch, Mode};
use crate::model::{Method, ModelConfig};
use crate::params::ParamSet;
use crate::rng::substream;
use crate::tensor::{AdamWConfig, Optimizer, Tape};

/// Local-optimization hyperparameters, shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig { epochs: 1, batch_size: 16, lr: 1e-2, weight_decay: 0.01 }
    }
}

/// The result of one client's round of local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client_id: usize,
    /// Trained copy of the trainable set (equals the broadcast on abort).
    pub params: ParamSet,
    /// Aggregation weight: the client's example count.
    pub weight: usize,
    /// Mean training loss per step, in step order.
    pub losses: Vec<f64>,
    /// A non-finite loss or gradient appeared; the update must be discarded.
    pub aborted: bool,
}

impl LocalOutcome {
    /// Mean loss over the round, `NaN` when no step completed.
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            f64::NAN
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

/// Train a copy of the broadcast trainable set `theta` on one client's shard
/// for `lcfg.epochs` local epochs of AdamW mini-batch updates.
///
/// Batch order comes from the client-and-round substream, so results do not
/// depend on scheduling. A non-finite loss or gradient marks the outcome
/// `aborted` (the caller excludes it from aggregation); structural failures
/// (bad shapes, missing parameters) are hard errors instead.
pub fn local_train(
    cfg: &ModelConfig,
    method: Method,
    frozen: &ParamSet,
    theta: &ParamSet,
    ds: &Dataset,
    part: &ClientPartition,
    lcfg: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<LocalOutcome> {
    if part.indices.is_empty() {
        return Err(Error::Partition(format!("client {} has no examples", part.client_id)));
    }
    if lcfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut rng = substream(seed, "client", &[part.client_id as u64, round as u64]);
    let mut params = theta.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut opt = Optimizer::new(AdamWConfig::new(lcfg.lr, lcfg.weight_decay));
    let mut losses = Vec::new();

    let abort = |params: ParamSet, losses: Vec<f64>| LocalOutcome {
        client_id: part.client_id,
        params,
        weight: part.indices.len(),
        losses,
        aborted: true,
    };

    for _epoch in 0..lcfg.epochs {
        let mut order = part.indices.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(lcfg.batch_size) {
            let batch = Batch::from_dataset(ds, chunk)?;
            let mut tape = Tape::new();
            let graph = build_graph(&mut tape, cfg, method, frozen, &params, &batch, Mode::Train)?;
            let loss_id = graph.loss.expect("training batches carry labels");
            let loss = tape.value(loss_id)[0];
            if !loss.is_finite() {
                return Ok(abort(theta.clone(), losses));
            }
            losses.push(loss);
            if let Err(e) = tape.backward(loss_id) {
                return match e {
                    Error::PoisonedGradient(_) => Ok(abort(theta.clone(), losses)),
                    other => Err(other),
                };
            }
            for name in &names {
                let id = graph.binds[name];
                if let Some(grad) = tape.grad(id) {
                    let grad = grad.to_vec();
                    if let Err(e) = opt.step(name, params.get_mut(name)?, &grad) {
                        return match e {
                            Error::PoisonedGradient(_) => Ok(abort(theta.clone(), losses)),
                            other => Err(other),
                        };
                    }
                }
            }
        }
    }
    Ok(LocalOutcome {
        client_id: part.client_id,
        params,
        weight: part.indices.len(),
        losses,
        aborted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, CorpusSpec};
    use crate::model::{init_backbone, init_for_method, trainable_names};
    use crate::tensor::Tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            max_seq_len: 8,
            d: 16,
            n_layers: 1,
            n_heads: 2,
            ffn: 24,
            r: 2,
            num_classes: 4,
            t: 4,
            s: 4,
        }
    }

    fn tiny_data() -> Dataset {
        let spec = CorpusSpec {
            vocab_size: 64,
            num_classes: 4,
            num_groups: 2,
            train_per_cell: 8,
            test_per_cell: 2,
            seq_len: 8,
            signal: 0.5,
            divergence: 0.8,
            realization: 0.9,
            pretrain_examples: 10,
            seed: 77,
        };
        synthesize_corpus(&spec).unwrap().train
    }

    fn whole_set_client(ds: &Dataset) -> ClientPartition {
        ClientPartition { client_id: 0, indices: (0..ds.len()).collect(), group: None }
    }

    #[test]
    fn zero_epochs_returns_the_broadcast_unchanged() {
        let cfg = tiny_cfg();
        let ds = tiny_data();
        let backbone = init_backbone(&cfg, &mut substream(1, "init-backbone", &[]));
        let (frozen, theta) = init_for_method(&cfg, Method::Adapter, &backbone, 1).unwrap();
        let lcfg = LocalConfig { epochs: 0, ..LocalConfig::default() };
        let out = local_train(
            &cfg, Method::Adapter, &frozen, &theta, &ds, &whole_set_client(&ds), &lcfg, 5, 1,
        )
        .unwrap();
        assert!(out.params.bitwise_eq(&theta));
        assert!(out.losses.is_empty());
        assert!(!out.aborted);
        assert_eq!(out.weight, ds.len());
    }

    #[test]
    fn training_reduces_loss_and_returns_exactly_the_trainable_set() {
        let cfg = tiny_cfg();
        let ds = tiny_data();
        let backbone = init_backbone(&cfg, &mut substream(2, "init-backbone", &[]));
        for method in [Method::C2a, Method::Adapter] {
            let (frozen, theta) = init_for_method(&cfg, method, &backbone, 2).unwrap();
            let lcfg = LocalConfig { epochs: 10, batch_size: 16, lr: 3e-3, weight_decay: 0.01 };
            let out = local_train(
                &cfg, method, &frozen, &theta, &ds, &whole_set_client(&ds), &lcfg, 6, 1,
            )
            .unwrap();
            assert!(!out.aborted);
            let first = out.losses.first().copied().unwrap();
            let last_epoch = &out.losses[out.losses.len() - 2..];
            let late = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
            assert!(
                late < first,
                "{}: loss did not fall ({first} -> {late})",
                method.label()
            );
            // returned parameter names = the method's trainable contract
            let mut got: Vec<String> = out.params.names().map(String::from).collect();
            got.sort();
            assert_eq!(got, trainable_names(&cfg, method), "{}", method.label());
            // the broadcast and the frozen set are untouched
            assert!(frozen.iter().all(|(_, t)| !t.requires_grad));
        }
    }

    #[test]
    fn local_training_is_deterministic_per_client_and_round() {
        let cfg = tiny_cfg();
        let ds = tiny_data();
        let backbone = init_backbone(&cfg, &mut substream(3, "init-backbone", &[]));
        let (frozen, theta) = init_for_method(&cfg, Method::C2a, &backbone, 3).unwrap();
        let part = whole_set_client(&ds);
        let lcfg = LocalConfig::default();
        let run = |round: usize| {
            local_train(&cfg, Method::C2a, &frozen, &theta, &ds, &part, &lcfg, 7, round).unwrap()
        };
        let (a, b) = (run(1), run(1));
        assert!(a.params.bitwise_eq(&b.params));
        assert_eq!(a.losses, b.losses);
        // a different round reshuffles batches
        let c = run(2);
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn poisoned_broadcast_aborts_instead_of_erroring() {
        let cfg = tiny_cfg();
        let ds = tiny_data();
        let backbone = init_backbone(&cfg, &mut substream(4, "init-backbone", &[]));
        let (frozen, mut theta) = init_for_method(&cfg, Method::Adapter, &backbone, 4).unwrap();
        let poisoned = Tensor::new(
            vec![cfg.d, cfg.num_classes],
            vec![f64::NAN; cfg.d * cfg.num_classes],
        )
        .unwrap();
        *theta.get_mut("head.weight").unwrap() = poisoned;
        let out = local_train(
            &cfg,
            Method::Adapter,
            &frozen,
            &theta,
            &ds,
            &whole_set_client(&ds),
            &LocalConfig::default(),
            8,
            1,
        )
        .unwrap();
        assert!(out.aborted);
        assert!(out.params.bitwise_eq(&theta), "aborted client returns the broadcast untouched");
    }

    #[test]
    fn empty_client_is_a_partition_error() {
        let cfg = tiny_cfg();
        let ds = tiny_data();
        let backbone = init_backbone(&cfg, &mut substream(5, "init-backbone", &[]));
        let (frozen, theta) = init_for_method(&cfg, Method::Adapter, &backbone, 5).unwrap();
        let empty = ClientPartition { client_id: 3, indices: vec![], group: None };
        assert!(matches!(
            local_train(
                &cfg,
                Method::Adapter,
                &frozen,
                &theta,
                &ds,
                &empty,
                &LocalConfig::default(),
                9,
                1
            ),
            Err(Error::Partition(_))
        ));
    }
}
