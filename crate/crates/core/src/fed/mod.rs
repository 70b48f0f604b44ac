//! Synchronous FedAvg scheduling: client sampling, parallel local training,
//! size-weighted aggregation, per-round evaluation and drift probing.
//!
//! Every stochastic choice draws from a named substream of the experiment
//! seed, and client results are combined in client-id order, so a given
//! configuration produces bit-identical logs regardless of worker count or
//! completion order.

pub mod local;
pub mod partition;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::linear_cka;
use crate::model::eval::{evaluate_accuracy, logits_for};
use crate::model::{init_for_method, Method, ModelConfig};
use crate::params::ParamSet;
use crate::rng::substream;
use local::{local_train, LocalConfig};
use partition::ClientPartition;

/// Federation-level hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedConfig {
    /// Fraction of clients sampled each round, in (0, 1].
    pub fraction: f64,
    /// Number of synchronization rounds to run.
    pub rounds: usize,
    pub local: LocalConfig,
    /// Examples per evaluation forward pass.
    pub eval_chunk: usize,
    /// Held-out examples in the fixed drift probe.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            fraction: 0.25,
            rounds: 40,
            local: LocalConfig::default(),
            eval_chunk: 64,
            probe_size: 256,
            seed: 0,
        }
    }
}

/// One sampled client's contribution to a round.
#[derive(Debug, Clone, Serialize)]
pub struct ClientRound {
    pub client_id: usize,
    /// Mean local training loss over the round's steps.
    pub loss: f64,
    /// Representation similarity between the trained local model and the
    /// broadcast global model on the fixed probe; `None` when the client
    /// aborted or the similarity is undefined.
    pub cka_drift: Option<f64>,
    pub aborted: bool,
}

/// Everything observable about one synchronization round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    /// 1-indexed round number.
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientRound>,
    /// Global-model accuracy on the full test set after aggregation.
    pub test_acc: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Full experiment record: round-0 evaluation plus every round log.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentLog {
    /// Test accuracy of the initialized global model before any training.
    pub init_acc: f64,
    pub rounds: Vec<RoundLog>,
}

impl ExperimentLog {
    /// Post-round accuracies (round 1 first; no init entry).
    pub fn accuracy_trace(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.test_acc).collect()
    }

    pub fn final_acc(&self) -> f64 {
        self.rounds.last().map(|r| r.test_acc).unwrap_or(self.init_acc)
    }

    /// Total (bytes_up, bytes_down) across rounds.
    pub fn total_bytes(&self) -> (u64, u64) {
        self.rounds
            .iter()
            .fold((0, 0), |(u, d), r| (u + r.bytes_up, d + r.bytes_down))
    }
}

/// Uniform sample of `⌈fraction·k⌉` distinct client ids for a round, in
/// ascending order, from the round's dedicated substream.
pub fn sample_clients(k: usize, fraction: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("num_clients", "need at least one client"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("{fraction} not in (0, 1]")));
    }
    let exact = fraction * k as f64;
    // ⌈exact⌉ with protection against float noise (0.1 × 30 = 3.0000…04)
    let m = if (exact - exact.round()).abs() < 1e-9 {
        exact.round() as usize
    } else {
        exact.ceil() as usize
    }
    .clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    let mut rng = substream(seed, "sampling", &[round as u64]);
    for i in 0..m {
        let j = rand::Rng::gen_range(&mut rng, i..k);
        ids.swap(i, j);
    }
    let mut out = ids[..m].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Size-weighted FedAvg: `θ′ = Σ αᵢ·θᵢ` with `αᵢ = nᵢ/Σnⱼ` renormalized
/// over the participants.
///
/// Computed in delta form `θ′ = θ₀ + Σ αᵢ·(θᵢ − θ₀)`, which is the same
/// convex combination but makes aggregation of identical updates return
/// them bit-for-bit (the deltas vanish exactly).
pub fn fedavg_aggregate(updates: &[(&ParamSet, usize)]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    }
    let total: f64 = updates.iter().map(|(_, n)| *n as f64).sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("zero total aggregation weight".into()));
    }
    let base = updates[0].0;
    for (p, _) in &updates[1..] {
        if !base.same_schema(p) {
            return Err(Error::Aggregation("parameter schema mismatch across updates".into()));
        }
    }
    let mut out = base.clone();
    for (p, n) in updates {
        let w = *n as f64 / total;
        for (name, t) in out.iter_mut() {
            let src = p.get(name)?.data();
            let b = base.get(name)?.data();
            for ((o, &x), &x0) in t.data_mut().iter_mut().zip(src).zip(b) {
                *o += w * (x - x0);
            }
        }
    }
    Ok(out)
}

/// The running state of one federated experiment.
pub struct Federation {
    pub model: ModelConfig,
    pub method: Method,
    pub cfg: FedConfig,
    /// Parameters broadcast implicitly (never trained or transmitted).
    pub frozen: ParamSet,
    /// Current global trainable snapshot.
    pub theta: ParamSet,
    pub train: Dataset,
    pub test: Dataset,
    /// Fixed held-out examples for the drift probe.
    pub probe: Dataset,
    pub parts: Vec<ClientPartition>,
    /// Rounds completed so far.
    pub round: usize,
    trainable_scalars: usize,
}

impl Federation {
    /// Initialize the global model from a backbone and validate the
    /// partition (disjoint, covering, nonempty clients).
    pub fn new(
        model: ModelConfig,
        method: Method,
        cfg: FedConfig,
        backbone: &ParamSet,
        train: Dataset,
        test: Dataset,
        parts: Vec<ClientPartition>,
    ) -> Result<Self> {
        model.validate()?;
        if parts.is_empty() {
            return Err(Error::Partition("no clients".into()));
        }
        let mut seen = vec![false; train.len()];
        for p in &parts {
            if p.indices.is_empty() {
                return Err(Error::Partition(format!("client {} has no examples", p.client_id)));
            }
            for &i in &p.indices {
                if i >= train.len() {
                    return Err(Error::Partition(format!("client {} index {i} out of range", p.client_id)));
                }
                if seen[i] {
                    return Err(Error::Partition(format!("example {i} assigned to two clients")));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Partition("partition does not cover the training set".into()));
        }
        if test.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }

        let (frozen, theta) = init_for_method(&model, method, backbone, cfg.seed)?;
        let trainable_scalars = theta.scalar_count();

        // fixed probe: a deterministic held-out draw from the test set
        let m = cfg.probe_size.clamp(1, test.len());
        let mut ids: Vec<usize> = (0..test.len()).collect();
        let mut rng = substream(cfg.seed, "probe", &[]);
        for i in 0..m {
            let j = rand::Rng::gen_range(&mut rng, i..ids.len());
            ids.swap(i, j);
        }
        let mut probe_idx = ids[..m].to_vec();
        probe_idx.sort_unstable();
        let probe = Dataset::new(
            test.dims,
            probe_idx.iter().map(|&i| test.examples[i].clone()).collect(),
        )?;

        Ok(Federation {
            model,
            method,
            cfg,
            frozen,
            theta,
            train,
            test,
            probe,
            parts,
            round: 0,
            trainable_scalars,
        })
    }

    /// Trainable scalars synchronized per participant per direction.
    pub fn payload_scalars(&self) -> usize {
        self.trainable_scalars
    }

    /// Test accuracy of the current global model.
    pub fn eval_global(&self) -> Result<f64> {
        evaluate_accuracy(
            &self.model,
            self.method,
            &self.frozen,
            &self.theta,
            &self.test,
            self.cfg.eval_chunk,
        )
    }

    /// Run one synchronization round: sample, broadcast, train locally in
    /// parallel, aggregate the survivors, evaluate.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        self.round += 1;
        let round = self.round;
        let sampled = sample_clients(self.parts.len(), self.cfg.fraction, self.cfg.seed, round)?;

        let global_logits = logits_for(
            &self.model,
            self.method,
            &self.frozen,
            &self.theta,
            &self.probe,
            self.cfg.eval_chunk,
        )?;

        // embarrassingly parallel: every client works on a copy of θ with a
        // private substream; collect() preserves sampled (ascending) order
        let results: Vec<(local::LocalOutcome, Option<f64>)> = sampled
            .par_iter()
            .map(|&cid| {
                let out = local_train(
                    &self.model,
                    self.method,
                    &self.frozen,
                    &self.theta,
                    &self.train,
                    &self.parts[cid],
                    &self.cfg.local,
                    self.cfg.seed,
                    round,
                )?;
                let cka = if out.aborted {
                    None
                } else {
                    let local_logits = logits_for(
                        &self.model,
                        self.method,
                        &self.frozen,
                        &out.params,
                        &self.probe,
                        self.cfg.eval_chunk,
                    )?;
                    match linear_cka(
                        &local_logits,
                        &global_logits,
                        self.probe.len(),
                        self.model.num_classes,
                        self.model.num_classes,
                    ) {
                        Ok(v) => Some(v),
                        Err(Error::UndefinedSimilarity) => None,
                        Err(e) => return Err(e),
                    }
                };
                Ok((out, cka))
            })
            .collect::<Result<_>>()?;

        let survivors: Vec<(&ParamSet, usize)> = results
            .iter()
            .filter(|(o, _)| !o.aborted)
            .map(|(o, _)| (&o.params, o.weight))
            .collect();
        if survivors.is_empty() {
            return Err(Error::Aggregation(format!("all clients aborted in round {round}")));
        }
        self.theta = fedavg_aggregate(&survivors)?;
        let test_acc = self.eval_global()?;

        let payload = self.trainable_scalars as u64 * 8;
        let clients: Vec<ClientRound> = results
            .iter()
            .map(|(o, cka)| ClientRound {
                client_id: o.client_id,
                loss: o.mean_loss(),
                cka_drift: *cka,
                aborted: o.aborted,
            })
            .collect();
        Ok(RoundLog {
            round,
            sampled: sampled.clone(),
            clients,
            test_acc,
            bytes_up: payload * survivors.len() as u64,
            bytes_down: payload * sampled.len() as u64,
        })
    }
}

/// Evaluate the initialized model, then run `cfg.rounds` rounds.
pub fn run_experiment(fed: &mut Federation) -> Result<ExperimentLog> {
    let init_acc = fed.eval_global()?;
    let mut rounds = Vec::with_capacity(fed.cfg.rounds);
    for _ in 0..fed.cfg.rounds {
        rounds.push(fed.run_round()?);
    }
    Ok(ExperimentLog { init_acc, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, CorpusSpec};
    use crate::model::forward::{build_graph, Batch, Mode};
    use crate::model::{init_backbone, trainable_names};
    use crate::tensor::{AdamWConfig, Optimizer, Tape, Tensor};
    use rand::seq::SliceRandom;

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

    fn tiny_corpus() -> (Dataset, Dataset) {
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
            seed: 88,
        };
        let c = synthesize_corpus(&spec).unwrap();
        (c.train, c.test)
    }

    fn tiny_fed(method: Method, k: usize, fraction: f64, rounds: usize, seed: u64) -> Federation {
        let model = tiny_cfg();
        let (train, test) = tiny_corpus();
        let parts =
            partition::dirichlet_partition(&train.labels(), model.num_classes, k, 1.0, seed)
                .unwrap();
        let backbone = init_backbone(&model, &mut substream(seed, "init-backbone", &[]));
        let cfg = FedConfig {
            fraction,
            rounds,
            local: LocalConfig { epochs: 1, batch_size: 8, lr: 3e-3, weight_decay: 0.01 },
            eval_chunk: 32,
            probe_size: 16,
            seed,
        };
        Federation::new(model, method, cfg, &backbone, train, test, parts).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_distinct_and_exactly_sized() {
        let a = sample_clients(100, 0.25, 5, 3).unwrap();
        assert_eq!(a.len(), 25);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup, a, "ascending and distinct");
        assert!(a.iter().all(|&i| i < 100));
        assert_eq!(a, sample_clients(100, 0.25, 5, 3).unwrap());
        assert_ne!(a, sample_clients(100, 0.25, 5, 4).unwrap());
        // fraction 1 → everyone
        assert_eq!(sample_clients(7, 1.0, 0, 1).unwrap(), (0..7).collect::<Vec<_>>());
        // ⌈0.1 × 30⌉ = 3 despite 0.1*30 = 3.0000…04 in f64
        assert_eq!(sample_clients(30, 0.1, 0, 1).unwrap().len(), 3);
        assert!(sample_clients(10, 0.0, 0, 1).is_err());
        assert!(sample_clients(10, 1.5, 0, 1).is_err());
        assert!(sample_clients(0, 0.5, 0, 1).is_err());
    }

    #[test]
    fn aggregation_is_the_size_weighted_mean() {
        let mk = |vals: &[f64]| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
            p
        };
        // sizes (60, 40) → α = (0.6, 0.4)
        let (a, b) = (mk(&[1.0, -2.0]), mk(&[3.0, 5.0]));
        let agg = fedavg_aggregate(&[(&a, 60), (&b, 40)]).unwrap();
        let got = agg.get("w").unwrap().data();
        assert!((got[0] - (0.6 * 1.0 + 0.4 * 3.0)).abs() < 1e-12);
        assert!((got[1] - (0.6 * -2.0 + 0.4 * 5.0)).abs() < 1e-12);

        // identical updates → bit-for-bit fixed point
        let x = mk(&[0.1, 0.2, -0.3]);
        let same = fedavg_aggregate(&[(&x, 1), (&x, 1), (&x, 1)]).unwrap();
        assert!(same.bitwise_eq(&x));

        // five random updates vs an independent summation oracle
        let mut rng = substream(50, "agg-test", &[]);
        let sets: Vec<ParamSet> = (0..5)
            .map(|_| {
                let vals: Vec<f64> =
                    (0..8).map(|_| rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0).collect();
                mk(&vals)
            })
            .collect();
        let sizes = [13usize, 7, 29, 3, 17];
        let updates: Vec<(&ParamSet, usize)> =
            sets.iter().zip(sizes).map(|(p, n)| (p, n)).collect();
        let agg = fedavg_aggregate(&updates).unwrap();
        let total: f64 = sizes.iter().map(|&n| n as f64).sum();
        let got = agg.get("w").unwrap().data();
        for j in 0..8 {
            // reverse-order weighted sum as the independent reference
            let want: f64 = sets
                .iter()
                .zip(sizes)
                .rev()
                .map(|(p, n)| n as f64 / total * p.get("w").unwrap().data()[j])
                .sum();
            assert!((got[j] - want).abs() < 1e-12, "scalar {j}: {} vs {want}", got[j]);
        }

        // schema mismatch and empty input
        let mut odd = ParamSet::new();
        odd.insert("w2", Tensor::zeros(vec![2]));
        assert!(matches!(
            fedavg_aggregate(&[(&a, 1), (&odd, 1)]),
            Err(Error::Aggregation(_))
        ));
        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn single_client_round_adopts_that_clients_parameters() {
        let mut fed = tiny_fed(Method::Adapter, 1, 1.0, 1, 60);
        let theta0 = fed.theta.clone();
        let log = fed.run_round().unwrap();
        assert_eq!(log.sampled, vec![0]);
        assert_eq!(log.round, 1);
        // independent local run from the same broadcast
        let direct = local_train(
            &fed.model,
            fed.method,
            &fed.frozen,
            &theta0,
            &fed.train,
            &fed.parts[0],
            &fed.cfg.local,
            fed.cfg.seed,
            1,
        )
        .unwrap();
        assert!(fed.theta.bitwise_eq(&direct.params), "aggregation of one is the identity");
        let payload = fed.payload_scalars() as u64 * 8;
        assert_eq!(log.bytes_up, payload);
        assert_eq!(log.bytes_down, payload);
    }

    #[test]
    fn degenerate_federation_equals_hand_rolled_centralized_training() {
        // K=1, fraction=1, E=1: the federated round must be step-for-step
        // the same as a plain centralized epoch — rebuilt here from scratch
        // (shuffle, batches, optimizer) without calling local_train.
        let seed = 61u64;
        let mut fed = tiny_fed(Method::C2a, 1, 1.0, 1, seed);
        let mut params = fed.theta.clone();
        let frozen = fed.frozen.clone();
        let (model, method, lcfg) = (fed.model, fed.method, fed.cfg.local);
        let train = fed.train.clone();

        let log = fed.run_round().unwrap();

        let mut rng = substream(seed, "client", &[0, 1]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut opt = Optimizer::new(AdamWConfig::new(lcfg.lr, lcfg.weight_decay));
        let mut losses = Vec::new();
        for chunk in order.chunks(lcfg.batch_size) {
            let batch = Batch::from_dataset(&train, chunk).unwrap();
            let mut tape = Tape::new();
            let g = build_graph(&mut tape, &model, method, &frozen, &params, &batch, Mode::Train)
                .unwrap();
            let loss = g.loss.unwrap();
            losses.push(tape.value(loss)[0]);
            tape.backward(loss).unwrap();
            for name in &names {
                if let Some(grad) = tape.grad(g.binds[name]) {
                    let grad = grad.to_vec();
                    opt.step(name, params.get_mut(name).unwrap(), &grad).unwrap();
                }
            }
        }
        assert!(fed.theta.bitwise_eq(&params), "federated ≠ centralized parameters");
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((log.clients[0].loss - mean).abs() < 1e-15);
    }

    #[test]
    fn rounds_are_deterministic_with_coherent_logs() {
        let run = || {
            let mut fed = tiny_fed(Method::C2a, 6, 0.5, 2, 62);
            let log = run_experiment(&mut fed).unwrap();
            (log, fed.theta)
        };
        let (log_a, theta_a) = run();
        let (log_b, theta_b) = run();
        assert!(theta_a.bitwise_eq(&theta_b));
        assert_eq!(log_a.init_acc, log_b.init_acc);
        assert_eq!(log_a.rounds.len(), 2);
        for (ra, rb) in log_a.rounds.iter().zip(&log_b.rounds) {
            assert_eq!(ra.sampled, rb.sampled);
            assert_eq!(ra.test_acc, rb.test_acc);
            for (ca, cb) in ra.clients.iter().zip(&rb.clients) {
                assert_eq!(ca.client_id, cb.client_id);
                assert_eq!(ca.loss, cb.loss);
                assert_eq!(ca.cka_drift, cb.cka_drift);
            }
        }
        // log invariants
        for (i, r) in log_a.rounds.iter().enumerate() {
            assert_eq!(r.round, i + 1);
            assert_eq!(r.sampled.len(), 3, "⌈0.5·6⌉");
            assert_eq!(r.clients.len(), 3);
            assert!(r.test_acc.is_finite() && (0.0..=1.0).contains(&r.test_acc));
            for c in &r.clients {
                assert!(!c.aborted);
                assert!(c.loss.is_finite());
                let drift = c.cka_drift.expect("drift defined for trained clients");
                assert!(
                    (0.0..=1.0 + 1e-9).contains(&drift),
                    "cka {drift} outside [0, 1]"
                );
            }
        }
        // trace helpers
        assert_eq!(log_a.accuracy_trace().len(), 2);
        assert_eq!(log_a.final_acc(), log_a.rounds[1].test_acc);
        let (up, down) = log_a.total_bytes();
        assert_eq!(up, down);
        assert!(up > 0);
    }

    #[test]
    fn all_aborted_round_is_an_aggregation_error() {
        let mut fed = tiny_fed(Method::Adapter, 2, 1.0, 1, 63);
        let shape = fed.theta.get("head.weight").unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        *fed.theta.get_mut("head.weight").unwrap() =
            Tensor::new(shape, vec![f64::NAN; n]).unwrap();
        assert!(matches!(fed.run_round(), Err(Error::Aggregation(_))));
    }

    #[test]
    fn zero_round_experiment_reports_initialization_only() {
        let mut fed = tiny_fed(Method::C2a, 4, 0.5, 0, 64);
        let log = run_experiment(&mut fed).unwrap();
        assert!(log.rounds.is_empty());
        assert!(log.init_acc.is_finite());
        assert!(log.accuracy_trace().is_empty());
        assert_eq!(log.final_acc(), log.init_acc);
        assert_eq!(log.total_bytes(), (0, 0));
    }

    #[test]
    fn c2a_trains_only_its_contract_parameters_across_rounds() {
        let mut fed = tiny_fed(Method::C2a, 3, 1.0, 2, 65);
        let frozen_before = fed.frozen.clone();
        for _ in 0..2 {
            fed.run_round().unwrap();
        }
        assert!(fed.frozen.bitwise_eq(&frozen_before), "frozen set drifted");
        let mut got: Vec<String> = fed.theta.names().map(String::from).collect();
        got.sort();
        assert_eq!(got, trainable_names(&fed.model, Method::C2a));
    }
}
