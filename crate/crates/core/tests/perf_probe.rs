//! Temporary diagnostic: measure aggregation compatibility of per-client
//! updates (pairwise cosine similarity of local deltas) for c2a vs adapter.

use c2a_core::data::{synthesize_corpus, CorpusSpec};
use c2a_core::fed::local::{local_train, LocalConfig};
use c2a_core::fed::partition::dirichlet_partition;
use c2a_core::fed::{fedavg_aggregate, sample_clients};
use c2a_core::model::pretrain::{pretrain_backbone, PretrainConfig};
use c2a_core::model::{init_for_method, Method, ModelConfig};
use c2a_core::params::ParamSet;

fn flat_delta(theta: &ParamSet, local: &ParamSet) -> Vec<f64> {
    let mut v = Vec::new();
    for name in theta.names() {
        let a = theta.get(name).unwrap();
        let b = local.get(name).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            v.push(y - x);
        }
    }
    v
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
#[ignore]
fn update_compatibility_probe() {
    for &steps in &[300usize, 700] {
        let spec = CorpusSpec { seed: 100, ..Default::default() };
        let corpus = synthesize_corpus(&spec).unwrap();
        let mcfg = ModelConfig::default();
        let (backbone, masked_acc) = pretrain_backbone(
            &corpus.pretrain,
            &mcfg,
            &PretrainConfig { steps, ..Default::default() },
            100,
        )
        .unwrap();

        let labels: Vec<usize> = corpus.train.labels().to_vec();
        let parts = dirichlet_partition(&labels, mcfg.num_classes, 20, 0.1, 100).unwrap();

        for &method in &[Method::C2a, Method::Adapter] {
            let (frozen, mut theta) = init_for_method(&mcfg, method, &backbone, 100).unwrap();
            let lcfg = LocalConfig { lr: 0.01, ..Default::default() };

            let mut all_cos = Vec::new();
            let mut all_norm = Vec::new();
            // windowed means: rounds 1-10, 11-25, 26-40
            let mut win: Vec<Vec<f64>> = vec![Vec::new(); 3];
            for round in 1..=40usize {
                let sampled = sample_clients(parts.len(), 0.25, 100, round).unwrap();
                let mut deltas = Vec::new();
                let mut outs = Vec::new();
                for &cid in &sampled {
                    let out = local_train(
                        &mcfg, method, &frozen, &theta, &corpus.train, &parts[cid],
                        &lcfg, 100, round,
                    )
                    .unwrap();
                    deltas.push(flat_delta(&theta, &out.params));
                    outs.push(out);
                }
                let mut pair = Vec::new();
                for i in 0..deltas.len() {
                    for j in (i + 1)..deltas.len() {
                        pair.push(cos(&deltas[i], &deltas[j]));
                    }
                }
                let mc = pair.iter().sum::<f64>() / pair.len() as f64;
                let mn = deltas
                    .iter()
                    .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / deltas.len() as f64;
                all_cos.push(mc);
                all_norm.push(mn);
                let w = if round <= 10 { 0 } else if round <= 25 { 1 } else { 2 };
                win[w].push(mc);
                let survivors: Vec<(&ParamSet, usize)> = outs
                    .iter()
                    .filter(|o| !o.aborted)
                    .map(|o| (&o.params, o.weight))
                    .collect();
                theta = fedavg_aggregate(&survivors).unwrap();
            }
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "steps={steps} masked={masked_acc:.3} {method:?}: mean_cos={:.4} win=[{:.4},{:.4},{:.4}] mean_norm={:.3}",
                m(&all_cos), m(&win[0]), m(&win[1]), m(&win[2]), m(&all_norm)
            );
        }
    }
}
