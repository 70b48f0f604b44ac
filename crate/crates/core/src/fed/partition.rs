//! Non-IID client data partitioning.
//!
//! Label skew follows the federated-NLP benchmark convention: for each class,
//! proportions over clients are drawn from a symmetric Dirichlet(β) and the
//! class's examples are dealt by largest-remainder rounding. Small β
//! concentrates each class on few clients; large β approaches an IID split.
//! Domain skew assigns clients round-robin to groups and label-partitions
//! each group's data among its own clients only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::substream;

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Example indices into the training dataset, ascending.
    pub indices: Vec<usize>,
    /// Domain/group id when the partition is group-exclusive.
    pub group: Option<usize>,
}

/// ln of a Gamma(shape, 1) sample, stable for arbitrarily small shapes.
///
/// Uses the boost identity `G_a = G_{a+1} · U^{1/a}` in log space: the
/// library draw has shape ≥ 1 (where rejection sampling is reliable) and the
/// `U^{1/a}` factor — which underflows f64 for small `a` — stays a finite
/// logarithm.
fn ln_gamma_sample(rng: &mut impl Rng, shape: f64) -> Result<f64> {
    let boosted = Gamma::new(shape + 1.0, 1.0)
        .map_err(|e| Error::Partition(format!("gamma shape {shape}: {e}")))?;
    let g: f64 = boosted.sample(rng);
    let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    Ok(g.ln() + u.ln() / shape)
}

/// One draw from the symmetric Dirichlet(β) over `k` slots.
///
/// Normalizes in log space (softmax), so the result is finite and sums to 1
/// even when β is small enough that the underlying Gamma values underflow.
pub fn dirichlet_proportions(rng: &mut impl Rng, beta: f64, k: usize) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Partition(format!("beta must be positive and finite, got {beta}")));
    }
    if k == 0 {
        return Err(Error::Partition("need at least one slot".into()));
    }
    let lns: Vec<f64> = (0..k)
        .map(|_| ln_gamma_sample(rng, beta))
        .collect::<Result<_>>()?;
    let m = lns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = lns.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Integer allocation of `n` items to slots proportional to `p`
/// (largest-remainder rounding; remainder ties break to the lower slot).
fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = p.iter().map(|&x| (x * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = p[a] * n as f64 - (p[a] * n as f64).floor();
        let fb = p[b] * n as f64 - (p[b] * n as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &slot in order.iter().take(n.saturating_sub(assigned)) {
        counts[slot] += 1;
    }
    counts
}

/// Deal each class pool to `k` slots by an independent Dirichlet(β) draw.
/// `salt` prefixes the per-class substream counters.
fn dirichlet_assign(
    class_pools: Vec<Vec<usize>>,
    k: usize,
    beta: f64,
    seed: u64,
    salt: &[u64],
) -> Result<Vec<Vec<usize>>> {
    let mut slots = vec![Vec::new(); k];
    for (c, mut pool) in class_pools.into_iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let mut counters = salt.to_vec();
        counters.push(c as u64);
        let mut rng = substream(seed, "partition", &counters);
        pool.shuffle(&mut rng);
        let p = dirichlet_proportions(&mut rng, beta, k)?;
        let counts = largest_remainder(&p, pool.len());
        let mut off = 0;
        for (slot, &cnt) in counts.iter().enumerate() {
            slots[slot].extend_from_slice(&pool[off..off + cnt]);
            off += cnt;
        }
    }
    Ok(slots)
}

/// Give every empty slot one example, taken from the currently largest slot
/// (ties break to the lower slot id).
fn repair_empty(slots: &mut [Vec<usize>]) -> Result<()> {
    loop {
        let Some(e) = slots.iter().position(|s| s.is_empty()) else {
            return Ok(());
        };
        let donor = (0..slots.len())
            .max_by_key(|&i| (slots[i].len(), usize::MAX - i))
            .expect("nonempty slot list");
        if slots[donor].len() <= 1 {
            return Err(Error::Partition(
                "not enough examples to give every client one".into(),
            ));
        }
        let ex = slots[donor].pop().expect("donor checked nonempty");
        slots[e].push(ex);
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Partition("num_classes must be positive".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Partition(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Label-skew partition: every class's examples are split across all `k`
/// clients by an independent Dirichlet(β) proportion draw.
///
/// Partitions are disjoint, cover `0..labels.len()`, and every client is
/// nonempty (empty clients are repaired by taking one example from the
/// largest client). `k = 1` degenerates to the whole-set partition.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    check_labels(labels, num_classes)?;
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if k > labels.len() {
        return Err(Error::Partition(format!(
            "{k} clients but only {} examples",
            labels.len()
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Partition(format!("beta must be positive and finite, got {beta}")));
    }
    let mut pools = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    let mut slots = dirichlet_assign(pools, k, beta, seed, &[])?;
    repair_empty(&mut slots)?;
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientPartition { client_id, indices, group: None }
        })
        .collect())
}

/// Domain-skew partition: client `i` belongs to group `i % num_groups` and
/// holds examples of that group only; within each group, label skew follows
/// [`dirichlet_partition`] among the group's clients.
pub fn group_partition(
    labels: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
    k: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    check_labels(labels, num_classes)?;
    if groups.len() != labels.len() {
        return Err(Error::Partition(format!(
            "{} group tags for {} labels",
            groups.len(),
            labels.len()
        )));
    }
    if num_groups == 0 {
        return Err(Error::Partition("need at least one group".into()));
    }
    if let Some(&bad) = groups.iter().find(|&&g| g >= num_groups) {
        return Err(Error::Partition(format!(
            "group {bad} out of range for {num_groups} groups"
        )));
    }
    if k < num_groups {
        return Err(Error::Partition(format!(
            "{k} clients over {num_groups} groups leaves a group with zero clients"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Partition(format!("beta must be positive and finite, got {beta}")));
    }

    let mut parts: Vec<ClientPartition> = (0..k)
        .map(|client_id| ClientPartition {
            client_id,
            indices: Vec::new(),
            group: Some(client_id % num_groups),
        })
        .collect();

    for g in 0..num_groups {
        let members: Vec<usize> = (0..k).filter(|i| i % num_groups == g).collect();
        let mut pools = vec![Vec::new(); num_classes];
        let mut total = 0usize;
        for (i, (&l, &gi)) in labels.iter().zip(groups).enumerate() {
            if gi == g {
                pools[l].push(i);
                total += 1;
            }
        }
        if total < members.len() {
            return Err(Error::Partition(format!(
                "group {g} has {total} examples for {} clients",
                members.len()
            )));
        }
        let mut slots = dirichlet_assign(pools, members.len(), beta, seed, &[g as u64])?;
        repair_empty(&mut slots)?;
        for (slot, client) in members.into_iter().enumerate() {
            let mut indices = std::mem::take(&mut slots[slot]);
            indices.sort_unstable();
            parts[client].indices = indices;
        }
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Disjointness + coverage + nonemptiness for a partition of `n`.
    fn assert_valid(parts: &[ClientPartition], n: usize) {
        let mut seen = vec![false; n];
        for p in parts {
            assert!(!p.indices.is_empty(), "client {} empty", p.client_id);
            for &i in &p.indices {
                assert!(i < n, "index {i} out of range");
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "not covering");
    }

    /// `labels[i] = i % c` over n examples.
    fn cyclic_labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn dirichlet_proportions_match_theoretical_moments() {
        // Dir(β·1_k): E[p_i] = 1/k, Var[p_i] = (1/k)(1-1/k)/(kβ+1)
        let (k, beta, draws) = (4usize, 0.5f64, 4000usize);
        let mut rng = substream(100, "dir-test", &[]);
        let mut sum = vec![0.0; k];
        let mut sumsq = vec![0.0; k];
        for _ in 0..draws {
            let p = dirichlet_proportions(&mut rng, beta, k).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            for i in 0..k {
                sum[i] += p[i];
                sumsq[i] += p[i] * p[i];
            }
        }
        let want_mean = 1.0 / k as f64;
        let want_var = want_mean * (1.0 - want_mean) / (k as f64 * beta + 1.0);
        // std error of the mean ≈ sqrt(var/draws) ≈ 0.003; allow 5 sigma
        for i in 0..k {
            let mean = sum[i] / draws as f64;
            let var = sumsq[i] / draws as f64 - mean * mean;
            assert!(
                (mean - want_mean).abs() < 5.0 * (want_var / draws as f64).sqrt(),
                "component {i}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 0.15 * want_var,
                "component {i}: var {var} vs {want_var}"
            );
        }
    }

    #[test]
    fn extreme_betas_give_uniform_and_vertex_draws() {
        let mut rng = substream(101, "dir-test", &[]);
        for _ in 0..50 {
            let p = dirichlet_proportions(&mut rng, 1e4, 6).unwrap();
            for &x in &p {
                assert!((x - 1.0 / 6.0).abs() < 0.05, "high beta should be near uniform: {x}");
            }
        }
        let mut maxes: Vec<f64> = (0..201)
            .map(|_| {
                let p = dirichlet_proportions(&mut rng, 0.01, 6).unwrap();
                assert!(p.iter().all(|x| x.is_finite()));
                p.iter().cloned().fold(0.0, f64::max)
            })
            .collect();
        maxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(maxes[100] > 0.99, "tiny beta should sit near a vertex, median max {}", maxes[100]);
    }

    #[test]
    fn largest_remainder_is_exact_and_proportional() {
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 10), vec![5, 3, 2]);
        assert_eq!(largest_remainder(&[1.0, 0.0], 7), vec![7, 0]);
        // remainders: 0.4·7=2.8, 0.35·7=2.45, 0.25·7=1.75 → floors 2,2,1 (5), +1 to .8 and .75
        assert_eq!(largest_remainder(&[0.4, 0.35, 0.25], 7), vec![3, 2, 2]);
        for n in [0usize, 1, 13, 100] {
            let counts = largest_remainder(&[0.21, 0.19, 0.35, 0.25], n);
            assert_eq!(counts.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn partitions_are_disjoint_covering_and_nonempty() {
        for (n, c, k, beta, seed) in [
            (50usize, 3usize, 7usize, 0.1f64, 1u64),
            (200, 8, 10, 1.0, 2),
            (64, 2, 64, 0.01, 3), // k == n: every client exactly one example
            (30, 5, 1, 5.0, 4),   // degenerate single client
        ] {
            let parts = dirichlet_partition(&cyclic_labels(n, c), c, k, beta, seed).unwrap();
            assert_eq!(parts.len(), k);
            assert_valid(&parts, n);
            for (i, p) in parts.iter().enumerate() {
                assert_eq!(p.client_id, i);
                assert_eq!(p.group, None);
            }
        }
    }

    #[test]
    fn partition_is_deterministic_in_the_seed() {
        let labels = cyclic_labels(120, 4);
        let a = dirichlet_partition(&labels, 4, 6, 0.5, 9).unwrap();
        let b = dirichlet_partition(&labels, 4, 6, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = dirichlet_partition(&labels, 4, 6, 0.5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn near_iid_beta_keeps_clients_close_to_the_global_label_mix() {
        // simulation oracle: per-client class histogram within TVD 0.05 of global
        let (n, c, k) = (800usize, 4usize, 4usize);
        let labels = cyclic_labels(n, c);
        for seed in [11u64, 12, 13] {
            let parts = dirichlet_partition(&labels, c, k, 1e4, seed).unwrap();
            assert_valid(&parts, n);
            for p in &parts {
                let mut hist = vec![0.0; c];
                for &i in &p.indices {
                    hist[labels[i]] += 1.0;
                }
                let total: f64 = hist.iter().sum();
                let tvd: f64 = hist
                    .iter()
                    .map(|&h| (h / total - 1.0 / c as f64).abs())
                    .sum::<f64>()
                    / 2.0;
                assert!(tvd < 0.05, "seed {seed} client {}: tvd {tvd}", p.client_id);
            }
        }
    }

    #[test]
    fn tiny_beta_concentrates_each_class_on_one_client() {
        // simulation oracle: per class, the largest client share of that class
        // is near 1 when beta is tiny
        let (n, c, k) = (800usize, 4usize, 4usize);
        let labels = cyclic_labels(n, c);
        for seed in [21u64, 22, 23] {
            let parts = dirichlet_partition(&labels, c, k, 0.01, seed).unwrap();
            assert_valid(&parts, n);
            let mut shares = Vec::new();
            for class in 0..c {
                let class_total = labels.iter().filter(|&&l| l == class).count() as f64;
                let top = parts
                    .iter()
                    .map(|p| p.indices.iter().filter(|&&i| labels[i] == class).count())
                    .max()
                    .unwrap() as f64;
                shares.push(top / class_total);
            }
            shares.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if c % 2 == 0 {
                (shares[c / 2 - 1] + shares[c / 2]) / 2.0
            } else {
                shares[c / 2]
            };
            assert!(median >= 0.8, "seed {seed}: median top share {median}");
        }
    }

    #[test]
    fn invalid_partition_arguments_error() {
        let labels = cyclic_labels(20, 4);
        assert!(matches!(
            dirichlet_partition(&labels, 4, 21, 1.0, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            dirichlet_partition(&labels, 4, 0, 1.0, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            dirichlet_partition(&labels, 4, 4, 0.0, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            dirichlet_partition(&labels, 4, 4, -1.0, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            dirichlet_partition(&labels, 3, 4, 1.0, 0), // label 3 out of range
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn group_partition_is_group_exclusive_with_round_robin_assignment() {
        // 5 groups × 200 examples, 4 classes, 100 clients → 20 clients/group
        let (g_count, per_group, c, k) = (5usize, 200usize, 4usize, 100usize);
        let n = g_count * per_group;
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let groups: Vec<usize> = (0..n).map(|i| i / per_group).collect();
        let parts = group_partition(&labels, &groups, c, g_count, k, 0.5, 31).unwrap();
        assert_eq!(parts.len(), k);
        assert_valid(&parts, n);
        let mut per_group_clients = vec![0usize; g_count];
        for p in &parts {
            let g = p.group.expect("group partition tags every client");
            assert_eq!(g, p.client_id % g_count);
            per_group_clients[g] += 1;
            for &i in &p.indices {
                assert_eq!(groups[i], g, "client {} holds an example outside its group", p.client_id);
            }
        }
        assert_eq!(per_group_clients, vec![k / g_count; g_count]);
    }

    #[test]
    fn group_partition_rejects_starved_configurations() {
        let labels = cyclic_labels(40, 4);
        let groups: Vec<usize> = (0..40).map(|i| i / 10).collect(); // 4 groups × 10
        // more groups than clients
        assert!(matches!(
            group_partition(&labels, &groups, 4, 4, 3, 1.0, 0),
            Err(Error::Partition(_))
        ));
        // group 0 has 10 examples but 11 clients land in it (k=41 over 4 groups)
        assert!(matches!(
            group_partition(&labels, &groups, 4, 4, 41, 1.0, 0),
            Err(Error::Partition(_))
        ));
        // mismatched tag list
        assert!(matches!(
            group_partition(&labels, &groups[..39], 4, 4, 8, 1.0, 0),
            Err(Error::Partition(_))
        ));
        // group id out of range
        let mut bad = groups.clone();
        bad[0] = 4;
        assert!(matches!(
            group_partition(&labels, &bad, 4, 4, 8, 1.0, 0),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn empty_client_repair_steals_from_the_largest() {
        let mut slots = vec![vec![1, 2, 3, 4, 5], vec![], vec![6], vec![]];
        repair_empty(&mut slots).unwrap();
        assert!(slots.iter().all(|s| !s.is_empty()));
        let total: usize = slots.iter().map(|s| s.len()).sum();
        assert_eq!(total, 6);
        assert_eq!(slots[0], vec![1, 2, 3]); // donated its tail twice
        // impossible repair: two slots, one example
        let mut starved = vec![vec![7], vec![]];
        assert!(repair_empty(&mut starved).is_err());
    }
}
