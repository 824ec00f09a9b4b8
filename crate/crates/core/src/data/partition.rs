use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::render::stream;
use super::{Corpus, DataError, DatasetShard, PairedSample, StyleTag};

/// Full-partition redraws before falling back to round-robin repair.
pub const MAX_REDRAWS: usize = 64;

/// One draw from Dirichlet(alpha · 1_k) via normalised Gamma variates. When
/// every variate underflows (tiny alpha) all mass goes to one uniformly
/// chosen component, which is the distribution's limit.
pub fn dirichlet_proportions(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        let pick = rng.random_range(0..k);
        (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
    }
}

fn categorical(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last non-zero bin.
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

fn assign(samples: &[Arc<PairedSample>], k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<Arc<PairedSample>>> {
    let mut by_identity: BTreeMap<u32, Vec<&Arc<PairedSample>>> = BTreeMap::new();
    for s in samples {
        by_identity.entry(s.identity_id).or_default().push(s);
    }
    let mut buckets = vec![Vec::new(); k];
    for group in by_identity.values() {
        let p = dirichlet_proportions(rng, k, alpha);
        for s in group {
            buckets[categorical(rng, &p)].push(Arc::clone(s));
        }
    }
    buckets
}

/// Splits `samples` over `k` clients: per identity, proportions are drawn
/// from Dirichlet(alpha) and each of its samples goes to a client drawn
/// from those proportions. Every client ends up with at least one sample.
pub fn dirichlet_partition(
    samples: &[Arc<PairedSample>],
    k: usize,
    alpha: f64,
    seed: u64,
    first_client_id: usize,
) -> Result<Vec<DatasetShard>, DataError> {
    if k == 0 {
        return Err(DataError::Config("client count must be at least 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DataError::Config(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if samples.len() < k {
        return Err(DataError::Config(format!(
            "{} samples cannot give {k} clients one sample each",
            samples.len()
        )));
    }
    let mut rng = stream(seed, &[0xd1, first_client_id as u64, k as u64]);
    let mut buckets = assign(samples, k, alpha, &mut rng);
    let mut redraws = 0;
    while buckets.iter().any(Vec::is_empty) && redraws < MAX_REDRAWS {
        buckets = assign(samples, k, alpha, &mut rng);
        redraws += 1;
    }
    // Round-robin repair: feed each empty client from the currently largest.
    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let donor = (0..k).max_by_key(|&i| (buckets[i].len(), std::cmp::Reverse(i))).expect("k > 0");
        let moved = buckets[donor].pop().expect("donor holds at least two samples");
        buckets[empty].push(moved);
    }
    let style = samples.first().map_or(StyleTag::A, |s| s.style);
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(i, samples)| DatasetShard {
            client_id: first_client_id + i,
            style,
            samples,
        })
        .collect())
}

/// Partitions each training dataset into `clients_per_dataset` shards and
/// concatenates the shard lists (dataset 0 clients first).
pub fn partition_corpus(corpus: &Corpus, clients_per_dataset: usize, alpha: f64, seed: u64) -> Result<Vec<DatasetShard>, DataError> {
    let mut shards = Vec::new();
    for (d, samples) in corpus.train.iter().enumerate() {
        shards.extend(dirichlet_partition(samples, clients_per_dataset, alpha, seed.wrapping_add(d as u64), shards.len())?);
    }
    Ok(shards)
}
