//! Dirichlet partitioner properties, with a stick-breaking Monte Carlo model
//! of the same assignment process as the reference.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use vpfl::data::{dirichlet_partition, PairedSample, StyleTag};

pub const IDENTITIES: u32 = 50;
pub const VARIATIONS: u16 = 20;
pub const DRAWS: usize = 1000;

/// Mean largest-client share under uniform assignment (alpha → ∞), plus four
/// standard errors. Produced by `monte_carlo_reference` and frozen here.
pub const UNIFORM_BASELINE: f64 = 0.2675;
/// Expected mean largest-client share at alpha = 0.3, K = 4.
pub const SKEWED_EXPECTED: f64 = 0.3015;

pub fn samples() -> Vec<Arc<PairedSample>> {
    (0..IDENTITIES)
        .flat_map(|id| {
            (0..VARIATIONS).map(move |v| {
                Arc::new(PairedSample {
                    visible: Vec::new(),
                    thermal: Vec::new(),
                    identity_id: id,
                    variation_id: v,
                    style: StyleTag::A,
                })
            })
        })
        .collect()
}

fn stick_breaking(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let mut rest = 1.0;
    let mut p = Vec::with_capacity(k);
    for i in 0..k - 1 {
        let v = Beta::new(alpha, alpha * (k - 1 - i) as f64).unwrap().sample(rng);
        p.push(rest * v);
        rest *= 1.0 - v;
    }
    p.push(rest);
    p
}

/// (mean, standard error) of the largest client share over `DRAWS`
/// simulated partitions; `alpha = None` assigns uniformly.
pub fn simulate_max_share(k: usize, alpha: Option<f64>, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (IDENTITIES as usize) * VARIATIONS as usize;
    let mut shares = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        let mut counts = vec![0usize; k];
        for _ in 0..IDENTITIES {
            let p = alpha.map_or_else(|| vec![1.0 / k as f64; k], |a| stick_breaking(&mut rng, k, a));
            for _ in 0..VARIATIONS {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = k - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                counts[pick] += 1;
            }
        }
        shares.push(*counts.iter().max().unwrap() as f64 / n as f64);
    }
    let mean = shares.iter().sum::<f64>() / DRAWS as f64;
    let var = shares.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
    (mean, (var / DRAWS as f64).sqrt())
}

/// Regenerates the frozen constants and checks they still describe the
/// simulation.
pub fn monte_carlo_reference() {
    let (u, u_se) = simulate_max_share(4, None, 99);
    let baseline = u + 4.0 * u_se;
    let (s, s_se) = simulate_max_share(4, Some(0.3), 98);
    println!("uniform baseline {baseline:.4}, alpha 0.3 expectation {s:.4} (se {s_se:.4})");
    assert!((baseline - UNIFORM_BASELINE).abs() < 2e-3, "baseline moved: {baseline}");
    assert!((s - SKEWED_EXPECTED).abs() < 4.0 * s_se, "expectation moved: {s}");
}

fn max_share(alpha: f64, seed: u64, data: &[Arc<PairedSample>]) -> f64 {
    let shards = dirichlet_partition(data, 4, alpha, seed, 0).unwrap();
    shards.iter().map(|s| s.len()).max().unwrap() as f64 / data.len() as f64
}

pub fn disjoint_and_complete() {
    let data = samples();
    for (seed, alpha) in [(1, 0.3), (2, 1e-3), (3, 1.0), (4, 1e6)] {
        for k in [1, 4, 8] {
            let shards = dirichlet_partition(&data, k, alpha, seed, 10).unwrap();
            assert_eq!(shards.len(), k);
            assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), data.len());
            let mut seen = HashSet::new();
            for (i, s) in shards.iter().enumerate() {
                assert_eq!(s.client_id, 10 + i);
                assert!(!s.is_empty());
                for x in &s.samples {
                    assert!(seen.insert((x.identity_id, x.variation_id)), "sample in two shards");
                }
            }
            assert_eq!(seen.len(), data.len());
        }
    }
}

pub fn huge_alpha_is_near_uniform() {
    let data = samples();
    let mut totals = [0usize; 4];
    for seed in 0..100 {
        for (t, s) in totals.iter_mut().zip(dirichlet_partition(&data, 4, 1e6, seed, 0).unwrap()) {
            *t += s.len();
        }
    }
    let uniform = data.len() as f64 / 4.0;
    for t in totals {
        let mean = t as f64 / 100.0;
        assert!((mean - uniform).abs() <= 0.1 * uniform, "mean client size {mean}");
    }
}

pub fn small_alpha_skews_beyond_uniform() {
    let data = samples();
    let mean = (0..DRAWS as u64).map(|s| max_share(0.3, s, &data)).sum::<f64>() / DRAWS as f64;
    println!("alpha 0.3 mean max share {mean:.4}");
    assert!(mean > UNIFORM_BASELINE, "{mean} vs baseline {UNIFORM_BASELINE}");
    assert!((mean - SKEWED_EXPECTED).abs() < 0.006, "{mean} vs reference {SKEWED_EXPECTED}");
}

pub const ALL: &[(&str, fn())] = &[
    ("disjoint_and_complete", disjoint_and_complete),
    ("huge_alpha_is_near_uniform", huge_alpha_is_near_uniform),
    ("small_alpha_skews_beyond_uniform", small_alpha_skews_beyond_uniform),
];
