//! Worked examples for the image and verification metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpfl::losses::FixedEmbedder;
use vpfl::metrics::*;
use vpfl::tensor::Tensor;

use super::fixture::tiny_arch;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn psnr_examples() {
    let a = vec![0.3; 48];
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!(close(psnr(&a, &b, 1.0).unwrap(), 20.0, 1e-9));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let mut se = 0.0;
        for i in 0..x.len() {
            se += (x[i] - y[i]) * (x[i] - y[i]);
        }
        let oracle = 10.0 * (1.0 / (se / 300.0)).log10();
        assert!(close(psnr(&x, &y, 1.0).unwrap(), oracle, 1e-9));
    }
    assert!(psnr(&a, &a[..5], 1.0).is_err());

    // Same noise pattern at growing amplitude.
    let base: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 0.5 + 0.25).collect();
    let pattern: Vec<f64> = (0..300).map(|_| rng.random::<f64>() - 0.5).collect();
    let ladder: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|amp| {
            let noisy: Vec<f64> = base.iter().zip(&pattern).map(|(b, n)| b + amp * n).collect();
            psnr(&base, &noisy, 1.0).unwrap()
        })
        .collect();
    assert!(ladder.windows(2).all(|w| w[1] < w[0]), "{ladder:?}");
}

pub fn ssim_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
    assert!(close(ssim(&a, &a, 3, 16, 16).unwrap(), 1.0, 1e-9));
    assert_eq!(ssim(&a, &b, 3, 16, 16).unwrap(), ssim(&b, &a, 3, 16, 16).unwrap());
    // Constant images: means 0 and 1, zero variances and covariance, so
    // every window gives (C1·C2)/((1 + C1)·C2) = C1/(1 + C1).
    let zeros = vec![0.0; 12 * 12];
    let ones = vec![1.0; 12 * 12];
    let c1 = 1e-4;
    assert!(close(ssim(&zeros, &ones, 1, 12, 12).unwrap(), c1 / (1.0 + c1), 1e-15));
    assert!(ssim(&zeros[..100], &ones[..100], 1, 10, 10).is_err());
}

pub fn degree_examples() {
    let embedder = FixedEmbedder::new(&tiny_arch()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::new(&[2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|_| rng.random()).collect()).unwrap();
    let d = identity_degree(&img, &img, &embedder).unwrap();
    assert!(close(d.mean, 100.0, 1e-9));
    assert_eq!(d.zero_norm, 0);
    let f = embedder.identity_features(&img).unwrap().remove(0);
    let neg: Vec<f64> = f.iter().map(|v| -v).collect();
    let dbl: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
    assert!(close(cosine_degree(&neg, &f).0, -100.0, 1e-9));
    assert!(close(cosine_degree(&dbl, &f).0, 100.0, 1e-9));
}

/// Highest VR over every threshold (each observed score and −∞) whose
/// impostor acceptance rate stays within `far`.
fn sweep_vr(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    let mut best: f64 = 0.0;
    let candidates = genuine.iter().chain(impostor).copied().chain([f64::NEG_INFINITY]);
    for t in candidates {
        let fa = impostor.iter().filter(|&&s| s > t).count() as f64 / impostor.len() as f64;
        if fa <= far + 1e-12 {
            let accepted = genuine.iter().filter(|&&s| s > t).count() as f64;
            best = best.max(100.0 * accepted / genuine.len() as f64);
        }
    }
    best
}

pub fn toy_verification_sweep() {
    let gallery = [0u32, 1, 2];
    let probes = [0u32, 0, 1, 1, 2, 2];
    let scores = vec![
        vec![0.90, 0.30, 0.20],
        vec![0.40, 0.60, 0.10],
        vec![0.20, 0.80, 0.50],
        vec![0.70, 0.75, 0.30],
        vec![0.10, 0.20, 0.95],
        vec![0.30, 0.85, 0.50],
    ];
    let v = verify_scores(&scores, &probes, &gallery).unwrap();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    let mut hits = 0;
    for (p, row) in scores.iter().enumerate() {
        let mut best = 0;
        for g in 0..3 {
            if row[g] > row[best] {
                best = g;
            }
            if gallery[g] == probes[p] {
                genuine.push(row[g]);
            } else {
                impostor.push(row[g]);
            }
        }
        hits += usize::from(gallery[best] == probes[p]);
    }
    assert_eq!(v.rank1, 100.0 * hits as f64 / 6.0);
    assert_eq!(v.rank1, 400.0 / 6.0);
    assert_eq!(v.vr_far1, sweep_vr(&genuine, &impostor, 0.01));
    assert_eq!(v.vr_far01, sweep_vr(&genuine, &impostor, 0.001));
    assert_eq!(v.vr_far1, 100.0 * 2.0 / 6.0);
    assert!(v.far_resolution_limited);
    for far in [0.05, 0.1, 0.25, 0.5, 1.0] {
        assert_eq!(vr_at_far(&genuine, &impostor, far), sweep_vr(&genuine, &impostor, far), "far {far}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let g: Vec<f64> = (0..rng.random_range(1..30)).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let i: Vec<f64> = (0..rng.random_range(1..60)).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        for far in [0.001, 0.01, 0.1, 0.3] {
            assert_eq!(vr_at_far(&g, &i, far), sweep_vr(&g, &i, far));
        }
    }
}

pub fn verification_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gallery: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let set = GalleryProbeSet {
        gallery_ids: vec![0, 1, 2, 3],
        gallery: gallery.clone(),
        probe_ids: vec![0, 1, 2, 3],
        probes: gallery,
    };
    assert_eq!(set.verify().unwrap().rank1, 100.0);

    // Two identities, random scores: chance level.
    let mut total = 0.0;
    let seeds = 400;
    for _ in 0..seeds {
        let ids: Vec<u32> = (0..10).map(|i| i % 2).collect();
        let scores: Vec<Vec<f64>> = ids.iter().map(|_| vec![rng.random(), rng.random()]).collect();
        total += verify_scores(&scores, &ids, &[0, 1]).unwrap().rank1;
    }
    let mean = total / seeds as f64;
    assert!((mean - 50.0).abs() < 3.0, "chance rank-1 {mean}");
}

/// VR at 1% FAR is never below VR at 0.1%.
pub fn vr_monotone(m: &MetricBundle) -> bool {
    m.vr_far1 >= m.vr_far01
}

pub const ALL: &[(&str, fn())] = &[
    ("psnr_examples", psnr_examples),
    ("ssim_examples", ssim_examples),
    ("degree_examples", degree_examples),
    ("toy_verification_sweep", toy_verification_sweep),
    ("verification_edges", verification_edges),
];
