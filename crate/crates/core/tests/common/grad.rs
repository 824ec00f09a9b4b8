//! Central finite-difference checks for every differentiable op, model block
//! and composite loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpfl::federation::{mpr_term, prox_term};
use vpfl::losses::{
    adversarial_d_loss, adversarial_g_loss, feature_distance, gen_loss, reconstruction_loss, FixedEmbedder,
    LossWeights, IDENTITY_TAPS, PERCEPTUAL_TAPS,
};
use vpfl::model::{calibrate, discriminate, init_discriminator, style_inject, Generator, LatentPack};

use super::fixture::tiny_arch;
use vpfl::tensor::*;

pub const INSTANCES: usize = 20;
pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Round-off floor of a central difference, relative to |f|.
const NOISE: f64 = 1e-8;

pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub coords: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

type Build<'a> = dyn Fn(&[Tensor]) -> Tensor + 'a;

fn leaves(values: &[(Vec<usize>, Vec<f64>)]) -> Vec<Tensor> {
    values
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
        .collect()
}

/// Compares backprop against central differences on `limit` random
/// coordinates (all of them when `limit` is `None`). Returns the worst
/// error ratio (error / allowed) and a description of any failure.
fn check_instance(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: &Build,
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> (usize, f64, Option<String>) {
    let xs = leaves(inputs);
    let out = f(&xs);
    out.backward().unwrap();
    let f0 = out.item();
    let grads: Vec<Vec<f64>> = xs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, d))| (0..d.len()).map(move |j| (i, j)))
        .collect();
    let coords: Vec<(usize, usize)> = match limit {
        Some(k) if k < all.len() => (0..k).map(|_| all[rng.random_range(0..all.len())]).collect(),
        _ => all,
    };
    let mut worst: f64 = 0.0;
    for &(i, j) in &coords {
        let x = inputs[i].1[j];
        let h = STEP * x.abs().max(1.0);
        let eval = |v: f64| {
            let mut moved = inputs.to_vec();
            moved[i].1[j] = v;
            f(&leaves(&moved)).item()
        };
        let numeric = (eval(x + h) - eval(x - h)) / (2.0 * h);
        let analytic = grads[i][j];
        let allowed = REL_TOL * analytic.abs().max(numeric.abs()) + NOISE * f0.abs().max(1.0);
        let ratio = (analytic - numeric).abs() / allowed;
        worst = worst.max(ratio);
        if ratio > 1.0 || !ratio.is_finite() {
            return (
                coords.len(),
                worst,
                Some(format!("input {i}[{j}]: analytic {analytic:.9e} vs numeric {numeric:.9e}")),
            );
        }
    }
    (coords.len(), worst, None)
}

fn run(
    name: &'static str,
    seed: u64,
    limit: Option<usize>,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<f64>)>,
    f: &Build,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = GradReport {
        name,
        instances: 0,
        coords: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..INSTANCES {
        let inputs = make(&mut rng);
        let (n, worst, fail) = check_instance(&inputs, f, limit, &mut rng);
        r.instances += 1;
        r.coords += n;
        r.worst = r.worst.max(worst);
        r.failures.extend(fail);
    }
    r
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    uniform(rng, shape, -1.0, 1.0)
}

/// `pv`'s values plus uniform jitter, as finite-difference inputs.
fn perturbed(pv: &ParamVector, rng: &mut ChaCha8Rng, jitter: f64) -> Vec<(Vec<usize>, Vec<f64>)> {
    pv.iter()
        .map(|(_, t)| {
            let d = t.data().iter().map(|v| v + rng.random_range(-jitter..jitter)).collect();
            (t.shape().to_vec(), d)
        })
        .collect()
}

fn rebuild(names: &[String], xs: &[Tensor]) -> ParamVector {
    ParamVector::from_entries(names.iter().cloned().zip(xs.iter().cloned()).collect()).unwrap()
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so every
/// output element gets a distinct upstream gradient.
fn probe(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 7919 % 113) as f64 / 56.0) - 1.0).collect();
    sum(&hadamard(t, &Tensor::new(t.shape(), w).unwrap()).unwrap()).unwrap()
}

pub fn gradient_suite() -> Vec<GradReport> {
    let mut out = Vec::new();
    let elementwise: [(&'static str, fn(&Tensor, &Tensor) -> Tensor); 3] = [
        ("add", |a, b| add(a, b).unwrap()),
        ("sub", |a, b| sub(a, b).unwrap()),
        ("hadamard", |a, b| hadamard(a, b).unwrap()),
    ];
    for (i, (name, op)) in elementwise.into_iter().enumerate() {
        out.push(run(name, 10 + i as u64, None, |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], &|x| {
            probe(&op(&x[0], &x[1]))
        }));
    }
    let unary: [(&'static str, fn(&Tensor) -> Tensor); 10] = [
        ("scale", |a| scale(a, -2.5).unwrap()),
        ("add_scalar", |a| add_scalar(a, 0.75).unwrap()),
        ("leaky_relu", |a| leaky_relu(a, 0.2).unwrap()),
        ("sigmoid", |a| sigmoid(a).unwrap()),
        ("softplus", |a| softplus(a).unwrap()),
        ("upsample2x", |a| upsample2x(a).unwrap()),
        ("downsample2x", |a| downsample2x(a).unwrap()),
        ("global_avg_pool", |a| global_avg_pool(a).unwrap()),
        ("instance_norm", |a| instance_norm(a, 1e-5).unwrap()),
        ("reshape", |a| reshape(a, &[4, 8]).unwrap()),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        out.push(run(name, 20 + i as u64, None, |r| vec![uniform(r, &[2, 1, 4, 4], -3.0, 3.0)], &|x| {
            probe(&op(&x[0]))
        }));
    }
    let reductions: [(&'static str, fn(&Tensor) -> Tensor); 3] = [
        ("sum", |a| sum(a).unwrap()),
        ("mean", |a| mean(a).unwrap()),
        ("sum_squares", |a| sum_squares(a).unwrap()),
    ];
    for (i, (name, op)) in reductions.into_iter().enumerate() {
        out.push(run(name, 40 + i as u64, None, |r| vec![u(r, &[3, 4])], &|x| op(&x[0])));
    }
    out.push(run("l1", 50, None, |r| vec![u(r, &[2, 5]), u(r, &[2, 5])], &|x| {
        l1(&x[0], &x[1]).unwrap()
    }));
    out.push(run("mse", 51, None, |r| vec![u(r, &[2, 5]), u(r, &[2, 5])], &|x| {
        mse(&x[0], &x[1]).unwrap()
    }));
    out.push(run("concat", 52, None, |r| vec![u(r, &[2, 1, 3]), u(r, &[2, 2, 3])], &|x| {
        probe(&concat(&[&x[0], &x[1]], 1).unwrap())
    }));
    out.push(run("slice", 53, None, |r| vec![u(r, &[2, 5, 3])], &|x| {
        probe(&slice(&x[0], 1, 1, 3).unwrap())
    }));
    out.push(run("linear", 54, None, |r| vec![u(r, &[3, 4]), u(r, &[5, 4]), u(r, &[5])], &|x| {
        probe(&linear(&x[0], &x[1], &x[2]).unwrap())
    }));
    out.push(run("channel_affine", 55, None, |r| vec![u(r, &[2, 3, 2, 2]), u(r, &[2, 3]), u(r, &[2, 3])], &|x| {
        probe(&channel_affine(&x[0], &x[1], &x[2]).unwrap())
    }));
    out.push(run("sum_all", 56, None, |r| vec![u(r, &[1]), u(r, &[1]), u(r, &[1])], &|x| {
        let sq: Vec<Tensor> = x.iter().map(|t| hadamard(t, t).unwrap()).collect();
        sum(&sum_all(&sq).unwrap()).unwrap()
    }));
    for (i, (stride, pad, k)) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)].into_iter().enumerate() {
        let name = ["conv2d_s1p1", "conv2d_s2p1", "conv2d_1x1", "conv2d_s2p0"][i];
        out.push(run(
            name,
            60 + i as u64,
            None,
            |r| vec![u(r, &[2, 2, 5, 5]), u(r, &[3, 2, k, k]), u(r, &[3])],
            &move |x| probe(&conv2d(&x[0], &x[1], &x[2], stride, pad).unwrap()),
        ));
    }

    // Model blocks.
    out.push(run(
        "calibrate",
        70,
        None,
        |r| vec![u(r, &[1, 2, 3, 3]), u(r, &[1, 3, 3, 3]), u(r, &[4, 3, 1, 1]), u(r, &[4])],
        &|x| probe(&calibrate(&x[0], &x[1], &x[2], &x[3]).unwrap()),
    ));
    out.push(run(
        "style_inject",
        71,
        None,
        |r| vec![uniform(r, &[2, 2, 3, 3], -2.0, 2.0), u(r, &[2, 3]), u(r, &[4, 3]), u(r, &[4])],
        &|x| probe(&style_inject(&x[0], &x[1], &x[2], &x[3]).unwrap()),
    ));
    let arch = tiny_arch();
    let gen = Generator::new(arch.clone(), true).unwrap();
    let enc = gen.init_encoder(5).unwrap();
    let synth = gen.init_synthesis(6).unwrap();
    let enc_names: Vec<String> = enc.names().iter().map(|s| s.to_string()).collect();
    let n_enc = enc_names.len();
    let thermal = Tensor::new(&[1, 1, 32, 32], (0..1024).map(|i| ((i * 37 % 101) as f64) / 101.0).collect()).unwrap();
    {
        let gen = gen.clone();
        let enc = enc.clone();
        let thermal = thermal.clone();
        out.push(run(
            "msca",
            72,
            Some(8),
            move |r| perturbed(&enc, r, 0.05),
            &move |x| {
                let pv = rebuild(&enc_names, x);
                let feats = gen.encode(&pv, &thermal).unwrap();
                probe(&gen.msca(&pv, &feats, 0).unwrap())
            },
        ));
    }
    {
        let gen = gen.clone();
        let synth = synth.clone();
        let enc = enc.clone();
        let names: Vec<String> = enc.names().iter().map(|s| s.to_string()).collect();
        let thermal = thermal.clone();
        out.push(run(
            "hallucinate",
            73,
            Some(8),
            move |r| perturbed(&enc, r, 0.05),
            &move |x| {
                let pv = rebuild(&names, &x[..n_enc]);
                probe(&gen.hallucinate(&pv, &synth, &thermal).unwrap())
            },
        ));
    }
    {
        let disc = init_discriminator(&arch, 7).unwrap();
        let names: Vec<String> = disc.names().iter().map(|s| s.to_string()).collect();
        let nd = names.len();
        out.push(run(
            "discriminate",
            74,
            Some(8),
            move |r| {
                let mut v = perturbed(&disc, r, 0.05);
                v.push(uniform(r, &[1, 3, 64, 64], 0.0, 1.0));
                v
            },
            &move |x| probe(&discriminate(&x[nd], &rebuild(&names, &x[..nd])).unwrap()),
        ));
    }

    // Composite losses.
    let embedder = FixedEmbedder::with_seed(&arch, 9).unwrap();
    let img = |r: &mut ChaCha8Rng| uniform(r, &[1, 3, 64, 64], 0.05, 0.95);
    out.push(run("reconstruction_loss", 80, Some(12), |r| vec![img(r), img(r)], &|x| {
        reconstruction_loss(&x[0], &x[1]).unwrap()
    }));
    out.push(run("adversarial_g_loss", 81, None, |r| vec![uniform(r, &[2, 1, 2, 2], -3.0, 3.0)], &|x| {
        adversarial_g_loss(&x[0]).unwrap()
    }));
    out.push(run(
        "adversarial_d_loss",
        82,
        None,
        |r| vec![uniform(r, &[2, 1, 2, 2], -3.0, 3.0), uniform(r, &[2, 1, 2, 2], -3.0, 3.0)],
        &|x| adversarial_d_loss(&x[0], &x[1]).unwrap(),
    ));
    for (i, (name, taps)) in [("perceptual_distance", PERCEPTUAL_TAPS), ("identity_distance", IDENTITY_TAPS)]
        .into_iter()
        .enumerate()
    {
        let embedder = &embedder;
        out.push(run(name, 83 + i as u64, Some(12), |r| vec![img(r), img(r)], &move |x| {
            feature_distance(&x[0], &x[1], embedder, taps).unwrap()
        }));
    }
    {
        let embedder = &embedder;
        out.push(run(
            "gen_loss",
            85,
            Some(12),
            |r| vec![img(r), img(r), uniform(r, &[1, 1, 4, 4], -2.0, 2.0)],
            &move |x| {
                gen_loss(&x[0], &x[1], Some(&x[2]), embedder, &LossWeights::default())
                    .unwrap()
                    .0
            },
        ));
    }
    // Anchors are constants: both terms detach them.
    let mut ar = ChaCha8Rng::seed_from_u64(88);
    let anchor = LatentPack {
        style: Tensor::new(&[2, 3], u(&mut ar, &[2, 3]).1).unwrap(),
        features: vec![
            Tensor::new(&[2, 2, 2, 2], u(&mut ar, &[2, 2, 2, 2]).1).unwrap(),
            Tensor::new(&[2, 1, 4, 4], u(&mut ar, &[2, 1, 4, 4]).1).unwrap(),
        ],
    };
    out.push(run(
        "mpr_term_weighted",
        86,
        None,
        |r| vec![u(r, &[2, 3]), u(r, &[2, 2, 2, 2]), u(r, &[2, 1, 4, 4])],
        &|x| {
            let cur = LatentPack {
                style: x[0].clone(),
                features: vec![x[1].clone(), x[2].clone()],
            };
            scale(&mpr_term(&cur, &anchor).unwrap(), 0.37).unwrap()
        },
    ));
    let names = vec!["k.a".to_string(), "k.b".to_string()];
    let prox_anchor = ParamVector::from_entries(vec![
        (names[0].clone(), Tensor::new(&[3], u(&mut ar, &[3]).1).unwrap()),
        (names[1].clone(), Tensor::new(&[2, 2], u(&mut ar, &[2, 2]).1).unwrap()),
    ])
    .unwrap();
    out.push(run("prox_term", 87, None, |r| vec![u(r, &[3]), u(r, &[2, 2])], &|x| {
        prox_term(&rebuild(&names, x), &prox_anchor, 0.5).unwrap()
    }));
    out
}
