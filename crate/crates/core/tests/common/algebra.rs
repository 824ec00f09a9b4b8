//! Federation algebra: aggregation, reductions between modes, determinism
//! and a written-out reference loop.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixture::{short_cfg, tiny_setup};
use vpfl::data::{batch_tensors, DatasetShard, PairedSample};
use vpfl::federation::*;
use vpfl::losses::{adversarial_d_loss, gen_loss};
use vpfl::model::discriminate;
use vpfl::tensor::{add, scale, OptimizerState, ParamVector, Tensor};

fn random_pv(rng: &mut ChaCha8Rng, magnitude: f64) -> ParamVector {
    let shapes: [&[usize]; 3] = [&[7], &[3, 5], &[2, 2, 2, 2]];
    ParamVector::from_entries(
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                let d = (0..n)
                    .map(|_| rng.random_range(-1.0..1.0) * magnitude * 10f64.powi(rng.random_range(-3..4)))
                    .collect();
                (format!("p{i}"), Tensor::new(s, d).unwrap())
            })
            .collect(),
    )
    .unwrap()
}

fn kahan_mean(values: impl Iterator<Item = f64>, k: usize) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum / k as f64
}

pub fn aggregate_matches_compensated_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let uploads: Vec<ParamVector> = (0..8).map(|_| random_pv(&mut rng, 1.0 + trial as f64)).collect();
        let mean = aggregate(&uploads).unwrap();
        for (e, (_, t)) in mean.iter().enumerate() {
            for (i, &v) in t.data().iter().enumerate() {
                let oracle = kahan_mean(uploads.iter().map(|u| u.tensors().nth(e).unwrap().data()[i]), 8);
                let scale = uploads
                    .iter()
                    .map(|u| u.tensors().nth(e).unwrap().data()[i].abs())
                    .fold(1.0, f64::max);
                assert!((v - oracle).abs() <= 1e-12 * scale, "entry {e}[{i}]: {v} vs {oracle}");
            }
        }
    }
}

pub fn weighted_aggregation_respects_weights() {
    let a = ParamVector::from_entries(vec![("w".into(), Tensor::new(&[2], vec![0.0, 4.0]).unwrap())]).unwrap();
    let b = ParamVector::from_entries(vec![("w".into(), Tensor::new(&[2], vec![3.0, 0.0]).unwrap())]).unwrap();
    let m = aggregate_weighted(&[a.clone(), b.clone()], &[1.0, 3.0]).unwrap();
    assert_eq!(m.get("w").unwrap().data(), &[2.25, 1.0]);
    assert!(aggregate(&[]).is_err());
    assert!(aggregate_weighted(&[a, b], &[0.0, 0.0]).is_err());
}

fn enc_bits(pv: &ParamVector) -> ParamVector {
    pv.select_prefixed("enc.")
}

pub fn one_client_federation_is_centralized_training() {
    let mut setup = tiny_setup(2, short_cfg(3, 2));
    setup.shards = vec![DatasetShard::union(0, &setup.shards)];
    let fed = run_vpfl(&setup, LocalMode::Vanilla).unwrap();
    let central = run_strategy(&setup, Strategy::Centralized).unwrap();
    assert!(enc_bits(&fed.theta).bit_eq(&enc_bits(central.theta.as_ref().unwrap())));
    let losses = |h: &[RoundReport]| h.iter().map(|r| r.clients[0].loss).collect::<Vec<_>>();
    assert_eq!(losses(&fed.history), losses(&central.history));
}

pub fn zero_weight_mpr_is_vanilla() {
    let mut cfg = short_cfg(2, 2);
    cfg.weights.lambda_d = 0.0;
    let setup = tiny_setup(1, cfg);
    let a = run_vpfl(&setup, LocalMode::Mpr).unwrap();
    let b = run_vpfl(&setup, LocalMode::Vanilla).unwrap();
    assert!(a.theta.bit_eq(&b.theta));
}

pub fn zero_mu_fedprox_is_fedavg() {
    let mut cfg = short_cfg(2, 2);
    cfg.mu = 0.0;
    let setup = tiny_setup(1, cfg);
    let a = run_vpfl(&setup, LocalMode::FedProx).unwrap();
    let b = run_vpfl(&setup, LocalMode::Vanilla).unwrap();
    assert!(a.theta.bit_eq(&b.theta));
}

pub fn mpr_and_fedprox_change_the_trajectory() {
    let mut cfg = short_cfg(2, 2);
    cfg.mu = 0.5;
    cfg.weights.lambda_d = 0.5;
    let setup = tiny_setup(1, cfg);
    let base = run_vpfl(&setup, LocalMode::Vanilla).unwrap();
    assert!(!run_vpfl(&setup, LocalMode::Mpr).unwrap().theta.bit_eq(&base.theta));
    assert!(!run_vpfl(&setup, LocalMode::FedProx).unwrap().theta.bit_eq(&base.theta));
}

pub fn serial_and_parallel_rounds_agree() {
    let mut cfg = short_cfg(2, 2);
    let serial = run_vpfl(&tiny_setup(2, cfg.clone()), LocalMode::Mpr).unwrap();
    cfg.parallel = true;
    let parallel = run_vpfl(&tiny_setup(2, cfg), LocalMode::Mpr).unwrap();
    assert!(serial.theta.bit_eq(&parallel.theta));
    assert_eq!(history_csv(&serial.history, true), history_csv(&parallel.history, true));
}

pub fn loopback_transport_is_lossless() {
    let mut cfg = short_cfg(2, 2);
    let direct = run_vpfl(&tiny_setup(1, cfg.clone()), LocalMode::Mpr).unwrap();
    cfg.transport = Transport::Loopback;
    let wired = run_vpfl(&tiny_setup(1, cfg), LocalMode::Mpr).unwrap();
    assert!(direct.theta.bit_eq(&wired.theta));
}

pub fn zero_local_steps_return_the_deployed_weights() {
    let setup = tiny_setup(1, short_cfg(1, 0));
    let (theta, disc) = setup.initial_theta().unwrap();
    let mut global = theta.clone();
    global.extend_prefixed("disc.", &disc).unwrap();
    let mut client = ClientState::new(0, setup.shards[0].clone(), &global, &disc, 1e-3).unwrap();
    let (up, stats) = local_update(&setup, &mut client, Some(&global), 0, LocalMode::Mpr).unwrap();
    assert!(up.bit_eq(&global));
    assert_eq!(stats.steps, 0);
}

pub fn clients_start_each_round_from_the_global_model() {
    let setup = tiny_setup(1, short_cfg(1, 2));
    let (theta, disc) = setup.initial_theta().unwrap();
    let mut client = ClientState::new(0, setup.shards[0].clone(), &theta, &disc, 1e-3).unwrap();
    local_update(&setup, &mut client, Some(&theta), 0, LocalMode::Vanilla).unwrap();
    assert!(!client.theta(false).bit_eq(&theta));
    client.deploy(&theta);
    assert!(client.theta(false).bit_eq(&theta));
}

pub fn empty_shard_and_divergence_are_reported() {
    let setup = tiny_setup(1, short_cfg(1, 1));
    let (theta, disc) = setup.initial_theta().unwrap();
    let mut empty = setup.shards[0].clone();
    empty.samples.clear();
    assert!(matches!(ClientState::new(3, empty, &theta, &disc, 1e-3), Err(FedError::Config(_))));

    let mut cfg = short_cfg(1, 4);
    cfg.learning_rate = 1e200;
    cfg.late_learning_rate = 1e200;
    let setup = tiny_setup(1, cfg);
    match run_vpfl(&setup, LocalMode::Vanilla) {
        Err(FedError::NonFinite { client, round, step, .. }) => {
            assert_eq!(round, 0);
            assert!(client < setup.shards.len());
            assert!(step < 4);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

/// Written-out federated loop: Adam per client, alternating d/g steps,
/// plain two-term means at the server.
struct OracleClient {
    id: usize,
    samples: Vec<Arc<PairedSample>>,
    enc: ParamVector,
    disc: ParamVector,
    opt_enc: OptimizerState,
    opt_disc: OptimizerState,
    steps: usize,
}

fn oracle_round(setup: &FedSetup, c: &mut OracleClient, global: &ParamVector, round: usize, mpr: bool) -> f64 {
    let cfg = &setup.cfg;
    let prior = &setup.prior.as_ref().unwrap().synth;
    c.enc = global.select_prefixed("enc.").with_requires_grad(true);
    c.disc = global.select_prefixed("disc.").with_requires_grad(true);
    let anchor = global.select_prefixed("enc.").frozen_copy();
    let mut rng = client_rng(cfg.seed, c.id, round);
    let mut last_mpr = 0.0;
    let total = (cfg.rounds * cfg.local_steps) as f64;
    for _ in 0..cfg.local_steps {
        let lr = if (c.steps as f64) < cfg.decay_at * total {
            cfg.learning_rate
        } else {
            cfg.late_learning_rate
        };
        let idx = sample_batch(&mut rng, c.samples.len(), cfg.batch_size);
        let batch: Vec<&PairedSample> = idx.iter().map(|&i| &*c.samples[i]).collect();
        let (thermal, real) = batch_tensors(&batch);
        let lp = setup.gen.latents(&c.enc, &thermal).unwrap();
        let fake = setup.gen.synthesize(prior, &c.enc, &lp.style, Some(&lp.features)).unwrap();

        c.disc.zero_grad();
        let d = adversarial_d_loss(
            &discriminate(&real, &c.disc).unwrap(),
            &discriminate(&fake.detach(), &c.disc).unwrap(),
        )
        .unwrap();
        d.backward().unwrap();
        c.opt_disc.learning_rate = lr;
        c.opt_disc.step(&mut c.disc).unwrap();

        let logits = discriminate(&fake, &c.disc.frozen_copy()).unwrap();
        let (mut loss, _) = gen_loss(&fake, &real, Some(&logits), &setup.embedder, &cfg.weights).unwrap();
        if mpr {
            let a = setup.gen.latents(&anchor, &thermal).unwrap();
            let t = mpr_term(&lp, &a).unwrap();
            last_mpr = t.item();
            loss = add(&loss, &scale(&t, cfg.weights.lambda_d).unwrap()).unwrap();
        }
        c.enc.zero_grad();
        loss.backward().unwrap();
        c.opt_enc.learning_rate = lr;
        c.opt_enc.step(&mut c.enc).unwrap();
        c.steps += 1;
    }
    last_mpr
}

fn plain_mean(uploads: &[ParamVector]) -> ParamVector {
    let k = uploads.len() as f64;
    ParamVector::from_entries(
        uploads[0]
            .iter()
            .enumerate()
            .map(|(e, (name, t))| {
                let data = (0..t.numel())
                    .map(|i| uploads.iter().map(|u| u.tensors().nth(e).unwrap().data()[i]).sum::<f64>() / k)
                    .collect();
                (name.to_string(), Tensor::new(t.shape(), data).unwrap())
            })
            .collect(),
    )
    .unwrap()
}

fn run_oracle(setup: &FedSetup, mpr: bool) -> (ParamVector, Vec<f64>) {
    let (theta, disc) = setup.initial_theta().unwrap();
    let mut global = theta.clone();
    global.extend_prefixed("disc.", &disc).unwrap();
    let lr = setup.cfg.learning_rate;
    let mut clients: Vec<OracleClient> = setup
        .shards
        .iter()
        .map(|s| OracleClient {
            id: s.client_id,
            samples: s.samples.clone(),
            enc: ParamVector::new(),
            disc: ParamVector::new(),
            opt_enc: OptimizerState::adam(lr),
            opt_disc: OptimizerState::adam(lr),
            steps: 0,
        })
        .collect();
    let mut mprs = Vec::new();
    for q in 0..setup.cfg.rounds {
        let mut uploads = Vec::new();
        for c in clients.iter_mut() {
            mprs.push(oracle_round(setup, c, &global, q, mpr));
            let mut up = ParamVector::new();
            up.extend_prefixed("enc.", &c.enc).unwrap();
            up.extend_prefixed("disc.", &c.disc).unwrap();
            uploads.push(up.frozen_copy());
        }
        global = plain_mean(&uploads);
    }
    (global, mprs)
}

fn max_abs_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    assert_eq!(a.names(), b.names());
    a.flat_values()
        .iter()
        .zip(b.flat_values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn two_rounds_two_clients_match_hand_unrolled_loop() {
    let setup = tiny_setup(1, short_cfg(2, 1));
    assert_eq!(setup.shards.len(), 2);
    let g = run_vpfl(&setup, LocalMode::Vanilla).unwrap();
    let (oracle, _) = run_oracle(&setup, false);
    let d = max_abs_diff(&g.theta, &oracle);
    assert!(d <= 1e-12, "max deviation {d:e}");
}

pub fn mpr_anchor_is_the_round_start_model() {
    let mut cfg = short_cfg(2, 3);
    cfg.weights.lambda_d = 0.05;
    let setup = tiny_setup(1, cfg);
    let g = run_vpfl(&setup, LocalMode::Mpr).unwrap();
    let (oracle, mprs) = run_oracle(&setup, true);
    let d = max_abs_diff(&g.theta, &oracle);
    assert!(d <= 1e-12, "max deviation {d:e}");
    let reported: Vec<f64> = g.history.iter().flat_map(|r| r.clients.iter().map(|c| c.mpr)).collect();
    assert_eq!(reported.len(), mprs.len());
    for (r, o) in reported.iter().zip(&mprs) {
        assert!(*o > 0.0);
        assert!((r - o).abs() <= 1e-12 * o.max(1.0), "{r} vs {o}");
    }
}

pub fn fused_of_identical_models_equals_one_local_model() {
    let mut setup = tiny_setup(1, short_cfg(1, 2));
    let shard = setup.shards[0].clone();
    setup.shards = (0..3)
        .map(|_| DatasetShard {
            client_id: 0,
            ..shard.clone()
        })
        .collect();
    let fused = run_strategy(&setup, Strategy::Fused).unwrap();
    let local = run_strategy(&setup, Strategy::LocalOnly(0)).unwrap();
    assert_eq!(fused.metrics, local.metrics);
}

pub fn centralized_is_local_training_on_the_union() {
    let mut setup = tiny_setup(1, short_cfg(2, 2));
    let one = setup.shards[0].clone();
    setup.shards = vec![one.clone()];
    let local = run_strategy(&setup, Strategy::LocalOnly(0)).unwrap();
    let central = run_strategy(&setup, Strategy::Centralized).unwrap();
    assert!(local.theta.unwrap().bit_eq(&central.theta.unwrap()));

    // With K shards, centralized training is local training on their union
    // for K times the steps.
    let setup = tiny_setup(2, short_cfg(2, 2));
    let mut pooled = setup.clone();
    pooled.cfg.local_steps *= setup.shards.len();
    let union = vpfl::data::DatasetShard::union(0, &setup.shards);
    let expect = vpfl::federation::run_local(&pooled, &union).unwrap();
    let central = run_strategy(&setup, Strategy::Centralized).unwrap();
    assert!(expect.theta.bit_eq(&central.theta.unwrap()));
}

pub const ALL: &[(&str, fn())] = &[
    ("aggregate_matches_compensated_mean", aggregate_matches_compensated_mean),
    ("weighted_aggregation_respects_weights", weighted_aggregation_respects_weights),
    ("one_client_federation_is_centralized_training", one_client_federation_is_centralized_training),
    ("zero_weight_mpr_is_vanilla", zero_weight_mpr_is_vanilla),
    ("zero_mu_fedprox_is_fedavg", zero_mu_fedprox_is_fedavg),
    ("mpr_and_fedprox_change_the_trajectory", mpr_and_fedprox_change_the_trajectory),
    ("serial_and_parallel_rounds_agree", serial_and_parallel_rounds_agree),
    ("loopback_transport_is_lossless", loopback_transport_is_lossless),
    ("zero_local_steps_return_the_deployed_weights", zero_local_steps_return_the_deployed_weights),
    ("clients_start_each_round_from_the_global_model", clients_start_each_round_from_the_global_model),
    ("empty_shard_and_divergence_are_reported", empty_shard_and_divergence_are_reported),
    ("two_rounds_two_clients_match_hand_unrolled_loop", two_rounds_two_clients_match_hand_unrolled_loop),
    ("mpr_anchor_is_the_round_start_model", mpr_anchor_is_the_round_start_model),
    ("fused_of_identical_models_equals_one_local_model", fused_of_identical_models_equals_one_local_model),
    ("centralized_is_local_training_on_the_union", centralized_is_local_training_on_the_union),
];
