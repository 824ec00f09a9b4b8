use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensors, stream, DatasetShard, PairedSample};
use crate::losses::{adversarial_d_loss, gen_loss, LossBreakdown};
use crate::model::{discriminate, ModelError};
use crate::tensor::{add, scale, OptimizerState, ParamVector, Tensor, TensorError};

use super::{mpr_term, prox_term, FedConfig, FedError, LocalMode, Result, FedSetup};

/// Per-(seed, client, round) batch stream.
pub fn client_rng(seed: u64, client_id: usize, round: usize) -> ChaCha8Rng {
    stream(seed, &[0xc11e, client_id as u64, round as u64])
}

/// Batch indices drawn without replacement.
pub fn sample_batch(rng: &mut ChaCha8Rng, shard_len: usize, batch_size: usize) -> Vec<usize> {
    sample_indices(rng, shard_len, batch_size.min(shard_len)).into_vec()
}

/// Step-decayed learning rate; `step` counts from 0 over the whole run.
pub fn lr_at(cfg: &FedConfig, step: usize) -> f64 {
    if (step as f64) < cfg.decay_at * cfg.total_steps() as f64 {
        cfg.learning_rate
    } else {
        cfg.late_learning_rate
    }
}

/// Diagnostics of one client's round; losses are from its last step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub loss: LossBreakdown,
    pub d_loss: f64,
    pub mpr: f64,
    pub prox: f64,
    pub steps: usize,
}

/// Everything a client keeps between rounds. Weights are overwritten on
/// deploy; optimizer moments and (when not aggregated) the discriminator
/// stay local.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: DatasetShard,
    pub enc: ParamVector,
    /// Trainable decoder, present only when no frozen prior is used.
    pub synth: Option<ParamVector>,
    pub disc: ParamVector,
    pub opt_enc: OptimizerState,
    pub opt_synth: OptimizerState,
    pub opt_disc: OptimizerState,
    pub steps_done: usize,
}

impl ClientState {
    /// Client starting from `theta` (layout of [`ClientState::theta`]) with a
    /// fallback discriminator for when `theta` carries none.
    pub fn new(client_id: usize, shard: DatasetShard, theta: &ParamVector, disc: &ParamVector, lr: f64) -> Result<Self> {
        if shard.is_empty() {
            return Err(FedError::Config(format!("client {client_id} has an empty shard")));
        }
        let mut c = ClientState {
            client_id,
            shard,
            enc: ParamVector::new(),
            synth: None,
            disc: disc.with_requires_grad(true),
            opt_enc: OptimizerState::adam(lr),
            opt_synth: OptimizerState::adam(lr),
            opt_disc: OptimizerState::adam(lr),
            steps_done: 0,
        };
        c.deploy(theta);
        Ok(c)
    }

    /// Trainable groups under "enc.", "synth." and "disc." prefixes.
    pub fn theta(&self, with_disc: bool) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.extend_prefixed("enc.", &self.enc).expect("fresh vector");
        if let Some(s) = &self.synth {
            pv.extend_prefixed("synth.", s).expect("distinct prefix");
        }
        if with_disc {
            pv.extend_prefixed("disc.", &self.disc).expect("distinct prefix");
        }
        pv.frozen_copy()
    }

    /// Replaces the local weights with fresh trainable copies of `theta`.
    pub fn deploy(&mut self, theta: &ParamVector) {
        self.enc = theta.select_prefixed("enc.").with_requires_grad(true);
        let synth = theta.select_prefixed("synth.");
        self.synth = (!synth.is_empty()).then(|| synth.with_requires_grad(true));
        let disc = theta.select_prefixed("disc.");
        if !disc.is_empty() {
            self.disc = disc.with_requires_grad(true);
        }
    }
}

struct Anchor {
    enc: ParamVector,
    synth: Option<ParamVector>,
    disc: Option<ParamVector>,
}

fn non_finite(e: FedError, client: usize, round: usize, step: usize) -> FedError {
    match e {
        FedError::Tensor(TensorError::NonFinite { .. })
        | FedError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => FedError::NonFinite {
            client,
            round,
            step,
            what: "activation",
        },
        other => other,
    }
}

fn finite(t: &Tensor, client: usize, round: usize, step: usize, what: &'static str) -> Result<()> {
    if t.item().is_finite() {
        Ok(())
    } else {
        Err(FedError::NonFinite {
            client,
            round,
            step,
            what,
        })
    }
}

/// One local round: deploy `global` (when given), then `local_steps`
/// alternating discriminator/generator steps on batches from the client's
/// shard. Returns the resulting theta and the round's diagnostics.
pub fn local_update(
    setup: &FedSetup,
    client: &mut ClientState,
    global: Option<&ParamVector>,
    round: usize,
    mode: LocalMode,
) -> Result<(ParamVector, ClientRoundStats)> {
    let cfg = &setup.cfg;
    if client.shard.is_empty() {
        return Err(FedError::Config(format!("client {} has an empty shard", client.client_id)));
    }
    let with_disc = match global {
        Some(g) => {
            client.deploy(g);
            g.iter().any(|(n, _)| n.starts_with("disc."))
        }
        None => false,
    };
    let anchor = global.map(|g| Anchor {
        enc: g.select_prefixed("enc.").frozen_copy(),
        synth: Some(g.select_prefixed("synth.")).filter(|s| !s.is_empty()),
        disc: Some(g.select_prefixed("disc.")).filter(|s| !s.is_empty()),
    });
    let mut rng = client_rng(cfg.seed, client.client_id, round);
    let mut stats = ClientRoundStats {
        client_id: client.client_id,
        ..ClientRoundStats::default()
    };
    for step in 0..cfg.local_steps {
        let lr = lr_at(cfg, client.steps_done);
        train_step(setup, client, &mut rng, anchor.as_ref(), mode, lr, round, step, &mut stats)
            .map_err(|e| non_finite(e, client.client_id, round, step))?;
        client.steps_done += 1;
        stats.steps += 1;
    }
    Ok((client.theta(with_disc), stats))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    setup: &FedSetup,
    client: &mut ClientState,
    rng: &mut ChaCha8Rng,
    anchor: Option<&Anchor>,
    mode: LocalMode,
    lr: f64,
    round: usize,
    step: usize,
    stats: &mut ClientRoundStats,
) -> Result<()> {
    let cfg = &setup.cfg;
    let w = cfg.weights;
    let id = client.client_id;
    let idx = sample_batch(rng, client.shard.len(), cfg.batch_size);
    let batch: Vec<&PairedSample> = idx.iter().map(|&i| &*client.shard.samples[i]).collect();
    let (thermal, real) = batch_tensors(&batch);

    let gen = &setup.gen;
    let synth = match (&client.synth, &setup.prior) {
        (Some(s), _) => s,
        (None, Some(p)) => &p.synth,
        (None, None) => return Err(FedError::Config("no decoder: neither a prior nor trainable synthesis weights".into())),
    };
    let lp = gen.latents(&client.enc, &thermal)?;
    let fake = gen.synthesize(synth, &client.enc, &lp.style, Some(&lp.features))?;
    let prox_on = mode == LocalMode::FedProx && cfg.mu > 0.0;

    let mut logits = None;
    if w.lambda_a > 0.0 {
        client.disc.zero_grad();
        let mut d = adversarial_d_loss(&discriminate(&real, &client.disc)?, &discriminate(&fake.detach(), &client.disc)?)?;
        if let (true, Some(a)) = (prox_on, anchor.and_then(|a| a.disc.as_ref())) {
            d = add(&d, &prox_term(&client.disc, a, cfg.mu)?)?;
        }
        finite(&d, id, round, step, "discriminator loss")?;
        stats.d_loss = d.item();
        d.backward()?;
        client.opt_disc.learning_rate = lr;
        client.opt_disc.step(&mut client.disc)?;
        logits = Some(discriminate(&fake, &client.disc.frozen_copy())?);
    }

    let (mut loss, bd) = gen_loss(&fake, &real, logits.as_ref(), &setup.embedder, &w)?;
    stats.loss = bd;
    if let (LocalMode::Mpr, true, Some(a)) = (mode, w.lambda_d > 0.0, anchor) {
        let anchor_lp = gen.latents(&a.enc, &thermal)?;
        let t = mpr_term(&lp, &anchor_lp)?;
        stats.mpr = t.item();
        loss = add(&loss, &scale(&t, w.lambda_d)?)?;
    }
    if let (true, Some(a)) = (prox_on, anchor) {
        let mut p = prox_term(&client.enc, &a.enc, cfg.mu)?;
        if let (Some(s), Some(sa)) = (&client.synth, &a.synth) {
            p = add(&p, &prox_term(s, sa, cfg.mu)?)?;
        }
        stats.prox = p.item();
        loss = add(&loss, &p)?;
    }
    finite(&loss, id, round, step, "generator loss")?;
    client.enc.zero_grad();
    if let Some(s) = &client.synth {
        s.zero_grad();
    }
    loss.backward()?;
    drop((loss, fake, lp));
    client.opt_enc.learning_rate = lr;
    client.opt_enc.step(&mut client.enc)?;
    if let Some(s) = client.synth.as_mut() {
        client.opt_synth.learning_rate = lr;
        client.opt_synth.step(s)?;
    }
    Ok(())
}
