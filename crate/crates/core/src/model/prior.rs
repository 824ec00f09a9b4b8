use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::losses::{adversarial_d_loss, adversarial_g_loss};
use crate::tensor::{l1, scale, slice, sub, OptimizerState, ParamVector, Tensor, WireError};

use super::{discriminate, init_discriminator, Generator, ModelError, Result};

/// Decoder weights plus the style affines they were trained with. The
/// affines only seed the encoder's copies; the synthesis weights are what
/// stays frozen.
#[derive(Debug, Clone)]
pub struct PriorDecoder {
    pub synth: ParamVector,
    pub affines: ParamVector,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the mode-seeking term. Without it the generator tends to
    /// ignore z and emit one image.
    pub diversity_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            batch_size: 8,
            learning_rate: 5e-4,
            diversity_weight: 1.0,
            seed: 7,
        }
    }
}

impl PriorDecoder {
    /// Randomly initialised decoder (no pretraining).
    pub fn random(gen: &Generator, seed: u64, frozen: bool) -> Result<Self> {
        let synth = gen.init_synthesis(seed)?;
        let affines = gen.init_affines(seed ^ 0xaff1)?;
        Ok(PriorDecoder {
            synth: synth.with_requires_grad(!frozen),
            affines,
            frozen,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.synth = self.synth.frozen_copy();
        self.frozen = true;
        self
    }

    /// Snapshot in the parameter wire format, frozen flag in the header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut pv = ParamVector::new();
        pv.extend_prefixed("synth.", &self.synth)
            .and_then(|_| pv.extend_prefixed("affine.", &self.affines))
            .expect("prefixes keep names unique");
        pv.to_bytes(self.frozen)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let (pv, frozen) = ParamVector::from_bytes(bytes)?;
        Ok(PriorDecoder {
            synth: pv.select_prefixed("synth.").with_requires_grad(!frozen),
            affines: pv.select_prefixed("affine.").with_requires_grad(true),
            frozen,
        })
    }
}

/// Images from style codes [N, style_dim] with calibration disabled.
pub fn sample_prior(gen: &Generator, prior: &PriorDecoder, styles: &Tensor) -> Result<Tensor> {
    gen.synthesize(&prior.synth, &prior.affines, styles, None)
}

fn normal_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<Tensor> {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(&[n, dim], data)?)
}

/// Mean L1 between the two halves of a fake batch over the mean L1 between
/// their latents.
fn latent_spread(fake: &Tensor, z: &Tensor) -> Result<Tensor> {
    let h = fake.shape()[0] / 2;
    let zd = l1(&slice(z, 0, 0, h)?, &slice(z, 0, h, h)?)?.item();
    Ok(scale(&l1(&slice(fake, 0, 0, h)?, &slice(fake, 0, h, h)?)?, 1.0 / zd.max(1e-12))?)
}

/// Trains the decoder as the generator of a small GAN on visible images
/// only (latent → image, non-saturating losses plus a mode-seeking
/// term), then freezes it.
/// `visible` holds flattened [3,H,W] images.
pub fn pretrain_prior(gen: &Generator, visible: &[&[f32]], cfg: &PretrainConfig) -> Result<PriorDecoder> {
    if visible.is_empty() {
        return Err(ModelError::Config("prior pretraining needs a non-empty visible corpus".into()));
    }
    let a = &gen.arch;
    let img_len = a.out_channels * a.output_size * a.output_size;
    if let Some(bad) = visible.iter().position(|v| v.len() != img_len) {
        return Err(ModelError::Config(format!(
            "visible image {bad} has {} values, expected {img_len}",
            visible[bad].len()
        )));
    }
    let mut prior = PriorDecoder::random(gen, cfg.seed, false)?;
    let mut disc = init_discriminator(a, cfg.seed ^ 0xd15c)?;
    let mut opt_g = OptimizerState::adam(cfg.learning_rate);
    let mut opt_a = OptimizerState::adam(cfg.learning_rate);
    let mut opt_d = OptimizerState::adam(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size.min(visible.len()).max(1);
    let shape = [b, a.out_channels, a.output_size, a.output_size];
    for _ in 0..cfg.steps {
        let idx = sample_indices(&mut rng, visible.len(), b);
        let mut real = Vec::with_capacity(b * img_len);
        for i in idx.iter() {
            real.extend(visible[i].iter().map(|&v| v as f64));
        }
        let real = Tensor::new(&shape, real)?;

        let z = normal_batch(&mut rng, b, a.style_dim)?;
        let fake = gen.synthesize(&prior.synth, &prior.affines, &z, None)?;
        disc.zero_grad();
        let d_loss = adversarial_d_loss(&discriminate(&real, &disc)?, &discriminate(&fake.detach(), &disc)?)
            .map_err(loss_to_model)?;
        d_loss.backward()?;
        opt_d.step(&mut disc)?;

        prior.synth.zero_grad();
        prior.affines.zero_grad();
        let frozen_disc = disc.frozen_copy();
        let mut g_loss = adversarial_g_loss(&discriminate(&fake, &frozen_disc)?).map_err(loss_to_model)?;
        if cfg.diversity_weight > 0.0 && b >= 2 {
            g_loss = sub(&g_loss, &scale(&latent_spread(&fake, &z)?, cfg.diversity_weight)?)?;
        }
        g_loss.backward()?;
        drop((fake, g_loss));
        opt_g.step(&mut prior.synth)?;
        opt_a.step(&mut prior.affines)?;
    }
    prior.synth.zero_grad();
    prior.affines.zero_grad();
    Ok(prior.freeze())
}

fn loss_to_model(e: crate::losses::LossError) -> ModelError {
    match e {
        crate::losses::LossError::Model(m) => m,
        other => ModelError::Config(other.to_string()),
    }
}
