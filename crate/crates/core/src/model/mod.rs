//! The prior-conditioned translation network: a U-shaped encoder with
//! multi-scale context aggregation produces a style code and per-stage
//! features, which steer a (usually frozen) prior decoder through AdaIN style
//! injection and pixel-wise feature calibration.

mod config;
mod disc;
mod generator;
mod prior;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::ArchConfig;
pub use disc::{discriminate, init_discriminator};
pub use generator::{
    calibrate, modulation, style_inject, Generator, ModulationParams, ADAIN_EPS, LEAKY_SLOPE,
};
pub use prior::{pretrain_prior, sample_prior, PretrainConfig, PriorDecoder};

use crate::tensor::{ParamVector, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Style code `w` ([N, style_dim]) and the multi-scale features `F_i`,
/// ordered coarse to fine, one per decoder stage.
#[derive(Debug, Clone)]
pub struct LatentPack {
    pub style: Tensor,
    pub features: Vec<Tensor>,
}

impl LatentPack {
    pub fn detach(&self) -> LatentPack {
        LatentPack {
            style: self.style.detach(),
            features: self.features.iter().map(Tensor::detach).collect(),
        }
    }
}

pub(crate) fn param<'a>(pv: &'a ParamVector, name: &str) -> Result<&'a Tensor> {
    pv.get(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

/// Seeded parameter initialiser.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    /// He-normal conv weight plus zero bias.
    pub fn conv(
        &mut self,
        pv: &mut ParamVector,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        gain: f64,
    ) -> Result<()> {
        let fan_in = (in_c * k * k) as f64;
        let w = self.normal(out_c * in_c * k * k, gain * (2.0 / fan_in).sqrt());
        pv.push(format!("{name}.w"), Tensor::param(&[out_c, in_c, k, k], w)?)?;
        pv.push(format!("{name}.b"), Tensor::param(&[out_c], vec![0.0; out_c])?)?;
        Ok(())
    }

    pub fn zero_conv(&mut self, pv: &mut ParamVector, name: &str, out_c: usize, in_c: usize) -> Result<()> {
        pv.push(format!("{name}.w"), Tensor::param(&[out_c, in_c, 1, 1], vec![0.0; out_c * in_c])?)?;
        pv.push(format!("{name}.b"), Tensor::param(&[out_c], vec![0.0; out_c])?)?;
        Ok(())
    }

    pub fn linear(&mut self, pv: &mut ParamVector, name: &str, out_f: usize, in_f: usize, gain: f64) -> Result<()> {
        let w = self.normal(out_f * in_f, gain * (1.0 / in_f as f64).sqrt());
        pv.push(format!("{name}.w"), Tensor::param(&[out_f, in_f], w)?)?;
        pv.push(format!("{name}.b"), Tensor::param(&[out_f], vec![0.0; out_f])?)?;
        Ok(())
    }
}
