//! Generation objective: L1 reconstruction, non-saturating adversarial terms,
//! and feature-space distances measured by a fixed random conv embedder.

use serde::{Deserialize, Serialize};

use crate::model::{ArchConfig, ModelError, LEAKY_SLOPE};
use crate::tensor::{
    add, conv2d, l1, leaky_relu, mean, scale, softplus, sum_all, ParamVector, Tensor,
};

/// Seed of the shared embedder; every client and every metric uses it.
pub const EMBEDDER_SEED: u64 = 0x5eed_e4be_dde5;
pub const EMBEDDER_STAGES: usize = 3;
/// Taps feeding the perceptual term.
pub const PERCEPTUAL_TAPS: &[usize] = &[1, 2];
/// Tap feeding the identity term (deepest).
pub const IDENTITY_TAPS: &[usize] = &[3];

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid embedder tap {0} (valid taps are 1..={EMBEDDER_STAGES})")]
    Tap(usize),
    #[error("no taps selected")]
    NoTaps,
    #[error("negative loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for LossError {
    fn from(e: crate::tensor::TensorError) -> Self {
        LossError::Model(e.into())
    }
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Balancing weights of the generation objective plus the proximity weight
/// consumed by the federated local objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 1.0,
            lambda_b: 10.0,
            lambda_c: 100.0,
            lambda_d: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_a", self.lambda_a),
            ("lambda_b", self.lambda_b),
            ("lambda_c", self.lambda_c),
            ("lambda_d", self.lambda_d),
        ] {
            if !(value >= 0.0) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Frozen strided conv net standing in for the perceptual and identity
/// backbones. Weights never receive gradients.
#[derive(Debug, Clone)]
pub struct FixedEmbedder {
    params: ParamVector,
}

impl FixedEmbedder {
    pub fn new(arch: &ArchConfig) -> std::result::Result<Self, ModelError> {
        Self::with_seed(arch, EMBEDDER_SEED)
    }

    pub fn with_seed(arch: &ArchConfig, seed: u64) -> std::result::Result<Self, ModelError> {
        let mut init = crate::model::Init::new(seed);
        let mut pv = ParamVector::new();
        let mut cin = arch.out_channels;
        for k in 0..EMBEDDER_STAGES {
            let cout = arch.embed_width << k;
            init.conv(&mut pv, &format!("v{k}"), cout, cin, 3, 1.0)?;
            cin = cout;
        }
        Ok(FixedEmbedder {
            params: pv.frozen_copy(),
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Activations after each stage (taps 1..=3).
    pub fn embed(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(EMBEDDER_STAGES);
        let mut x = img.clone();
        for k in 0..EMBEDDER_STAGES {
            let w = self.params.get(&format!("v{k}.w")).expect("embedder weight");
            let b = self.params.get(&format!("v{k}.b")).expect("embedder bias");
            x = leaky_relu(&conv2d(&x, w, b, 2, 1)?, LEAKY_SLOPE)?;
            taps.push(x.clone());
        }
        Ok(taps)
    }

    /// Deepest-tap features per sample, flattened.
    pub fn identity_features(&self, img: &Tensor) -> Result<Vec<Vec<f64>>> {
        let deepest = self.embed(img)?.pop().expect("embedder has stages");
        let n = deepest.shape()[0];
        let per = deepest.numel() / n;
        Ok(deepest.data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

fn check_taps(taps: &[usize]) -> Result<()> {
    if taps.is_empty() {
        return Err(LossError::NoTaps);
    }
    match taps.iter().find(|&&t| t == 0 || t > EMBEDDER_STAGES) {
        Some(&t) => Err(LossError::Tap(t)),
        None => Ok(()),
    }
}

/// Mean absolute pixel difference.
pub fn reconstruction_loss(gen: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(l1(gen, gt)?)
}

/// Sum over `taps` of the size-normalised L1 distance between embeddings.
pub fn feature_distance(a: &Tensor, b: &Tensor, embedder: &FixedEmbedder, taps: &[usize]) -> Result<Tensor> {
    check_taps(taps)?;
    let fa = embedder.embed(a)?;
    let fb = embedder.embed(b)?;
    feature_distance_from(&fa, &fb, taps)
}

fn feature_distance_from(fa: &[Tensor], fb: &[Tensor], taps: &[usize]) -> Result<Tensor> {
    check_taps(taps)?;
    let terms = taps
        .iter()
        .map(|&t| l1(&fa[t - 1], &fb[t - 1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sum_all(&terms)?)
}

fn neg_softplus_mean(logits: &Tensor) -> Result<Tensor> {
    Ok(mean(&softplus(&scale(logits, -1.0)?)?)?)
}

/// mean(softplus(−D(fake))).
pub fn adversarial_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    neg_softplus_mean(fake_logits)
}

/// mean(softplus(−D(real))) + mean(softplus(D(fake))).
pub fn adversarial_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = neg_softplus_mean(real_logits)?;
    let fake = mean(&softplus(fake_logits)?)?;
    Ok(add(&real, &fake)?)
}

/// Unweighted term values of one generator objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub r: f64,
    pub adv: f64,
    pub p: f64,
    pub id: f64,
}

impl LossBreakdown {
    pub fn reweighted(&self, w: &LossWeights) -> f64 {
        self.r + w.lambda_a * self.adv + w.lambda_b * self.p + w.lambda_c * self.id
    }
}

/// L_r + λa·L_adv + λb·L_p + λc·L_id. Terms whose weight is zero are not
/// built at all, so they contribute nothing to the gradient.
pub fn gen_loss(
    gen: &Tensor,
    gt: &Tensor,
    fake_logits: Option<&Tensor>,
    embedder: &FixedEmbedder,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let lr = reconstruction_loss(gen, gt)?;
    let mut bd = LossBreakdown {
        r: lr.item(),
        ..LossBreakdown::default()
    };
    let mut terms = vec![lr];
    if weights.lambda_a > 0.0 {
        let logits = fake_logits.ok_or_else(|| {
            LossError::Model(ModelError::Config("adversarial weight set but no logits given".into()))
        })?;
        let adv = adversarial_g_loss(logits)?;
        bd.adv = adv.item();
        terms.push(scale(&adv, weights.lambda_a)?);
    }
    if weights.lambda_b > 0.0 || weights.lambda_c > 0.0 {
        let fg = embedder.embed(gen)?;
        let ft = embedder.embed(gt)?;
        if weights.lambda_b > 0.0 {
            let p = feature_distance_from(&fg, &ft, PERCEPTUAL_TAPS)?;
            bd.p = p.item();
            terms.push(scale(&p, weights.lambda_b)?);
        }
        if weights.lambda_c > 0.0 {
            let id = feature_distance_from(&fg, &ft, IDENTITY_TAPS)?;
            bd.id = id.item();
            terms.push(scale(&id, weights.lambda_c)?);
        }
    }
    let total = sum_all(&terms)?;
    bd.total = total.item();
    Ok((total, bd))
}
