use crate::tensor::{
    add, add_scalar, channel_affine, concat, conv2d, downsample2x, global_avg_pool, hadamard,
    instance_norm, leaky_relu, linear, sigmoid, slice, upsample2x, ParamVector, Tensor,
};

use super::{param, ArchConfig, Init, LatentPack, ModelError, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ADAIN_EPS: f64 = 1e-5;

fn conv(x: &Tensor, pv: &ParamVector, name: &str, stride: usize) -> Result<Tensor> {
    let w = param(pv, &format!("{name}.w"))?;
    let b = param(pv, &format!("{name}.b"))?;
    let pad = (w.shape()[2] - 1) / 2;
    Ok(conv2d(x, w, b, stride, pad)?)
}

fn conv_act(x: &Tensor, pv: &ParamVector, name: &str, stride: usize) -> Result<Tensor> {
    Ok(leaky_relu(&conv(x, pv, name, stride)?, LEAKY_SLOPE)?)
}

fn dense(x: &Tensor, pv: &ParamVector, name: &str) -> Result<Tensor> {
    let w = param(pv, &format!("{name}.w"))?;
    let b = param(pv, &format!("{name}.b"))?;
    Ok(linear(x, w, b)?)
}

/// Pixel-wise scale and shift for one decoder stage.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// γ, β from a multi-scale feature via a 1×1 conv emitting 2C channels;
/// γ is `1 + first half` so a zero conv is the identity calibration.
pub fn modulation(feat: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<ModulationParams> {
    let c2 = weight.shape()[0];
    if c2 % 2 != 0 {
        return Err(ModelError::Config(format!(
            "calibration conv must emit an even channel count, got {c2}"
        )));
    }
    let raw = conv2d(feat, weight, bias, 1, 0)?;
    let c = c2 / 2;
    Ok(ModulationParams {
        gamma: add_scalar(&slice(&raw, 1, 0, c)?, 1.0)?,
        beta: slice(&raw, 1, c, c)?,
    })
}

/// S⁺ = γ ⊙ S⁻ + β.
pub fn calibrate(s_minus: &Tensor, feat: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if s_minus.shape().len() != 4
        || feat.shape().len() != 4
        || s_minus.shape()[2..] != feat.shape()[2..]
    {
        return Err(ModelError::Tensor(crate::tensor::TensorError::Shape {
            op: "calibrate",
            detail: format!("feature {:?} vs activation {:?}", feat.shape(), s_minus.shape()),
        }));
    }
    let m = modulation(feat, weight, bias)?;
    Ok(add(&hadamard(&m.gamma, s_minus)?, &m.beta)?)
}

/// AdaIN: instance-normalise `s`, then per-channel scale/shift from a learned
/// affine map of the style code. Scale is parameterised as `1 + a`.
pub fn style_inject(s: &Tensor, style: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = s.shape()[1];
    let ab = linear(style, weight, bias)?;
    if ab.shape()[1] != 2 * c {
        return Err(ModelError::Config(format!(
            "style affine emits {} values for {c} channels",
            ab.shape()[1]
        )));
    }
    let scale = add_scalar(&slice(&ab, 1, 0, c)?, 1.0)?;
    let shift = slice(&ab, 1, c, c)?;
    Ok(channel_affine(&instance_norm(s, ADAIN_EPS)?, &scale, &shift)?)
}

fn resize_to(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let mut out = x.clone();
    let mut size = from;
    while size < to {
        out = upsample2x(&out)?;
        size *= 2;
    }
    while size > to {
        out = downsample2x(&out)?;
        size /= 2;
    }
    Ok(out)
}

/// Encoder-side network. Parameters are passed in rather than owned so the
/// same architecture can run with live, frozen, or anchor weights.
#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: ArchConfig,
    pub msca_on: bool,
}

impl Generator {
    pub fn new(arch: ArchConfig, msca_on: bool) -> Result<Self> {
        arch.validate()?;
        Ok(Generator { arch, msca_on })
    }

    /// Fresh encoder parameters: UNet encoder/decoder, MSCA fusers, style MLP,
    /// per-stage style affines and (zero-initialised) calibration convs.
    pub fn init_encoder(&self, seed: u64) -> Result<ParamVector> {
        let a = &self.arch;
        let mut init = Init::new(seed);
        let mut pv = ParamVector::new();
        for l in 0..a.encoder_levels() {
            let cin = if l == 0 { a.in_channels } else { a.encoder_width(l - 1) };
            init.conv(&mut pv, &format!("e{l}"), a.encoder_width(l), cin, 3, 1.0)?;
        }
        if self.msca_on {
            for l in 0..a.encoder_levels() {
                init.conv(&mut pv, &format!("msca{l}"), a.encoder_width(l), a.msca_in_width(), 1, 1.0)?;
            }
        }
        let top = a.encoder_width(a.encoder_stages);
        for k in 0..a.mlp_layers {
            let fin = if k == 0 { top } else { a.style_dim };
            let gain = if k + 1 == a.mlp_layers { 1.0 } else { 2f64.sqrt() };
            init.linear(&mut pv, &format!("mlp{k}"), a.style_dim, fin, gain)?;
        }
        let mut prev = top;
        for s in 1..=a.decoder_stages {
            let skip = a.skip_level(s).map_or(0, |l| a.encoder_width(l));
            init.conv(&mut pv, &format!("dec{s}"), a.stage_width(s), prev + skip, 3, 1.0)?;
            prev = a.stage_width(s);
        }
        init_affines(&mut init, &mut pv, a)?;
        for s in 1..=a.decoder_stages {
            init.zero_conv(&mut pv, &format!("calib{s}"), 2 * a.stage_width(s), a.stage_width(s))?;
        }
        Ok(pv)
    }

    /// E_1..E_m, fine to coarse.
    pub fn encode(&self, enc: &ParamVector, img: &Tensor) -> Result<Vec<Tensor>> {
        let a = &self.arch;
        let expect = [a.in_channels, a.input_size, a.input_size];
        if img.shape().len() != 4 || img.shape()[1..] != expect {
            return Err(ModelError::Tensor(crate::tensor::TensorError::Shape {
                op: "encode",
                detail: format!("input {:?}, expected [N,{},{},{}]", img.shape(), expect[0], expect[1], expect[2]),
            }));
        }
        let mut feats = Vec::with_capacity(a.encoder_levels());
        let mut x = conv_act(img, enc, "e0", 1)?;
        feats.push(x.clone());
        for l in 1..a.encoder_levels() {
            x = conv_act(&x, enc, &format!("e{l}"), 2)?;
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Aggregated context at encoder level `level` (0-based): every scale is
    /// resized to this level, concatenated, and fused by a 1×1 conv.
    pub fn msca(&self, enc: &ParamVector, feats: &[Tensor], level: usize) -> Result<Tensor> {
        if level >= feats.len() {
            return Err(ModelError::Config(format!(
                "MSCA level {level} out of range for {} scales",
                feats.len()
            )));
        }
        let target = feats[level].shape()[2];
        let resized = feats
            .iter()
            .map(|f| resize_to(f, f.shape()[2], target))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = resized.iter().collect();
        conv(&concat(&refs, 1)?, enc, &format!("msca{level}"), 1)
    }

    fn aggregate(&self, enc: &ParamVector, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        if self.msca_on {
            (0..feats.len()).map(|l| self.msca(enc, feats, l)).collect()
        } else {
            Ok(feats.to_vec())
        }
    }

    /// Style code from the pooled coarsest context and the UNet decoder
    /// features, one per prior stage.
    pub fn decode_latents(&self, enc: &ParamVector, contexts: &[Tensor]) -> Result<LatentPack> {
        let a = &self.arch;
        let top = contexts
            .last()
            .ok_or_else(|| ModelError::Config("no context features".into()))?;
        let mut h = global_avg_pool(top)?;
        for k in 0..a.mlp_layers {
            h = dense(&h, enc, &format!("mlp{k}"))?;
            if k + 1 < a.mlp_layers {
                h = leaky_relu(&h, LEAKY_SLOPE)?;
            }
        }
        let mut x = top.clone();
        let mut features = Vec::with_capacity(a.decoder_stages);
        for s in 1..=a.decoder_stages {
            x = upsample2x(&x)?;
            if let Some(l) = a.skip_level(s) {
                x = concat(&[&x, &contexts[l]], 1)?;
            }
            x = conv_act(&x, enc, &format!("dec{s}"), 1)?;
            features.push(x.clone());
        }
        Ok(LatentPack { style: h, features })
    }

    pub fn latents(&self, enc: &ParamVector, img: &Tensor) -> Result<LatentPack> {
        let feats = self.encode(enc, img)?;
        let ctx = self.aggregate(enc, &feats)?;
        self.decode_latents(enc, &ctx)
    }

    /// Runs the prior decoder. `control` supplies the style affines and, when
    /// `features` is given, the calibration convs.
    pub fn synthesize(
        &self,
        synth: &ParamVector,
        control: &ParamVector,
        style: &Tensor,
        features: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let a = &self.arch;
        let n = style.shape()[0];
        let c0 = param(synth, "const")?;
        let copies: Vec<&Tensor> = std::iter::repeat_n(c0, n).collect();
        let mut x = concat(&copies, 0)?;
        for s in 1..=a.decoder_stages {
            x = upsample2x(&x)?;
            x = conv_act(&x, synth, &format!("conv{s}"), 1)?;
            x = style_inject(
                &x,
                style,
                param(control, &format!("affine{s}.w"))?,
                param(control, &format!("affine{s}.b"))?,
            )?;
            if let Some(f) = features {
                x = calibrate(
                    &x,
                    &f[s - 1],
                    param(control, &format!("calib{s}.w"))?,
                    param(control, &format!("calib{s}.b"))?,
                )?;
            }
        }
        Ok(sigmoid(&conv(&x, synth, "rgb", 1)?)?)
    }

    /// Thermal [N,1,32,32] → visible [N,3,64,64] in (0,1).
    pub fn hallucinate(&self, enc: &ParamVector, synth: &ParamVector, img: &Tensor) -> Result<Tensor> {
        let lp = self.latents(enc, img)?;
        self.synthesize(synth, enc, &lp.style, Some(&lp.features))
    }

    /// Random prior-decoder weights (learned constant, stage convs, to-RGB).
    pub fn init_synthesis(&self, seed: u64) -> Result<ParamVector> {
        let a = &self.arch;
        let mut init = Init::new(seed);
        let mut pv = ParamVector::new();
        let c0 = a.stage_width(0);
        let cs = a.coarsest_size();
        pv.push("const", Tensor::param(&[1, c0, cs, cs], init.normal(c0 * cs * cs, 1.0))?)?;
        for s in 1..=a.decoder_stages {
            init.conv(&mut pv, &format!("conv{s}"), a.stage_width(s), a.stage_width(s - 1), 3, 1.0)?;
        }
        init.conv(&mut pv, "rgb", a.out_channels, a.stage_width(a.decoder_stages), 1, 1.0)?;
        Ok(pv)
    }

    /// Style affines alone (what the prior pretraining trains alongside the
    /// synthesis weights).
    pub fn init_affines(&self, seed: u64) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        init_affines(&mut Init::new(seed), &mut pv, &self.arch)?;
        Ok(pv)
    }
}

fn init_affines(init: &mut Init, pv: &mut ParamVector, a: &ArchConfig) -> Result<()> {
    for s in 1..=a.decoder_stages {
        init.linear(pv, &format!("affine{s}"), 2 * a.stage_width(s), a.style_dim, 0.5)?;
    }
    Ok(())
}
