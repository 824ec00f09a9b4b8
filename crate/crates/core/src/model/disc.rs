use crate::tensor::{conv2d, leaky_relu, ParamVector, Tensor};

use super::{param, ArchConfig, Init, Result, LEAKY_SLOPE};

const DISC_LAYERS: usize = 4;

/// Four stride-2 convs; the last emits one logit channel.
pub fn init_discriminator(arch: &ArchConfig, seed: u64) -> Result<ParamVector> {
    let mut init = Init::new(seed);
    let mut pv = ParamVector::new();
    let mut cin = arch.out_channels;
    for k in 0..DISC_LAYERS {
        let last = k + 1 == DISC_LAYERS;
        let cout = if last { 1 } else { arch.disc_width << k };
        init.conv(&mut pv, &format!("d{k}"), cout, cin, 3, if last { 0.5 } else { 1.0 })?;
        cin = cout;
    }
    Ok(pv)
}

/// Patch logits [N,1,H/16,W/16], no sigmoid.
pub fn discriminate(img: &Tensor, disc: &ParamVector) -> Result<Tensor> {
    let mut x = img.clone();
    for k in 0..DISC_LAYERS {
        let w = param(disc, &format!("d{k}.w"))?;
        let b = param(disc, &format!("d{k}.b"))?;
        x = conv2d(&x, w, b, 2, 1)?;
        if k + 1 < DISC_LAYERS {
            x = leaky_relu(&x, LEAKY_SLOPE)?;
        }
    }
    Ok(x)
}
