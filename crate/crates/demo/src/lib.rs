//! Browser bindings: render corpus faces, partition a toy corpus over
//! clients, and score a noisy copy of a face with PSNR/SSIM.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use vpfl::data::{dirichlet_partition, render_pair, IdentitySpec, PairedSample, StyleTag, VariationRange, THERMAL_SIZE, VISIBLE_SIZE};
use vpfl::metrics::{psnr, ssim};

/// Width of the side-by-side image returned by [`render_face`].
#[wasm_bindgen]
pub fn pair_width() -> usize {
    2 * VISIBLE_SIZE
}

#[wasm_bindgen]
pub fn face_size() -> usize {
    VISIBLE_SIZE
}

fn style(easy: bool) -> (StyleTag, VariationRange) {
    if easy {
        (StyleTag::B, VariationRange::EASY)
    } else {
        (StyleTag::A, VariationRange::HARD)
    }
}

fn sample(seed: u64, identity: u32, variation: u16, easy: bool) -> Result<PairedSample, JsError> {
    let (tag, range) = style(easy);
    let spec = IdentitySpec::generate(seed, identity, tag);
    render_pair(&spec, variation, &range, seed).map_err(|e| JsError::new(&e.to_string()))
}

fn put(rgba: &mut [u8], width: usize, x: usize, y: usize, rgb: [f32; 3]) {
    let o = 4 * (y * width + x);
    for c in 0..3 {
        rgba[o + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    rgba[o + 3] = 255;
}

fn draw_visible(rgba: &mut [u8], width: usize, x0: usize, vis: &[f32]) {
    let n = VISIBLE_SIZE;
    let plane = n * n;
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            put(rgba, width, x0 + x, y, [vis[p], vis[plane + p], vis[2 * plane + p]]);
        }
    }
}

/// RGBA pixels of one capture: visible face on the left, its thermal
/// counterpart (nearest-neighbour upscaled) on the right.
#[wasm_bindgen]
pub fn render_face(seed: u32, identity: u32, variation: u16, easy: bool) -> Result<Vec<u8>, JsError> {
    let s = sample(seed as u64, identity, variation, easy)?;
    let (w, n) = (pair_width(), VISIBLE_SIZE);
    let mut rgba = vec![0u8; 4 * w * n];
    draw_visible(&mut rgba, w, 0, &s.visible);
    let up = VISIBLE_SIZE / THERMAL_SIZE;
    for y in 0..n {
        for x in 0..n {
            let t = s.thermal[(y / up) * THERMAL_SIZE + x / up];
            put(&mut rgba, w, n + x, y, [t, t, t]);
        }
    }
    Ok(rgba)
}

/// Dirichlet split of `identities × variations` samples over `clients`.
/// Returns, per client, the sample count followed by the number of distinct
/// identities it holds.
#[wasm_bindgen]
pub fn partition(identities: u32, variations: u16, clients: usize, alpha: f64, seed: u32) -> Result<Vec<u32>, JsError> {
    let samples: Vec<Arc<PairedSample>> = (0..identities)
        .flat_map(|id| {
            (0..variations).map(move |v| {
                Arc::new(PairedSample {
                    visible: Vec::new(),
                    thermal: Vec::new(),
                    identity_id: id,
                    variation_id: v,
                    style: StyleTag::A,
                })
            })
        })
        .collect();
    let shards = dirichlet_partition(&samples, clients, alpha, seed as u64, 0).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(shards
        .iter()
        .flat_map(|s| {
            let mut ids: Vec<u32> = s.samples.iter().map(|p| p.identity_id).collect();
            ids.sort_unstable();
            ids.dedup();
            [s.len() as u32, ids.len() as u32]
        })
        .collect())
}

/// A visible face with Gaussian pixel noise and its fidelity to the clean face.
#[wasm_bindgen]
pub struct NoisyFace {
    rgba: Vec<u8>,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl NoisyFace {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, identity: u32, variation: u16, easy: bool, sigma: f64) -> Result<NoisyFace, JsError> {
        let clean = sample(seed as u64, identity, variation, easy)?.visible;
        let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| JsError::new(&e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0x6e6f697365);
        let noisy: Vec<f32> = clean
            .iter()
            .map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect();
        let a: Vec<f64> = clean.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = noisy.iter().map(|&v| v as f64).collect();
        let n = VISIBLE_SIZE;
        let err = |e: vpfl::metrics::MetricError| JsError::new(&e.to_string());
        let psnr = psnr(&a, &b, 1.0).map_err(err)?;
        let ssim = ssim(&a, &b, 3, n, n).map_err(err)?;
        let mut rgba = vec![0u8; 4 * n * n];
        draw_visible(&mut rgba, n, 0, &noisy);
        Ok(NoisyFace { rgba, psnr, ssim })
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}
