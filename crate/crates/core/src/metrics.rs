//! Evaluation: pixel fidelity (PSNR, SSIM, L1), identity degree and
//! gallery/probe verification (Rank-1, VR@FAR).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{PairedSample, VISIBLE_LEN, VISIBLE_SIZE};
use crate::losses::{FixedEmbedder, LossError};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const EMBED_CHUNK: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Shape(format!("psnr of {} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one h×w plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|t| g[t] * x[y * w + ox + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|t| g[t] * rows[(oy + t) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions, averaged across channels.
/// Images are laid out channel-major as [c, h, w].
pub fn ssim(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> Result<f64> {
    if a.len() != channels * h * w || b.len() != a.len() {
        return Err(MetricError::Shape(format!(
            "ssim expects {channels}x{h}x{w} = {} values, got {} and {}",
            channels * h * w,
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW || channels == 0 {
        return Err(MetricError::Config(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &g);
        let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &g);
        let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &g);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / channels as f64)
}

/// 100 × cosine similarity. A zero-norm side yields `(0.0, true)`.
pub fn cosine_degree(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    ((100.0 * dot / (na * nb)).clamp(-100.0, 100.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DegreeSummary {
    pub mean: f64,
    pub zero_norm: usize,
}

/// Mean identity degree between paired batches [N,3,H,W].
pub fn identity_degree(gen: &Tensor, gt: &Tensor, embedder: &FixedEmbedder) -> Result<DegreeSummary> {
    if gen.shape() != gt.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", gen.shape(), gt.shape())));
    }
    let fg = embedder.identity_features(gen)?;
    let ft = embedder.identity_features(gt)?;
    Ok(degree_of_features(&fg, &ft))
}

fn degree_of_features(fg: &[Vec<f64>], ft: &[Vec<f64>]) -> DegreeSummary {
    let mut s = DegreeSummary::default();
    for (a, b) in fg.iter().zip(ft) {
        let (d, zero) = cosine_degree(a, b);
        s.mean += d;
        s.zero_norm += usize::from(zero);
    }
    s.mean /= fg.len().max(1) as f64;
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub rank1: f64,
    pub vr_far1: f64,
    pub vr_far01: f64,
    /// Fewer impostor pairs than 1/0.001, so the 0.1% operating point is coarse.
    pub far_resolution_limited: bool,
}

/// VR (%) at the smallest threshold whose impostor acceptance fraction is at
/// most `far`; acceptance means a score strictly above the threshold.
pub fn vr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    if genuine.is_empty() {
        return 0.0;
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far * imp.len() as f64 + 1e-9).floor() as usize;
    let accepted = match imp.get(allowed) {
        Some(&t) => genuine.iter().filter(|&&g| g > t).count(),
        None => genuine.len(),
    };
    100.0 * accepted as f64 / genuine.len() as f64
}

/// Verification from a probe × gallery score matrix. Rank-1 takes the first
/// gallery index among tied maxima.
pub fn verify_scores(scores: &[Vec<f64>], probe_ids: &[u32], gallery_ids: &[u32]) -> Result<Verification> {
    if gallery_ids.len() < 2 {
        return Err(MetricError::Config("verification needs at least 2 identities".into()));
    }
    if scores.len() != probe_ids.len() || scores.iter().any(|r| r.len() != gallery_ids.len()) {
        return Err(MetricError::Shape("score matrix does not match probe/gallery sizes".into()));
    }
    let mut hits = 0usize;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (row, pid) in scores.iter().zip(probe_ids) {
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(gallery_ids[best] == *pid);
        for (s, gid) in row.iter().zip(gallery_ids) {
            if gid == pid {
                genuine.push(*s);
            } else {
                impostor.push(*s);
            }
        }
    }
    Ok(Verification {
        rank1: 100.0 * hits as f64 / probe_ids.len().max(1) as f64,
        vr_far1: vr_at_far(&genuine, &impostor, 0.01),
        vr_far01: vr_at_far(&genuine, &impostor, 0.001),
        far_resolution_limited: (impostor.len() as f64) < 1.0 / 0.001,
    })
}

/// One gallery image per identity plus every probe, in feature space.
#[derive(Debug, Clone)]
pub struct GalleryProbeSet {
    pub gallery_ids: Vec<u32>,
    pub gallery: Vec<Vec<f64>>,
    pub probe_ids: Vec<u32>,
    pub probes: Vec<Vec<f64>>,
}

impl GalleryProbeSet {
    pub fn verify(&self) -> Result<Verification> {
        let scores: Vec<Vec<f64>> = self
            .probes
            .iter()
            .map(|p| self.gallery.iter().map(|g| cosine_degree(p, g).0 / 100.0).collect())
            .collect();
        verify_scores(&scores, &self.probe_ids, &self.gallery_ids)
    }
}

/// Metrics of one test split, averaged over its probes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricBundle {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub deg: f64,
    pub rank1: f64,
    pub vr_far1: f64,
    pub vr_far01: f64,
    pub far_resolution_limited: bool,
    pub deg_zero_norm: usize,
    pub probes: usize,
}

impl MetricBundle {
    pub const FIELDS: [&'static str; 10] = [
        "psnr",
        "ssim",
        "l1",
        "deg",
        "rank1",
        "vr_far1",
        "vr_far01",
        "far_resolution_limited",
        "deg_zero_norm",
        "probes",
    ];

    pub fn csv_values(&self) -> Vec<String> {
        vec![
            format!("{:.17e}", self.psnr),
            format!("{:.17e}", self.ssim),
            format!("{:.17e}", self.l1),
            format!("{:.17e}", self.deg),
            format!("{:.17e}", self.rank1),
            format!("{:.17e}", self.vr_far1),
            format!("{:.17e}", self.vr_far01),
            u8::from(self.far_resolution_limited).to_string(),
            self.deg_zero_norm.to_string(),
            self.probes.to_string(),
        ]
    }

    pub fn from_csv_values(v: &[&str]) -> Option<MetricBundle> {
        if v.len() != Self::FIELDS.len() {
            return None;
        }
        let f = |i: usize| v[i].parse::<f64>().ok();
        Some(MetricBundle {
            psnr: f(0)?,
            ssim: f(1)?,
            l1: f(2)?,
            deg: f(3)?,
            rank1: f(4)?,
            vr_far1: f(5)?,
            vr_far01: f(6)?,
            far_resolution_limited: v[7] == "1",
            deg_zero_norm: v[8].parse().ok()?,
            probes: v[9].parse().ok()?,
        })
    }

    /// Unweighted mean across splits; flags and counts are combined.
    pub fn average(bundles: &[MetricBundle]) -> MetricBundle {
        let n = bundles.len().max(1) as f64;
        let m = |f: fn(&MetricBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        MetricBundle {
            psnr: m(|b| b.psnr),
            ssim: m(|b| b.ssim),
            l1: m(|b| b.l1),
            deg: m(|b| b.deg),
            rank1: m(|b| b.rank1),
            vr_far1: m(|b| b.vr_far1),
            vr_far01: m(|b| b.vr_far01),
            far_resolution_limited: bundles.iter().any(|b| b.far_resolution_limited),
            deg_zero_norm: bundles.iter().map(|b| b.deg_zero_norm).sum(),
            probes: bundles.iter().map(|b| b.probes).sum(),
        }
    }
}

fn features_of(images: &[&[f64]], embedder: &FixedEmbedder) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let data: Vec<f64> = chunk.iter().flat_map(|i| i.iter().copied()).collect();
        let t = Tensor::new(&[chunk.len(), 3, VISIBLE_SIZE, VISIBLE_SIZE], data)
            .map_err(|e| MetricError::Loss(e.into()))?;
        out.extend(embedder.identity_features(&t)?);
    }
    Ok(out)
}

/// Scores hallucinated outputs (one [3,64,64] image per test sample) against
/// their split. The gallery holds each identity's lowest-variation visible
/// image; every output is a probe.
pub fn evaluate_outputs(outputs: &[Vec<f64>], samples: &[Arc<PairedSample>], embedder: &FixedEmbedder) -> Result<MetricBundle> {
    if outputs.len() != samples.len() || samples.is_empty() {
        return Err(MetricError::Shape(format!("{} outputs for {} samples", outputs.len(), samples.len())));
    }
    let gts: Vec<Vec<f64>> = samples.iter().map(|s| s.visible.iter().map(|&v| v as f64).collect()).collect();
    let mut b = MetricBundle {
        probes: samples.len(),
        ..MetricBundle::default()
    };
    for (o, g) in outputs.iter().zip(&gts) {
        if o.len() != VISIBLE_LEN {
            return Err(MetricError::Shape(format!("output has {} values, expected {VISIBLE_LEN}", o.len())));
        }
        b.psnr += psnr(o, g, 1.0)?;
        b.ssim += ssim(o, g, 3, VISIBLE_SIZE, VISIBLE_SIZE)?;
        b.l1 += o.iter().zip(g).map(|(x, y)| (x - y).abs()).sum::<f64>() / VISIBLE_LEN as f64;
    }
    let n = samples.len() as f64;
    b.psnr /= n;
    b.ssim /= n;
    b.l1 /= n;

    let out_refs: Vec<&[f64]> = outputs.iter().map(Vec::as_slice).collect();
    let gt_refs: Vec<&[f64]> = gts.iter().map(Vec::as_slice).collect();
    let probe_feats = features_of(&out_refs, embedder)?;
    let gt_feats = features_of(&gt_refs, embedder)?;
    let deg = degree_of_features(&probe_feats, &gt_feats);
    b.deg = deg.mean;
    b.deg_zero_norm = deg.zero_norm;

    let mut first: BTreeMap<u32, (u16, usize)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let e = first.entry(s.identity_id).or_insert((s.variation_id, i));
        if s.variation_id < e.0 {
            *e = (s.variation_id, i);
        }
    }
    let gp = GalleryProbeSet {
        gallery_ids: first.keys().copied().collect(),
        gallery: first.values().map(|&(_, i)| gt_feats[i].clone()).collect(),
        probe_ids: samples.iter().map(|s| s.identity_id).collect(),
        probes: probe_feats,
    };
    let v = gp.verify()?;
    b.rank1 = v.rank1;
    b.vr_far1 = v.vr_far1;
    b.vr_far01 = v.vr_far01;
    b.far_resolution_limited = v.far_resolution_limited;
    Ok(b)
}
