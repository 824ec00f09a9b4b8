//! Procedural faces: a few anti-aliased ellipses and curves whose geometry
//! and palette are functions of the identity, and whose placement and
//! brightness vary per capture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, PairedSample, StyleTag, THERMAL_SIZE, VISIBLE_SIZE};

pub const THERMAL_NOISE_SIGMA: f64 = 0.02;
const SUPERSAMPLE: usize = 4;

/// Per-identity face parameters. Every field lies in the bounds checked by
/// [`IdentitySpec::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: u32,
    /// Face ellipse half-axes, fraction of the image.
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_spacing: f64,
    pub eye_size: f64,
    /// Signed: positive smiles.
    pub mouth_curve: f64,
    pub nose_len: f64,
    pub hue: f64,
    pub skin_lum: f64,
    pub hair_height: f64,
    pub style: StyleTag,
}

const BOUNDS: [(&str, f64, f64); 9] = [
    ("face_rx", 0.24, 0.36),
    ("face_ry", 0.30, 0.42),
    ("eye_spacing", 0.08, 0.16),
    ("eye_size", 0.025, 0.06),
    ("mouth_curve", -1.0, 1.0),
    ("nose_len", 0.05, 0.14),
    ("hue", 0.0, 1.0),
    ("skin_lum", 0.35, 0.85),
    ("hair_height", 0.05, 0.22),
];

fn mix(seed: u64, id: u64) -> u64 {
    // splitmix64 finaliser over the pair.
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(seed, |acc, &p| mix(acc, p));
    ChaCha8Rng::seed_from_u64(s)
}

impl IdentitySpec {
    /// Pure function of (corpus seed, identity id).
    pub fn generate(corpus_seed: u64, identity_id: u32, style: StyleTag) -> IdentitySpec {
        let mut rng = stream(corpus_seed, &[0x1d, identity_id as u64]);
        let mut draw = |k: usize| {
            let (_, lo, hi) = BOUNDS[k];
            rng.random_range(lo..=hi)
        };
        IdentitySpec {
            identity_id,
            face_rx: draw(0),
            face_ry: draw(1),
            eye_spacing: draw(2),
            eye_size: draw(3),
            mouth_curve: draw(4),
            nose_len: draw(5),
            hue: draw(6),
            skin_lum: draw(7),
            hair_height: draw(8),
            style,
        }
    }

    fn values(&self) -> [f64; 9] {
        [
            self.face_rx,
            self.face_ry,
            self.eye_spacing,
            self.eye_size,
            self.mouth_curve,
            self.nose_len,
            self.hue,
            self.skin_lum,
            self.hair_height,
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for ((name, lo, hi), v) in BOUNDS.iter().zip(self.values()) {
            if !(v >= *lo && v <= *hi) {
                return Err(DataError::Config(format!(
                    "identity {}: {name} = {v} outside [{lo}, {hi}]",
                    self.identity_id
                )));
            }
        }
        Ok(())
    }
}

/// How much a capture may deviate from the canonical pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationRange {
    /// Max translation, fraction of the image.
    pub shift: f64,
    /// Max additive brightness change.
    pub brightness: f64,
    /// Max change of mouth curvature (expression).
    pub expression: f64,
}

impl VariationRange {
    /// Large pose and illumination spread.
    pub const HARD: VariationRange = VariationRange {
        shift: 0.08,
        brightness: 0.2,
        expression: 0.3,
    };
    /// Expression changes only, small jitter.
    pub const EASY: VariationRange = VariationRange {
        shift: 0.015,
        brightness: 0.04,
        expression: 0.5,
    };
}

#[derive(Debug, Clone, Copy)]
struct Nuisance {
    dx: f64,
    dy: f64,
    brightness: f64,
    expression: f64,
}

fn nuisance(seed: u64, identity_id: u32, variation_id: u16, range: &VariationRange) -> Nuisance {
    if variation_id == 0 {
        return Nuisance {
            dx: 0.0,
            dy: 0.0,
            brightness: 0.0,
            expression: 0.0,
        };
    }
    let mut rng = stream(seed, &[0x7a, identity_id as u64, variation_id as u64]);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    Nuisance {
        dx: sym(range.shift),
        dy: sym(range.shift),
        brightness: sym(range.brightness),
        expression: sym(range.expression),
    }
}

type Rgb = [f64; 3];

fn hsl(h: f64, s: f64, l: f64) -> Rgb {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m]
}

struct Palette {
    background: Rgb,
    hair: Rgb,
    skin: Rgb,
    eye: Rgb,
    mouth: Rgb,
    nose: Rgb,
}

fn palette(spec: &IdentitySpec) -> Palette {
    // Style A renders warm, style B cool; the identity hue moves within that family.
    let (base, bg) = match spec.style {
        StyleTag::A => (0.02 + 0.10 * spec.hue, hsl(0.08, 0.35, 0.22)),
        StyleTag::B => (0.50 + 0.12 * spec.hue, hsl(0.60, 0.30, 0.72)),
    };
    let skin = hsl(base, 0.45, spec.skin_lum);
    Palette {
        background: bg,
        hair: hsl(base + 0.5 * spec.hue, 0.5, 0.12 + 0.25 * spec.hue),
        skin,
        eye: [0.05, 0.05, 0.08],
        mouth: hsl(0.97, 0.55, 0.35),
        nose: skin.map(|v| v * 0.7),
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let u = (x - cx) / rx;
    let v = (y - cy) / ry;
    u * u + v * v <= 1.0
}

/// Colour at continuous coordinates in [0,1]².
fn shade(spec: &IdentitySpec, pal: &Palette, nz: &Nuisance, x: f64, y: f64) -> Rgb {
    let cx = 0.5 + nz.dx;
    let cy = 0.52 + nz.dy;
    let face_top = cy - spec.face_ry;
    let mut c = pal.background;
    // Hair: a band ellipse sitting over the top of the face.
    if in_ellipse(x, y, cx, face_top + 0.5 * spec.hair_height, spec.face_rx * 1.15, spec.hair_height + 0.06) {
        c = pal.hair;
    }
    if in_ellipse(x, y, cx, cy, spec.face_rx, spec.face_ry) && y > face_top + 0.7 * spec.hair_height {
        c = pal.skin;
    }
    let eye_y = cy - 0.18 * spec.face_ry;
    for side in [-1.0, 1.0] {
        let ex = cx + side * spec.eye_spacing;
        if in_ellipse(x, y, ex, eye_y, spec.eye_size * 1.6, spec.eye_size) {
            c = [0.92, 0.92, 0.9];
        }
        if in_ellipse(x, y, ex, eye_y, spec.eye_size * 0.7, spec.eye_size * 0.9) {
            c = pal.eye;
        }
        // Brow.
        let by = eye_y - 2.2 * spec.eye_size;
        if (y - by).abs() < 0.012 && (x - ex).abs() < spec.eye_size * 2.0 {
            c = pal.hair;
        }
    }
    let nose_top = eye_y + 0.02;
    if y > nose_top && y < nose_top + spec.nose_len {
        let t = (y - nose_top) / spec.nose_len;
        if (x - cx).abs() < 0.01 + 0.02 * t {
            c = pal.nose;
        }
    }
    let mouth_y = cy + 0.55 * spec.face_ry;
    let half_w = 0.45 * spec.face_rx;
    if (x - cx).abs() < half_w {
        let u = (x - cx) / half_w;
        let curve = (spec.mouth_curve + nz.expression).clamp(-1.3, 1.3);
        let centre = mouth_y - 0.04 * curve * (1.0 - u * u);
        if (y - centre).abs() < 0.014 {
            c = pal.mouth;
        }
    }
    c
}

/// Renders the visible face as [3, 64, 64] in [0,1].
pub fn render_visible(spec: &IdentitySpec, variation_id: u16, range: &VariationRange, seed: u64) -> Result<Vec<f32>, DataError> {
    spec.validate()?;
    let nz = nuisance(seed, spec.identity_id, variation_id, range);
    let pal = palette(spec);
    let n = VISIBLE_SIZE;
    let plane = n * n;
    let mut out = vec![0f32; 3 * plane];
    let ss = SUPERSAMPLE as f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = [0.0; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let y = (i as f64 + (si as f64 + 0.5) / ss) / n as f64;
                    let x = (j as f64 + (sj as f64 + 0.5) / ss) / n as f64;
                    let c = shade(spec, &pal, &nz, x, y);
                    acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                }
            }
            for ch in 0..3 {
                let v = acc[ch] / (ss * ss) + nz.brightness;
                out[ch * plane + i * n + j] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Monotone luminance-to-heat map with heat(0) = 0.
pub fn heat(lum: f64) -> f64 {
    lum.max(0.0).powf(0.7)
}

/// Visible [3,64,64] → thermal [1,32,32]: heat map of luminance, 2× average
/// pooling, 3×3 binomial blur (edge-clamped), additive Gaussian noise, clamp.
pub fn degrade(visible: &[f32], noise_seed: u64) -> Vec<f32> {
    let n = VISIBLE_SIZE;
    let plane = n * n;
    let lum: Vec<f64> = (0..plane)
        .map(|p| {
            0.299 * visible[p] as f64 + 0.587 * visible[plane + p] as f64 + 0.114 * visible[2 * plane + p] as f64
        })
        .map(heat)
        .collect();
    let m = THERMAL_SIZE;
    let mut pooled = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let r0 = 2 * i * n + 2 * j;
            pooled[i * m + j] = 0.25 * (lum[r0] + lum[r0 + 1] + lum[r0 + n] + lum[r0 + n + 1]);
        }
    }
    let k = [0.25, 0.5, 0.25];
    let at = |img: &[f64], i: isize, j: isize| {
        let ci = i.clamp(0, m as isize - 1) as usize;
        let cj = j.clamp(0, m as isize - 1) as usize;
        img[ci * m + cj]
    };
    let mut horiz = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            horiz[i * m + j] = (0..3).map(|d| k[d] * at(&pooled, i as isize, j as isize + d as isize - 1)).sum();
        }
    }
    let mut blurred = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            blurred[i * m + j] = (0..3).map(|d| k[d] * at(&horiz, i as isize + d as isize - 1, j as isize)).sum();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, THERMAL_NOISE_SIGMA).expect("valid sigma");
    blurred
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Renders one visible/thermal capture of an identity.
pub fn render_pair(spec: &IdentitySpec, variation_id: u16, range: &VariationRange, seed: u64) -> Result<PairedSample, DataError> {
    let visible = render_visible(spec, variation_id, range, seed)?;
    let noise_seed = mix(mix(seed, 0x7e), ((spec.identity_id as u64) << 16) | variation_id as u64);
    let thermal = degrade(&visible, noise_seed);
    Ok(PairedSample {
        visible,
        thermal,
        identity_id: spec.identity_id,
        variation_id,
        style: spec.style,
    })
}
