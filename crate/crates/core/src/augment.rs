//! Stochastic input transforms. Every function draws only from the generator it is given.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::patch::Patch;

/// Noise is `n / NOISE_DIVISOR` with `n` standard normal.
pub const NOISE_DIVISOR: f32 = 25.0;
pub const ALPHA_RANGE: (f32, f32) = (0.9, 1.1);

/// `x ← α·x + noise_scale·n` with `n` drawn elementwise standard normal.
pub fn scale_and_perturb<R: Rng + ?Sized>(x: &mut [f32], alpha: f32, noise_scale: f32, rng: &mut R) {
    for v in x.iter_mut() {
        let n: f32 = StandardNormal.sample(rng);
        *v = alpha * *v + noise_scale * n;
    }
}

/// `x ← α·x + n/25`, one `α ~ U(0.9, 1.1)` per call.
pub fn noise_augment<R: Rng + ?Sized>(x: &mut [f32], rng: &mut R) -> f32 {
    let alpha = rng.random_range(ALPHA_RANGE.0..ALPHA_RANGE.1);
    scale_and_perturb(x, alpha, 1.0 / NOISE_DIVISOR, rng);
    alpha
}

/// The six geometric transforms of the rotation-mirror task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RmTransform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl RmTransform {
    pub const ALL: [RmTransform; 6] = [
        RmTransform::Identity,
        RmTransform::Rot90,
        RmTransform::Rot180,
        RmTransform::Rot270,
        RmTransform::HFlip,
        RmTransform::VFlip,
    ];

    /// 1-based id: 1 = 0°, 2 = 90°, 3 = 180°, 4 = 270°, 5 = horizontal flip, 6 = vertical flip.
    pub fn id(self) -> usize {
        self as usize + 1
    }

    pub fn from_id(k: usize) -> Result<Self> {
        match k {
            1..=6 => Ok(Self::ALL[k - 1]),
            _ => bail!(Config, "rotation-mirror id must be in 1..=6, got {k}"),
        }
    }

    /// Source cell of output cell `(i, j)` in an `s × s` grid.
    pub fn source(self, i: usize, j: usize, s: usize) -> (usize, usize) {
        let l = s - 1;
        match self {
            RmTransform::Identity => (i, j),
            RmTransform::Rot90 => (j, l - i),
            RmTransform::Rot180 => (l - i, l - j),
            RmTransform::Rot270 => (l - j, i),
            RmTransform::HFlip => (i, l - j),
            RmTransform::VFlip => (l - i, j),
        }
    }
}

/// Permute the spatial axes; bands, center and label are carried over.
pub fn rm_transform(patch: &Patch, t: RmTransform) -> Patch {
    if t == RmTransform::Identity {
        return patch.clone();
    }
    let s = patch.size;
    let mut window = Vec::with_capacity(patch.window.len());
    for i in 0..s {
        for j in 0..s {
            let (si, sj) = t.source(i, j, s);
            window.extend_from_slice(patch.pixel(si, sj));
        }
    }
    Patch { window, ..patch.clone() }
}

/// Each input under every transform in `set`, input-major.
pub fn rm_expand_with(batch: &[Patch], set: &[RmTransform]) -> Vec<(Patch, RmTransform)> {
    let mut out = Vec::with_capacity(batch.len() * set.len());
    for p in batch {
        for &t in set {
            out.push((rm_transform(p, t), t));
        }
    }
    out
}

/// Each input under all six transforms, input-major then id-ascending.
pub fn rm_expand(batch: &[Patch]) -> Vec<(Patch, RmTransform)> {
    rm_expand_with(batch, &RmTransform::ALL)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSpectrum {
    pub original: Vec<f32>,
    pub masked: Vec<f32>,
    /// 1 = masked.
    pub mask: Vec<u8>,
}

pub fn mask_count(bands: usize, ratio: f64) -> usize {
    ((ratio * bands as f64).floor() as usize).min(bands)
}

/// Zero exactly `⌊ratio·B⌋` uniformly chosen bands.
pub fn mask_spectrum<R: Rng + ?Sized>(x: &[f32], ratio: f64, rng: &mut R) -> Result<MaskedSpectrum> {
    if !(0.0..=1.0).contains(&ratio) {
        bail!(Config, "mask ratio must lie in [0, 1], got {ratio}");
    }
    let mut mask = vec![0u8; x.len()];
    for i in sample(rng, x.len(), mask_count(x.len(), ratio)) {
        mask[i] = 1;
    }
    let masked = x.iter().zip(&mask).map(|(&v, &m)| if m == 1 { 0.0 } else { v }).collect();
    Ok(MaskedSpectrum {
        original: x.to_vec(),
        masked,
        mask,
    })
}

/// Cubic convolution kernel with `a = -0.75`.
fn cubic_weights(t: f32) -> [f32; 4] {
    const A: f32 = -0.75;
    let near = |x: f32| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f32| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

fn resize_axis(src: &[f32], outer: usize, len: usize, inner: usize, out_len: usize) -> Vec<f32> {
    let scale = len as f32 / out_len as f32;
    let mut out = vec![0f32; outer * out_len * inner];
    for o in 0..out_len {
        let pos = (o as f32 + 0.5) * scale - 0.5;
        let base = pos.floor();
        let w = cubic_weights(pos - base);
        let idx: [usize; 4] =
            std::array::from_fn(|k| (base as isize - 1 + k as isize).clamp(0, len as isize - 1) as usize);
        for a in 0..outer {
            let dst = &mut out[(a * out_len + o) * inner..(a * out_len + o + 1) * inner];
            for k in 0..4 {
                let s = &src[(a * len + idx[k]) * inner..(a * len + idx[k] + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += w[k] * v;
                }
            }
        }
    }
    out
}

/// Bicubic resampling of an `h × w × bands` image to `out_h × out_w × bands`, with
/// half-pixel centers and clamped borders.
pub fn bicubic_resize(src: &[f32], h: usize, w: usize, bands: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let cols = resize_axis(src, h, w, bands, out_w);
    resize_axis(&cols, 1, h, out_w * bands, out_h)
}

/// Sampled parameters of one view-generation call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SslclPlan {
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        hflip: bool,
        vflip: bool,
        /// Quarter turns, 0..4.
        quarter_turns: u8,
    },
    Noise {
        alpha: f32,
        noise_scale: f32,
    },
}

pub const CROP_AREA: (f64, f64) = (0.7, 1.0);
pub const CROP_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

fn crop_box<R: Rng + ?Sized>(s: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (s * s) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(CROP_AREA.0..CROP_AREA.1);
        let aspect = rng.random_range(CROP_ASPECT.0..CROP_ASPECT.1);
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=s).contains(&w) && (1..=s).contains(&h) {
            let top = rng.random_range(0..=s - h);
            let left = rng.random_range(0..=s - w);
            return (top, left, h, w);
        }
    }
    (0, 0, s, s)
}

pub fn draw_sslcl_plan<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SslclPlan {
    if rng.random_bool(0.5) {
        let (top, left, height, width) = crop_box(size, rng);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = if rng.random_bool(0.5) { rng.random_range(0..4u8) } else { 0 };
        SslclPlan::Crop {
            top,
            left,
            height,
            width,
            hflip,
            vflip,
            quarter_turns,
        }
    } else {
        SslclPlan::Noise {
            alpha: rng.random_range(ALPHA_RANGE.0..ALPHA_RANGE.1),
            noise_scale: 1.0 / NOISE_DIVISOR,
        }
    }
}

pub fn apply_sslcl_plan<R: Rng + ?Sized>(patch: &Patch, plan: SslclPlan, rng: &mut R) -> Patch {
    match plan {
        SslclPlan::Noise { alpha, noise_scale } => {
            let mut out = patch.clone();
            scale_and_perturb(&mut out.window, alpha, noise_scale, rng);
            out
        }
        SslclPlan::Crop {
            top,
            left,
            height,
            width,
            hflip,
            vflip,
            quarter_turns,
        } => {
            let (s, b) = (patch.size, patch.bands);
            let mut region = Vec::with_capacity(height * width * b);
            for r in top..top + height {
                for c in left..left + width {
                    region.extend_from_slice(patch.pixel(r, c));
                }
            }
            let mut out = Patch {
                window: bicubic_resize(&region, height, width, b, s, s),
                ..patch.clone()
            };
            if hflip {
                out = rm_transform(&out, RmTransform::HFlip);
            }
            if vflip {
                out = rm_transform(&out, RmTransform::VFlip);
            }
            let turn = [RmTransform::Identity, RmTransform::Rot90, RmTransform::Rot180, RmTransform::Rot270];
            rm_transform(&out, turn[quarter_turns as usize % 4])
        }
    }
}

/// One random view: crop-and-resize (then optional flips and rotation) or noise, each
/// with probability one half.
pub fn sslcl_augment<R: Rng + ?Sized>(patch: &Patch, rng: &mut R) -> Patch {
    let plan = draw_sslcl_plan(patch.size, rng);
    apply_sslcl_plan(patch, plan, rng)
}
