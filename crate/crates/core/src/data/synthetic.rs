//! Seeded toy datasets with the shapes of the real inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GroundTruthMap, HsiCube};
use crate::error::Result;
use crate::patch::Patch;

/// Gaussian bump of class `c` among `n` classes over `bands` bands.
fn signature(c: usize, n: usize, bands: usize) -> Vec<f32> {
    let center = (c as f64 + 0.5) / n as f64 * (bands - 1) as f64;
    let width = (bands as f64 / (2.5 * n as f64)).max(1.0);
    (0..bands)
        .map(|k| {
            let d = (k as f64 - center) / width;
            (0.2 + 0.7 * (-0.5 * d * d).exp()) as f32
        })
        .collect()
}

/// A cube of block-shaped class regions, each pixel its class signature plus mild
/// spatial texture and per-pixel noise. Roughly one block in eight is left unlabeled.
pub fn gaussian_scene(
    name: &str,
    height: usize,
    width: usize,
    bands: usize,
    n_classes: u16,
    seed: u64,
) -> Result<(HsiCube, GroundTruthMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_classes as usize;
    let sigs: Vec<Vec<f32>> = (0..n).map(|c| signature(c, n, bands)).collect();
    let block = 8;
    let (by, bx) = (height.div_ceil(block), width.div_ceil(block));
    let mut block_class = vec![0u16; by * bx];
    for (i, bc) in block_class.iter_mut().enumerate() {
        *bc = if i < n {
            i as u16 + 1
        } else if rng.random_bool(0.125) {
            0
        } else {
            rng.random_range(1..=n_classes)
        };
    }
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let mut values = Vec::with_capacity(height * width * bands);
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let label = block_class[(y / block) * bx + x / block];
            labels.push(label);
            let texture = 0.05 * ((y as f32 * 0.7).sin() + (x as f32 * 0.45).cos());
            let base = if label == 0 {
                &sigs[(y / block + x / block) % n]
            } else {
                &sigs[label as usize - 1]
            };
            for &s in base {
                values.push(s + texture + noise.sample(&mut rng));
            }
        }
    }
    Ok((
        HsiCube::new(name, height, width, bands, values)?,
        GroundTruthMap::new(name, height, width, n_classes, labels)?,
    ))
}

/// `per_class` RGB textures of size `size × size` for each of `n_classes` classes. Each
/// class has its own stripe orientation and frequency, and none is rotation invariant.
pub fn texture_pool(n_classes: usize, per_class: usize, size: usize, seed: u64) -> Vec<(Patch, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let angle = std::f32::consts::PI * c as f32 / n_classes as f32 + 0.3;
        let freq = 0.35 + 0.25 * c as f32;
        let tint = [0.3 + 0.2 * (c % 3) as f32, 0.5, 0.7 - 0.2 * (c % 2) as f32];
        for _ in 0..per_class {
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let mut window = Vec::with_capacity(size * size * 3);
            for r in 0..size {
                for col in 0..size {
                    let u = angle.cos() * col as f32 + angle.sin() * r as f32;
                    // brightness ramp toward the top-left breaks rotation symmetry
                    let ramp = 0.3 * (1.0 - (r + 2 * col) as f32 / (3 * size) as f32);
                    let v = 0.5 + 0.3 * (freq * u + phase).sin() + ramp;
                    for t in tint {
                        window.push(t * v + rng.random_range(-0.02..0.02));
                    }
                }
            }
            out.push((Patch::new(size, 3, window).expect("consistent shape"), c as u32));
        }
    }
    out
}
