//! Windows around center pixels, their central spectra, and episodic sampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::HsiCube;
use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

/// A `size × size × bands` window stored `[row][col][band]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub window: Vec<f32>,
    pub center: (usize, usize),
    pub label: Option<u16>,
}

impl Patch {
    pub fn new(size: usize, bands: usize, window: Vec<f32>) -> Result<Self> {
        if window.len() != size * size * bands {
            bail!(Shape, "{size}x{size}x{bands} patch needs {} values, got {}", size * size * bands, window.len());
        }
        Ok(Self {
            size,
            bands,
            window,
            center: (0, 0),
            label: None,
        })
    }

    pub fn zeros(size: usize, bands: usize) -> Self {
        Self::new(size, bands, vec![0.0; size * size * bands]).expect("consistent shape")
    }

    pub fn at(&self, r: usize, c: usize, b: usize) -> f32 {
        self.window[(r * self.size + c) * self.bands + b]
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let off = (r * self.size + c) * self.bands;
        &self.window[off..off + self.bands]
    }
}

/// Index into `0..len` after reflecting `i` about the borders without repeating the edge.
pub fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// `size × size` window centered on `(y, x)` with mirror padding at the borders.
pub fn extract_patch(cube: &HsiCube, y: usize, x: usize, size: usize) -> Result<Patch> {
    if size % 2 == 0 || size == 0 {
        bail!(Config, "patch size must be odd, got {size}");
    }
    if size > 2 * cube.height.min(cube.width) {
        bail!(
            Config,
            "patch size {size} exceeds twice the smaller cube side {}",
            cube.height.min(cube.width)
        );
    }
    if y >= cube.height || x >= cube.width {
        bail!(Config, "pixel ({y}, {x}) outside {}x{} cube", cube.height, cube.width);
    }
    let r = (size / 2) as isize;
    let b = cube.bands;
    let mut window = Vec::with_capacity(size * size * b);
    for dy in -r..=r {
        let sy = reflect(y as isize + dy, cube.height);
        for dx in -r..=r {
            let sx = reflect(x as isize + dx, cube.width);
            window.extend_from_slice(cube.spectrum(sy, sx));
        }
    }
    Ok(Patch {
        size,
        bands: b,
        window,
        center: (y, x),
        label: None,
    })
}

/// Spectrum of the window's central pixel.
pub fn center_spectrum(patch: &Patch) -> Vec<f32> {
    let c = patch.size / 2;
    patch.pixel(c, c).to_vec()
}

/// Stack patches as `[n, bands, S, S]` windows and `[n, bands]` center spectra.
pub fn patch_batch<T: Real>(patches: &[&Patch]) -> Result<(Tensor<T>, Tensor<T>)> {
    let Some(first) = patches.first() else {
        bail!(Shape, "empty patch batch");
    };
    let (s, b) = (first.size, first.bands);
    let n = patches.len();
    let mut win = vec![T::zero(); n * b * s * s];
    let mut spec = vec![T::zero(); n * b];
    for (i, p) in patches.iter().enumerate() {
        if p.size != s || p.bands != b {
            bail!(Shape, "patch {i} is {}x{}x{}, batch is {s}x{s}x{b}", p.size, p.size, p.bands);
        }
        let base = i * b * s * s;
        for r in 0..s {
            for c in 0..s {
                for (k, &v) in p.pixel(r, c).iter().enumerate() {
                    win[base + (k * s + r) * s + c] = T::lit(v as f64);
                }
            }
        }
        for (k, v) in center_spectrum(p).into_iter().enumerate() {
            spec[i * b + k] = T::lit(v as f64);
        }
    }
    Ok((Tensor::new(vec![n, b, s, s], win)?, Tensor::new(vec![n, b], spec)?))
}

/// Stack plain vectors as `[n, len]`.
pub fn vector_batch<T: Real>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let Some(first) = rows.first() else {
        bail!(Shape, "empty vector batch");
    };
    let len = first.len();
    let mut data = Vec::with_capacity(rows.len() * len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != len {
            bail!(Shape, "row {i} has length {}, batch has {len}", r.len());
        }
        data.extend(r.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![rows.len(), len], data)
}

/// Item indices grouped by class; the item storage itself lives with the caller.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassPool {
    pub classes: BTreeMap<u32, Vec<usize>>,
}

impl ClassPool {
    pub fn from_labels(labels: impl IntoIterator<Item = u32>) -> Self {
        let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.into_iter().enumerate() {
            classes.entry(l).or_default().push(i);
        }
        Self { classes }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_items(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Keep classes with more than `min_exclusive` items, each cut to a uniform draw of
    /// `cap` items.
    pub fn restrict<R: Rng + ?Sized>(&self, min_exclusive: usize, cap: usize, rng: &mut R) -> Self {
        let mut classes = BTreeMap::new();
        for (&c, items) in &self.classes {
            if items.len() <= min_exclusive {
                continue;
            }
            let keep = cap.min(items.len());
            let mut picked: Vec<usize> = sample(rng, items.len(), keep).into_iter().map(|i| items[i]).collect();
            picked.sort_unstable();
            classes.insert(c, picked);
        }
        Self { classes }
    }
}

/// One few-shot task. Items are indices into the pool's storage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// `(item, local label)`, class-major.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    /// Local label → pool class.
    pub class_map: Vec<u32>,
}

impl Episode {
    pub fn support_items(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.0).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.1).collect()
    }

    pub fn query_items(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.0).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.1).collect()
    }
}

/// Draw `ways` classes, then `shots + queries` items per class without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    pool: &ClassPool,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        bail!(Episode, "episodes need at least one way and one shot");
    }
    if pool.n_classes() < ways {
        bail!(Episode, "pool has {} classes, episode needs {ways}", pool.n_classes());
    }
    let need = shots + queries;
    if let Some((c, items)) = pool.classes.iter().find(|(_, v)| v.len() < need) {
        bail!(Episode, "class {c} has {} items, episode needs {need}", items.len());
    }
    let keys: Vec<u32> = pool.classes.keys().copied().collect();
    let chosen = sample(rng, keys.len(), ways).into_vec();
    let mut ep = Episode {
        ways,
        shots,
        queries,
        support: Vec::with_capacity(ways * shots),
        query: Vec::with_capacity(ways * queries),
        class_map: Vec::with_capacity(ways),
    };
    for (local, &ci) in chosen.iter().enumerate() {
        let class = keys[ci];
        let items = &pool.classes[&class];
        let draw = sample(rng, items.len(), need).into_vec();
        for (j, &i) in draw.iter().enumerate() {
            if j < shots {
                ep.support.push((items[i], local));
            } else {
                ep.query.push((items[i], local));
            }
        }
        ep.class_map.push(class);
    }
    Ok(ep)
}
