use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cube::{payload_for, Dtype};
use crate::error::{bail, Error, Result};
use crate::network::checkpoint::write_atomic;

/// Per-pixel class labels; 0 is unlabeled and `1..=n_classes` are classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMap {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub n_classes: u16,
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtDescriptor {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub n_classes: u16,
    pub dtype: Dtype,
}

impl GroundTruthMap {
    pub fn new(name: impl Into<String>, height: usize, width: usize, n_classes: u16, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Format, "{height}x{width} label map needs {} values, got {}", height * width, labels.len());
        }
        let mut seen = vec![false; n_classes as usize + 1];
        for (i, &l) in labels.iter().enumerate() {
            if l > n_classes {
                bail!(Data, "label {l} at flat index {i} exceeds n_classes {n_classes}");
            }
            seen[l as usize] = true;
        }
        if let Some(c) = (1..=n_classes).find(|&c| !seen[c as usize]) {
            bail!(Data, "class {c} never occurs");
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            n_classes,
            labels,
        })
    }

    pub fn label(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Row-major coordinates of every pixel of each class.
    pub fn class_pixels(&self) -> BTreeMap<u16, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u16, Vec<(usize, usize)>> = (1..=self.n_classes).map(|c| (c, Vec::new())).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out.get_mut(&l).expect("validated label").push((i / self.width, i % self.width));
            }
        }
        out
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn descriptor(&self) -> GtDescriptor {
        GtDescriptor {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            dtype: Dtype::U16le,
        }
    }
}

/// Decode a label payload; accepts `u8` and `u16le` elements.
pub fn decode_gt(bytes: &[u8], desc: &GtDescriptor) -> Result<GroundTruthMap> {
    let count = desc.height * desc.width;
    let labels: Vec<u16> = match desc.dtype {
        Dtype::U8 if bytes.len() == count => bytes.iter().map(|&b| b as u16).collect(),
        Dtype::U16le if bytes.len() == 2 * count => {
            bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
        }
        Dtype::U8 | Dtype::U16le => bail!(
            Format,
            "label descriptor declares {}x{} but the payload holds {} bytes",
            desc.height,
            desc.width,
            bytes.len()
        ),
        other => bail!(Format, "unsupported label dtype {other:?}"),
    };
    GroundTruthMap::new(desc.name.clone(), desc.height, desc.width, desc.n_classes, labels)
}

pub fn import_gt(path: &Path, desc: &GtDescriptor) -> Result<GroundTruthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gt(&bytes, desc)
}

/// Write `<dir>/<name>.gt.json` and `<dir>/<name>.gt.bin`; returns the sidecar path.
pub fn write_gt(gt: &GroundTruthMap, dir: &Path) -> Result<PathBuf> {
    let sidecar = dir.join(format!("{}.gt.json", gt.name));
    let payload: Vec<u8> = gt.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_atomic(&payload_for(&sidecar), &payload)?;
    let json = serde_json::to_vec_pretty(&gt.descriptor()).map_err(|e| Error::json(&sidecar, e))?;
    write_atomic(&sidecar, &json)?;
    Ok(sidecar)
}

pub fn read_gt(sidecar: &Path) -> Result<GroundTruthMap> {
    let text = fs::read(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let desc: GtDescriptor = serde_json::from_slice(&text).map_err(|e| Error::json(sidecar, e))?;
    import_gt(&payload_for(sidecar), &desc)
}

/// Pixels a class keeps under `fraction`: round to nearest, at least one.
pub fn retained_count(count: usize, fraction: f64) -> usize {
    ((fraction * count as f64).round() as usize).max(1).min(count)
}

/// Keep a uniformly drawn `fraction` of every class, relabeling dropped pixels to 0.
pub fn subsample_classes(gt: &GroundTruthMap, fraction: f64, seed: u64) -> Result<GroundTruthMap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Config, "subsample fraction must lie in (0, 1], got {fraction}");
    }
    if fraction == 1.0 {
        return Ok(gt.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gt.clone();
    for (class, pixels) in gt.class_pixels() {
        if pixels.is_empty() {
            bail!(Split, "class {class} would retain 0 pixels");
        }
        let keep = retained_count(pixels.len(), fraction);
        let mut kept = vec![false; pixels.len()];
        for i in sample(&mut rng, pixels.len(), keep) {
            kept[i] = true;
        }
        for (&(y, x), k) in pixels.iter().zip(kept) {
            if !k {
                out.labels[y * gt.width + x] = 0;
            }
        }
    }
    Ok(out)
}
