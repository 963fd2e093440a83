use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cube::HsiCube;
use super::gt::{subsample_classes, GroundTruthMap};
use crate::augment::noise_augment;
use crate::error::{bail, Error, Result};
use crate::network::checkpoint::write_atomic;
use crate::patch::{extract_patch, Patch};

/// Labeled (`D_l`) and test (`D_u`) coordinates drawn under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub k0: usize,
    pub subsample_fraction: f64,
    /// Class id → `[y, x]` coordinates, `k0` per class.
    pub labeled: BTreeMap<u16, Vec<(usize, usize)>>,
    /// `[y, x, class]` for every remaining labeled pixel.
    pub test: Vec<(usize, usize, u16)>,
}

impl SplitSpec {
    pub fn n_classes(&self) -> usize {
        self.labeled.len()
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.values().map(Vec::len).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        write_atomic(path, &json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.split.json"))
}

/// Draw `k0` labeled pixels per class; every other labeled pixel becomes test.
pub fn build_splits(gt: &GroundTruthMap, k0: usize, seed: u64) -> Result<SplitSpec> {
    if k0 == 0 {
        bail!(Config, "k0 must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = BTreeMap::new();
    let mut test = Vec::new();
    for (class, pixels) in gt.class_pixels() {
        if pixels.len() <= k0 {
            bail!(Split, "class {class} has {} pixels, needs more than k0 = {k0}", pixels.len());
        }
        let picked = sample(&mut rng, pixels.len(), k0).into_vec();
        let chosen: BTreeSet<usize> = picked.iter().copied().collect();
        labeled.insert(class, picked.iter().map(|&i| pixels[i]).collect());
        test.extend(
            pixels
                .iter()
                .enumerate()
                .filter(|(i, _)| !chosen.contains(i))
                .map(|(_, &(y, x))| (y, x, class)),
        );
    }
    test.sort_unstable();
    Ok(SplitSpec {
        seed,
        k0,
        subsample_fraction: 1.0,
        labeled,
        test,
    })
}

/// Subsample with `fraction`, then split. Both draws derive from `seed`.
pub fn make_split(gt: &GroundTruthMap, k0: usize, fraction: f64, seed: u64) -> Result<SplitSpec> {
    let sub = subsample_classes(gt, fraction, seed ^ 0x5eed_5ab5)?;
    let mut split = build_splits(&sub, k0, seed)?;
    split.subsample_fraction = fraction;
    Ok(split)
}

/// One member of an augmented labeled set: a source pixel, and the noise seed of the
/// copy (`None` for an original).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugEntry {
    pub source: (usize, usize),
    pub seed: Option<u64>,
}

/// `D_l1`: each class's originals followed by noise-augmented copies up to
/// `target_count`. Copies are regenerated on demand from their provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedLabeledSet {
    pub target_count: usize,
    pub per_class: BTreeMap<u16, Vec<AugEntry>>,
}

pub fn augment_labeled_set(split: &SplitSpec, target_count: usize, seed: u64) -> Result<AugmentedLabeledSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    for (&class, coords) in &split.labeled {
        if target_count < coords.len() {
            bail!(
                Config,
                "target_count {target_count} is below the {} labeled samples of class {class}",
                coords.len()
            );
        }
        let mut entries: Vec<AugEntry> = coords.iter().map(|&source| AugEntry { source, seed: None }).collect();
        for i in 0..target_count - coords.len() {
            entries.push(AugEntry {
                source: coords[i % coords.len()],
                seed: Some(rng.random()),
            });
        }
        per_class.insert(class, entries);
    }
    Ok(AugmentedLabeledSet {
        target_count,
        per_class,
    })
}

impl AugmentedLabeledSet {
    /// Build the patch for one entry.
    pub fn patch(&self, cube: &HsiCube, class: u16, entry: &AugEntry, size: usize) -> Result<Patch> {
        let mut p = extract_patch(cube, entry.source.0, entry.source.1, size)?;
        p.label = Some(class);
        if let Some(s) = entry.seed {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            noise_augment(&mut p.window, &mut rng);
        }
        Ok(p)
    }

    /// Every patch, class-major.
    pub fn materialize(&self, cube: &HsiCube, size: usize) -> Result<Vec<Patch>> {
        let mut out = Vec::with_capacity(self.per_class.len() * self.target_count);
        for (&class, entries) in &self.per_class {
            for e in entries {
                out.push(self.patch(cube, class, e, size)?);
            }
        }
        Ok(out)
    }
}
