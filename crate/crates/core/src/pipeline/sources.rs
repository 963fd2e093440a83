use std::fs;
use std::path::Path;

use crate::augment::bicubic_resize;
use crate::data::{normalize_cube, read_cube, read_gt, GroundTruthMap, HsiCube};
use crate::error::{bail, Error, Result};
use crate::patch::{ClassPool, Patch};

/// Labeled three-channel images, all `size × size`.
pub struct ImagePool {
    pub size: usize,
    pub items: Vec<Patch>,
    pub labels: Vec<u32>,
}

impl ImagePool {
    pub fn new(items: Vec<(Patch, u32)>) -> Result<Self> {
        let Some((first, _)) = items.first() else {
            bail!(Config, "image pool is empty");
        };
        let size = first.size;
        if let Some((p, _)) = items.iter().find(|(p, _)| p.size != size || p.bands != 3) {
            bail!(
                Config,
                "image pool mixes {}x{}x{} with {size}x{size}x3 items",
                p.size,
                p.size,
                p.bands
            );
        }
        let (items, labels) = items.into_iter().unzip();
        Ok(Self { size, items, labels })
    }

    pub fn classes(&self) -> ClassPool {
        ClassPool::from_labels(self.labels.iter().copied())
    }

    /// Read `dir/<class>/<item>` where items are PNG/JPEG images or three-band
    /// `.cube.json` cubes. Every item is resized to `size × size` with bicubic
    /// interpolation; image channels are scaled to `[0, 1]`. Classes are numbered in
    /// sorted directory-name order.
    pub fn load_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut class_dirs: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut items = Vec::new();
        for (label, cdir) in class_dirs.iter().enumerate() {
            let mut files: Vec<_> = fs::read_dir(cdir)
                .map_err(|e| Error::io(cdir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            for f in files {
                let name = f.to_string_lossy().to_lowercase();
                let (h, w, values) = if name.ends_with(".cube.json") {
                    let cube = read_cube(&f)?;
                    if cube.bands != 3 {
                        bail!(Format, "{}: pool cubes need 3 bands, found {}", f.display(), cube.bands);
                    }
                    (cube.height, cube.width, cube.values)
                } else if [".png", ".jpg", ".jpeg"].iter().any(|s| name.ends_with(s)) {
                    let img = image::open(&f)
                        .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?
                        .to_rgb8();
                    let (w, h) = (img.width() as usize, img.height() as usize);
                    (h, w, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
                } else {
                    continue;
                };
                let window = if (h, w) == (size, size) {
                    values
                } else {
                    bicubic_resize(&values, h, w, 3, size, size)
                };
                items.push((Patch::new(size, 3, window)?, label as u32));
            }
        }
        Self::new(items)
    }
}

/// Labeled spectra of the homogeneous source.
pub struct SpectralPool {
    pub bands: usize,
    pub spectra: Vec<f32>,
    pub labels: Vec<u32>,
}

impl SpectralPool {
    /// Every labeled pixel of a (normalized) cube.
    pub fn from_cube(cube: &HsiCube, gt: &GroundTruthMap) -> Result<Self> {
        if (cube.height, cube.width) != (gt.height, gt.width) {
            bail!(Data, "cube is {}x{} but labels are {}x{}", cube.height, cube.width, gt.height, gt.width);
        }
        let mut spectra = Vec::new();
        let mut labels = Vec::new();
        for y in 0..gt.height {
            for x in 0..gt.width {
                let l = gt.label(y, x);
                if l > 0 {
                    spectra.extend_from_slice(cube.spectrum(y, x));
                    labels.push(l as u32);
                }
            }
        }
        Ok(Self {
            bands: cube.bands,
            spectra,
            labels,
        })
    }

    pub fn load(cube: &Path, gt: &Path) -> Result<Self> {
        let cube = read_cube(cube)?;
        let cube = if cube.normalized { cube } else { normalize_cube(&cube) };
        Self::from_cube(&cube, &read_gt(gt)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn spectrum(&self, i: usize) -> &[f32] {
        &self.spectra[i * self.bands..(i + 1) * self.bands]
    }

    pub fn classes(&self) -> ClassPool {
        ClassPool::from_labels(self.labels.iter().copied())
    }
}

/// A normalized target cube with its labels.
pub struct TargetData {
    pub cube: HsiCube,
    pub gt: GroundTruthMap,
}

impl TargetData {
    pub fn new(cube: HsiCube, gt: GroundTruthMap) -> Result<Self> {
        if (cube.height, cube.width) != (gt.height, gt.width) {
            bail!(Data, "cube is {}x{} but labels are {}x{}", cube.height, cube.width, gt.height, gt.width);
        }
        let cube = if cube.normalized { cube } else { normalize_cube(&cube) };
        Ok(Self { cube, gt })
    }

    pub fn load(cube: &Path, gt: &Path) -> Result<Self> {
        Self::new(read_cube(cube)?, read_gt(gt)?)
    }

    pub fn n_classes(&self) -> usize {
        self.gt.n_classes as usize
    }
}
