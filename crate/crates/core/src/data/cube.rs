use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::network::checkpoint::write_atomic;

/// Element encoding of a raw payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    F64le,
    U16le,
    I16le,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
            Dtype::U16le | Dtype::I16le => 2,
            Dtype::U8 => 1,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Dtype::F32le => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Dtype::F64le => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
            Dtype::U16le => u16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::I16le => i16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::U8 => b[0] as f64,
        }
    }
}

/// Axis order of a raw payload, slowest-varying first (`h` = row, `w` = column, `b` = band).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisOrder {
    Hwb,
    Bhw,
    Hbw,
}

/// Layout metadata for a raw cube payload. The canonical sidecar is this record with
/// `dtype = f32le` and `order = hwb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeDescriptor {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub order: AxisOrder,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
}

/// A `height × width × bands` reflectance cube stored in `[h][w][b]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl HsiCube {
    pub fn new(name: impl Into<String>, height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            bail!(Format, "cube dimensions must be positive");
        }
        if values.len() != height * width * bands {
            bail!(
                Format,
                "{height}x{width}x{bands} cube needs {} values, got {}",
                height * width * bands,
                values.len()
            );
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            bail!(Data, "non-finite value at flat index {i}");
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            bands,
            values,
            normalized: false,
        })
    }

    pub fn spectrum(&self, y: usize, x: usize) -> &[f32] {
        let off = (y * self.width + x) * self.bands;
        &self.values[off..off + self.bands]
    }

    pub fn get(&self, y: usize, x: usize, b: usize) -> f32 {
        self.values[(y * self.width + x) * self.bands + b]
    }

    pub fn descriptor(&self) -> CubeDescriptor {
        CubeDescriptor {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            bands: self.bands,
            dtype: Dtype::F32le,
            order: AxisOrder::Hwb,
            normalized: self.normalized,
        }
    }
}

/// Decode a raw payload described by `desc` into canonical `[h][w][b]` order.
pub fn decode_cube(bytes: &[u8], desc: &CubeDescriptor) -> Result<HsiCube> {
    let (h, w, b) = (desc.height, desc.width, desc.bands);
    let count = h * w * b;
    let size = desc.dtype.size();
    if bytes.len() != count * size {
        bail!(
            Format,
            "descriptor declares {h}x{w}x{b} = {count} elements but the payload holds {}",
            bytes.len() as f64 / size as f64
        );
    }
    let raw: Vec<f64> = bytes.chunks_exact(size).map(|c| desc.dtype.decode(c)).collect();
    let mut values = vec![0f32; count];
    for y in 0..h {
        for x in 0..w {
            for k in 0..b {
                let src = match desc.order {
                    AxisOrder::Hwb => (y * w + x) * b + k,
                    AxisOrder::Bhw => (k * h + y) * w + x,
                    AxisOrder::Hbw => (y * b + k) * w + x,
                };
                values[(y * w + x) * b + k] = raw[src] as f32;
            }
        }
    }
    let mut cube = HsiCube::new(desc.name.clone(), h, w, b, values)?;
    cube.normalized = desc.normalized;
    Ok(cube)
}

/// Read a raw payload file laid out per `desc`.
pub fn import_cube(path: &Path, desc: &CubeDescriptor) -> Result<HsiCube> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cube = decode_cube(&bytes, desc)?;
    cube.normalized = false;
    Ok(cube)
}

fn sibling(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}{suffix}"))
}

/// Payload path belonging to a sidecar path (`x.cube.json` → `x.cube.bin`).
pub fn payload_for(sidecar: &Path) -> PathBuf {
    let s = sidecar.to_string_lossy();
    match s.strip_suffix(".json") {
        Some(stem) => PathBuf::from(format!("{stem}.bin")),
        None => PathBuf::from(format!("{s}.bin")),
    }
}

/// Write `<dir>/<name>.cube.json` and `<dir>/<name>.cube.bin`; returns the sidecar path.
pub fn write_cube(cube: &HsiCube, dir: &Path) -> Result<PathBuf> {
    let sidecar = sibling(dir, &cube.name, ".cube.json");
    let mut payload = Vec::with_capacity(cube.values.len() * 4);
    for v in &cube.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&payload_for(&sidecar), &payload)?;
    let json = serde_json::to_vec_pretty(&cube.descriptor()).map_err(|e| Error::json(&sidecar, e))?;
    write_atomic(&sidecar, &json)?;
    Ok(sidecar)
}

/// Read a canonical cube from its sidecar path.
pub fn read_cube(sidecar: &Path) -> Result<HsiCube> {
    let text = fs::read(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let desc: CubeDescriptor = serde_json::from_slice(&text).map_err(|e| Error::json(sidecar, e))?;
    let payload = payload_for(sidecar);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    decode_cube(&bytes, &desc)
}

/// Per-band min-max scaling to `[0, 1]`; constant bands become all zero.
pub fn normalize_cube(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let mut lo = vec![f32::INFINITY; b];
    let mut hi = vec![f32::NEG_INFINITY; b];
    for px in cube.values.chunks_exact(b) {
        for k in 0..b {
            lo[k] = lo[k].min(px[k]);
            hi[k] = hi[k].max(px[k]);
        }
    }
    let mut out = cube.clone();
    for px in out.values.chunks_exact_mut(b) {
        for k in 0..b {
            let range = hi[k] - lo[k];
            px[k] = if range > 0.0 { (px[k] - lo[k]) / range } else { 0.0 };
        }
    }
    out.normalized = true;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(h: usize, w: usize, b: usize, dtype: Dtype, order: AxisOrder) -> CubeDescriptor {
        CubeDescriptor {
            name: "t".into(),
            height: h,
            width: w,
            bands: b,
            dtype,
            order,
            normalized: false,
        }
    }

    #[test]
    fn band_major_payload_is_permuted_to_canonical_order() {
        // 2x2x3, band-major: band k at pixel (y, x) holds 100k + 10y + x
        let mut bytes = Vec::new();
        for k in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    bytes.extend_from_slice(&((100 * k + 10 * y + x) as f32).to_le_bytes());
                }
            }
        }
        let cube = decode_cube(&bytes, &desc(2, 2, 3, Dtype::F32le, AxisOrder::Bhw)).unwrap();
        assert_eq!(cube.spectrum(0, 0), &[0.0, 100.0, 200.0]);
        assert_eq!(cube.spectrum(1, 0), &[10.0, 110.0, 210.0]);
        assert!(!cube.normalized);
    }

    #[test]
    fn size_mismatch_is_a_format_error() {
        let bytes = vec![0u8; 400 * 4];
        let err = decode_cube(&bytes, &desc(10, 10, 5, Dtype::F32le, AxisOrder::Hwb)).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn non_finite_values_are_a_data_error() {
        let mut bytes = Vec::new();
        for v in [1.0f32, f32::NAN] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = decode_cube(&bytes, &desc(1, 1, 2, Dtype::F32le, AxisOrder::Hwb)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn export_then_import_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 1e-3 + i as f32).collect();
        let cube = HsiCube::new("rt", 3, 4, 5, values).unwrap();
        let sidecar = write_cube(&cube, dir.path()).unwrap();
        let back = read_cube(&sidecar).unwrap();
        let a: Vec<u32> = cube.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let raw = fs::read(payload_for(&sidecar)).unwrap();
        let again = import_cube(&payload_for(&sidecar), &cube.descriptor()).unwrap();
        assert_eq!(again.values, cube.values);
        assert_eq!(raw.len(), 60 * 4);
    }

    #[test]
    fn normalize_maps_band_endpoints() {
        let cube = HsiCube::new("n", 1, 3, 2, vec![10.0, 7.0, 20.0, 7.0, 30.0, 7.0]).unwrap();
        let n = normalize_cube(&cube);
        assert_eq!(n.values, vec![0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert!(n.normalized);
        assert_eq!(normalize_cube(&n).values, n.values);
    }
}
