//! Named-tensor archives: a JSON manifest (`<base>.ckpt.json`) listing
//! `{name, shape, offset}` records and a payload (`<base>.ckpt.bin`) of concatenated
//! little-endian `f32` values. Offsets are byte offsets into the payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".ckpt.json")
}

pub fn payload_path(base: &Path) -> PathBuf {
    with_suffix(base, ".ckpt.bin")
}

/// Base path of an archive given its base, manifest or payload path.
pub fn checkpoint_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".ckpt.json", ".ckpt.bin"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn kind_for(name: &str) -> ParamKind {
    if name.ends_with("/running_mean") || name.ends_with("/running_var") {
        ParamKind::Buffer
    } else {
        ParamKind::Trainable
    }
}

/// Serialize every tensor of `store`. Returns the manifest and payload paths.
pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut manifest = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    for (name, p) in store.iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in p.value.data() {
            payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(base, e))?;
    let (mp, pp) = (manifest_path(base), payload_path(base));
    write_atomic(&pp, &payload)?;
    write_atomic(&mp, &json)?;
    Ok((mp, pp))
}

/// Read a whole archive, validating the manifest against the payload.
pub fn load_checkpoint(base: &Path) -> Result<ParamStore<f32>> {
    let mp = manifest_path(base);
    let pp = payload_path(base);
    let text = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mp.display())))?;
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for entry in &manifest {
        if store.contains(&entry.name) {
            bail!(Checkpoint, "duplicate tensor name {}", entry.name);
        }
        if entry.offset != expected {
            bail!(
                Checkpoint,
                "tensor {} starts at byte {} but the previous tensor ends at {}",
                entry.name,
                entry.offset,
                expected
            );
        }
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * numel as u64;
        if end > payload.len() as u64 {
            bail!(Checkpoint, "payload too short for tensor {}", entry.name);
        }
        let bytes = &payload[entry.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?, kind_for(&entry.name));
        expected = end;
    }
    if expected != payload.len() as u64 {
        bail!(
            Checkpoint,
            "payload holds {} bytes but the manifest accounts for {}",
            payload.len(),
            expected
        );
    }
    Ok(store)
}

/// Outcome of a filtered load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Names copied into the model.
    pub loaded: Vec<String>,
    /// Names under the filter that the model has but the archive lacks.
    pub missing_in_archive: Vec<String>,
    /// Names under the filter that the archive has but the model lacks.
    pub unused_in_archive: Vec<String>,
}

/// Copy every archive tensor whose name starts with one of `prefixes` into `store`.
/// Under `strict`, a model tensor under the filter that the archive lacks is an error.
pub fn transfer<T: Real>(
    archive: &ParamStore<f32>,
    store: &mut ParamStore<T>,
    prefixes: &[&str],
    strict: bool,
) -> Result<TransferReport> {
    let under = |n: &str| prefixes.iter().any(|p| n.starts_with(p));
    let mut report = TransferReport::default();
    for (name, p) in archive.iter().filter(|(n, _)| under(n)) {
        match store.get(name) {
            Some(existing) if existing.value.shape() != p.value.shape() => bail!(
                Transfer,
                "tensor {name}: archive shape {:?} does not match model shape {:?}",
                p.value.shape(),
                existing.value.shape()
            ),
            Some(_) => {
                *store.tensor_mut(name)? = p.value.cast();
                report.loaded.push(name.to_string());
            }
            None => report.unused_in_archive.push(name.to_string()),
        }
    }
    let names: Vec<String> = store.names().filter(|n| under(n)).map(str::to_string).collect();
    for name in names {
        if !archive.contains(&name) {
            report.missing_in_archive.push(name);
        }
    }
    if strict && !report.missing_in_archive.is_empty() {
        bail!(
            Transfer,
            "archive lacks required tensors: {}",
            report.missing_in_archive.join(", ")
        );
    }
    Ok(report)
}
