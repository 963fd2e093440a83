//! Experiment configuration: one JSON document, resolved as
//! flag overrides > file > per-dataset defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Error, Result};
use crate::losses::Distance;
use crate::network::NetworkConfig;

/// Environment variable that prefixes relative dataset paths.
pub const DATA_ROOT_VAR: &str = "S4LFSC_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetName {
    #[serde(rename = "UP")]
    Up,
    #[serde(rename = "IP")]
    Ip,
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "HC")]
    Hc,
    #[default]
    #[serde(rename = "custom")]
    Custom,
}

/// Rotation-mirror task variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmSsl {
    Off,
    /// All six transforms.
    #[default]
    SixWay,
    /// The four rotations only; the head keeps six outputs.
    FourRotation,
}

/// Target-stage consistency task variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslclMode {
    Off,
    /// Two augmented views per labeled sample.
    #[default]
    Augment,
    /// Two passes over the unaugmented samples that differ only in dropout.
    DropoutOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub rm_ssl: RmSsl,
    pub hom_fsl: bool,
    pub mr_ssl: bool,
    pub sslcl: SslclMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            rm_ssl: RmSsl::SixWay,
            hom_fsl: true,
            mr_ssl: true,
            sslcl: SslclMode::Augment,
        }
    }
}

impl Ablation {
    /// Named variants of the published ablation tables.
    pub fn variant(name: &str) -> Result<Self> {
        let full = Self::default();
        Ok(match name {
            "full" => full,
            "v0" => Self {
                rm_ssl: RmSsl::FourRotation,
                ..full
            },
            "v1" => Self {
                hom_fsl: false,
                mr_ssl: false,
                ..full
            },
            "v2" => Self { hom_fsl: false, ..full },
            "v3" => Self { mr_ssl: false, ..full },
            "v4" | "vb" => Self {
                sslcl: SslclMode::Off,
                ..full
            },
            "va" => Self {
                sslcl: SslclMode::DropoutOnly,
                ..full
            },
            other => bail!(Config, "unknown ablation variant {other:?}"),
        })
    }

    pub fn spectral_stage_enabled(&self) -> bool {
        self.hom_fsl || self.mr_ssl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialStageConfig {
    pub episodes: usize,
    pub lr: f64,
    pub shots: usize,
    pub queries: usize,
    /// Base images per step before the rotation-mirror expansion.
    pub rm_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralStageConfig {
    pub episodes: usize,
    pub lr: f64,
    pub shots: usize,
    pub queries: usize,
    pub mr_batch: usize,
    pub mask_ratio: f64,
    /// Few-shot classes need strictly more than this many labeled pixels.
    pub pool_min_exclusive: usize,
    /// Items kept per qualifying class.
    pub pool_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetStageConfig {
    pub episodes: usize,
    pub lr: f64,
    pub shots: usize,
    pub queries: usize,
    pub eval_every: usize,
    pub sslcl_dropout: f64,
    /// Patches per class after noise augmentation.
    pub augmented_per_class: usize,
    pub eval_batch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub target_cube: Option<PathBuf>,
    pub target_gt: Option<PathBuf>,
    /// Directory of class subdirectories holding images or three-band cubes.
    pub hetero_pool: Option<PathBuf>,
    pub homo_cube: Option<PathBuf>,
    pub homo_gt: Option<PathBuf>,
    /// Optional archive of pretrained backbone weights loaded before stage 1.
    pub backbone_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetName,
    pub data: DataPaths,
    pub k0: usize,
    pub n_runs: usize,
    pub base_seed: u64,
    pub subsample_fraction: f64,
    pub distance: Distance,
    pub network: NetworkConfig,
    pub stage1: SpatialStageConfig,
    pub stage2: SpectralStageConfig,
    pub stage3: TargetStageConfig,
    pub ablation: Ablation,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Published settings for `target`.
    pub fn defaults_for(target: TargetName) -> Self {
        use TargetName::*;
        let stage2_episodes = if target == Ip { 500 } else { 700 };
        let eval_every = if matches!(target, Ip | Sa) { 50 } else { 20 };
        let sslcl_dropout = if matches!(target, Up | Custom) { 0.15 } else { 0.28 };
        let network = NetworkConfig {
            dropout_sslcl: sslcl_dropout,
            ..NetworkConfig::default()
        };
        Self {
            target,
            data: DataPaths::default(),
            k0: 5,
            n_runs: 10,
            base_seed: 0,
            subsample_fraction: if target == Hc { 0.15 } else { 1.0 },
            distance: Distance::Euclidean,
            network,
            stage1: SpatialStageConfig {
                episodes: 1100,
                lr: 1e-3,
                shots: 1,
                queries: 19,
                rm_batch: 128,
            },
            stage2: SpectralStageConfig {
                episodes: stage2_episodes,
                lr: 1e-3,
                shots: 1,
                queries: 19,
                mr_batch: 1024,
                mask_ratio: 0.75,
                pool_min_exclusive: 400,
                pool_cap: 400,
            },
            stage3: TargetStageConfig {
                episodes: 1000,
                lr: 1e-3,
                shots: 1,
                queries: 19,
                eval_every,
                sslcl_dropout,
                augmented_per_class: 200,
                eval_batch: 256,
            },
            ablation: Ablation::default(),
            out_dir: PathBuf::from("out"),
        }
    }

    /// Resolve a config document and `key=value` overrides (dotted keys, JSON values or
    /// bare strings) on top of the defaults of the document's target.
    pub fn resolve(doc: Value, overrides: &[(String, String)]) -> Result<Self> {
        let mut layered = doc;
        if !layered.is_object() {
            bail!(Config, "config root must be a JSON object");
        }
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut layered, key, value)?;
        }
        let target: TargetName = match layered.get("target") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("target: {e}")))?,
            None => TargetName::Custom,
        };
        let mut base = serde_json::to_value(Self::defaults_for(target)).expect("config serializes");
        // the stage-3 and network dropout keys are one setting; either may be given
        let stage_key = layered.pointer("/stage3/sslcl_dropout").cloned();
        let net_key = layered.pointer("/network/dropout_sslcl").cloned();
        match (stage_key, net_key) {
            (Some(d), None) => set_path(&mut layered, "network.dropout_sslcl", d)?,
            (None, Some(d)) => set_path(&mut layered, "stage3.sslcl_dropout", d)?,
            _ => {}
        }
        merge(&mut base, layered);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
        Self::resolve(doc, overrides)
    }

    /// Value ranges that do not depend on the filesystem.
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("k0", self.k0),
            ("n_runs", self.n_runs),
            ("stage1.episodes", self.stage1.episodes),
            ("stage1.shots", self.stage1.shots),
            ("stage1.queries", self.stage1.queries),
            ("stage2.episodes", self.stage2.episodes),
            ("stage2.shots", self.stage2.shots),
            ("stage2.queries", self.stage2.queries),
            ("stage3.episodes", self.stage3.episodes),
            ("stage3.shots", self.stage3.shots),
            ("stage3.queries", self.stage3.queries),
            ("stage3.eval_every", self.stage3.eval_every),
            ("stage3.eval_batch", self.stage3.eval_batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                bail!(Config, "{key} must be positive");
            }
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            bail!(Config, "subsample_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.stage2.mask_ratio) {
            bail!(Config, "stage2.mask_ratio must lie in [0, 1]");
        }
        for (key, p) in [
            ("network.dropout_fsl", self.network.dropout_fsl),
            ("network.dropout_sslcl", self.network.dropout_sslcl),
            ("stage3.sslcl_dropout", self.stage3.sslcl_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                bail!(Config, "{key} must lie in [0, 1)");
            }
        }
        if self.network.dropout_sslcl != self.stage3.sslcl_dropout {
            bail!(Config, "network.dropout_sslcl and stage3.sslcl_dropout disagree");
        }
        if self.stage3.augmented_per_class < self.k0 {
            bail!(Config, "stage3.augmented_per_class must be at least k0");
        }
        Ok(())
    }

    /// Dataset paths with the data root applied; every set path must exist.
    pub fn validate_paths(&self) -> Result<DataPaths> {
        let root = std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from);
        let fix = |key: &str, p: &Option<PathBuf>| -> Result<Option<PathBuf>> {
            let Some(p) = p else { return Ok(None) };
            let full = match &root {
                Some(r) if p.is_relative() => r.join(p),
                _ => p.clone(),
            };
            if !full.exists() {
                bail!(Config, "data.{key}: {} does not exist", full.display());
            }
            Ok(Some(full))
        };
        let d = &self.data;
        Ok(DataPaths {
            target_cube: fix("target_cube", &d.target_cube)?,
            target_gt: fix("target_gt", &d.target_gt)?,
            hetero_pool: fix("hetero_pool", &d.hetero_pool)?,
            homo_cube: fix("homo_cube", &d.homo_cube)?,
            homo_gt: fix("homo_gt", &d.homo_gt)?,
            backbone_weights: fix("backbone_weights", &d.backbone_weights)?,
        })
    }

    /// Require the target dataset paths.
    pub fn require_target(paths: &DataPaths) -> Result<(PathBuf, PathBuf)> {
        match (&paths.target_cube, &paths.target_gt) {
            (Some(c), Some(g)) => Ok((c.clone(), g.clone())),
            (None, _) => bail!(Config, "data.target_cube is required"),
            (_, None) => bail!(Config, "data.target_gt is required"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!(Config, "malformed override key {key:?}");
        }
        let obj = match cur {
            Value::Object(m) => m,
            _ => bail!(Config, "override {key:?} descends into a non-object"),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
