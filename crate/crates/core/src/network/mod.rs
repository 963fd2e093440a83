//! The spectral-spatial model family and the auxiliary heads of each training stage.
//!
//! Parameter names are slash-delimited and shared between stages, so stage-to-stage
//! transfer is a prefix filter over checkpoint names:
//!
//! | prefix              | trained in | loaded by stage 3 |
//! |---------------------|------------|-------------------|
//! | `spatial/mapping/`  | stage 3    | no (input arity differs) |
//! | `spatial/backbone/` | stage 1    | yes |
//! | `spatial/head/`     | stage 1    | yes |
//! | `spectral/mapper/`  | stage 2    | no |
//! | `spectral/encoder/` | stage 2    | yes |
//! | `heads/*`           | stage 1/2  | no |
//! | `fusion/*`          | stage 3    | no |

pub mod checkpoint;
mod encoders;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoders::{
    resample_matrix, SpatialEncoder, SpectralEncoder, SpectralMapper, SPATIAL_BACKBONE,
    SPATIAL_HEAD, SPATIAL_MAPPING, SPECTRAL_ENCODER, SPECTRAL_MAPPER,
};
pub use layers::{BatchNorm, Conv1d, Conv2d, Forward, Linear};

use crate::autograd::Var;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Names loaded into the fused model from the stage-1 checkpoint.
pub const SPATIAL_TRANSFER: &[&str] = &["spatial/backbone/", "spatial/head/"];
/// Names loaded into the fused model from the stage-2 checkpoint.
pub const SPECTRAL_TRANSFER: &[&str] = &["spectral/encoder/"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneLayer {
    /// 3×3 convolution (padding 1) to this many channels, then ReLU.
    Conv(usize),
    /// 2×2 max-pool, stride 2.
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub patch_size: usize,
    pub backbone: Vec<BackboneLayer>,
    pub head_channels: usize,
    pub feature_dim: usize,
    pub spectral_channels: usize,
    pub spectral_kernel: usize,
    pub spectral_stride: usize,
    pub spectral_out_channels: usize,
    pub fusion_hidden: usize,
    pub fsl_linear_dim: usize,
    pub decoder_hidden: usize,
    pub dropout_fsl: f64,
    pub dropout_sslcl: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        use BackboneLayer::{Conv, Pool};
        Self {
            patch_size: 33,
            backbone: vec![
                Conv(64),
                Conv(64),
                Pool,
                Conv(128),
                Conv(128),
                Pool,
                Conv(256),
                Conv(256),
                Conv(256),
                Pool,
            ],
            head_channels: 512,
            feature_dim: 100,
            spectral_channels: 24,
            spectral_kernel: 7,
            spectral_stride: 2,
            spectral_out_channels: 128,
            fusion_hidden: 64,
            fsl_linear_dim: 64,
            decoder_hidden: 256,
            dropout_fsl: 0.5,
            dropout_sslcl: 0.15,
        }
    }
}

impl NetworkConfig {
    /// A miniature of the same topology, small enough for exhaustive finite differences.
    pub fn toy() -> Self {
        Self {
            patch_size: 9,
            backbone: vec![BackboneLayer::Conv(2), BackboneLayer::Pool],
            head_channels: 3,
            feature_dim: 4,
            spectral_channels: 2,
            spectral_kernel: 3,
            spectral_stride: 2,
            spectral_out_channels: 3,
            fusion_hidden: 5,
            fsl_linear_dim: 3,
            decoder_hidden: 4,
            dropout_fsl: 0.5,
            dropout_sslcl: 0.15,
        }
    }
}

/// Stage 1: spatial encoder on three-channel images plus the rotation-mirror classifier.
pub struct SpatialPretrainNet {
    pub spatial: SpatialEncoder,
    pub rm_head: Linear,
}

impl SpatialPretrainNet {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        Ok(Self {
            spatial: SpatialEncoder::new(cfg, None)?,
            rm_head: Linear::new("heads/rm/linear", cfg.feature_dim, 6),
        })
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.spatial.init(&mut store, &mut rng);
        self.rm_head.init(&mut store, &mut rng);
        store
    }

    pub fn features<T: Real>(&self, f: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        self.spatial.forward(f, images)
    }

    pub fn rm_logits<T: Real>(&self, f: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        let h = self.spatial.forward(f, images)?;
        self.rm_head.forward(f, h)
    }
}

/// Stage 2: band mapper, spectral encoder, FSL projection and reconstruction decoder.
pub struct SpectralPretrainNet {
    pub mapper: SpectralMapper,
    pub spectral: SpectralEncoder,
    pub fsl_linear: Linear,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
}

impl SpectralPretrainNet {
    /// `source_bands` is the homogeneous dataset's band count, `target_bands` the
    /// target's.
    pub fn new(cfg: &NetworkConfig, source_bands: usize, target_bands: usize) -> Result<Self> {
        Ok(Self {
            mapper: SpectralMapper::new(source_bands, target_bands)?,
            spectral: SpectralEncoder::new(cfg, target_bands)?,
            fsl_linear: Linear::new("heads/fsl_linear/linear", cfg.feature_dim, cfg.fsl_linear_dim),
            decoder_hidden: Linear::new("heads/decoder/fc1", cfg.feature_dim, cfg.decoder_hidden),
            decoder_out: Linear::new("heads/decoder/fc2", cfg.decoder_hidden, source_bands),
        })
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.mapper.init(&mut store);
        self.spectral.init(&mut store, &mut rng);
        self.fsl_linear.init(&mut store, &mut rng);
        self.decoder_hidden.init(&mut store, &mut rng);
        self.decoder_out.init(&mut store, &mut rng);
        store
    }

    fn latent<T: Real>(&self, f: &mut Forward<'_, T>, spectra: Var) -> Result<Var> {
        let h = self.mapper.forward(f, spectra)?;
        self.spectral.forward(f, h)
    }

    /// Metric embedding for few-shot episodes.
    pub fn embedding<T: Real>(&self, f: &mut Forward<'_, T>, spectra: Var) -> Result<Var> {
        let z = self.latent(f, spectra)?;
        self.fsl_linear.forward(f, z)
    }

    /// Full-length reconstruction of a (masked) source spectrum.
    pub fn reconstruct<T: Real>(&self, f: &mut Forward<'_, T>, masked: Var) -> Result<Var> {
        let z = self.latent(f, masked)?;
        let h = self.decoder_hidden.forward(f, z)?;
        let h = f.g.relu(h);
        self.decoder_out.forward(f, h)
    }
}

/// Stage 3: spatial and spectral encoders fused by concatenation, with separate heads for
/// the few-shot embedding and the self-supervised class probabilities.
pub struct FusedNet {
    pub spatial: SpatialEncoder,
    pub spectral: SpectralEncoder,
    pub n_classes: usize,
    fsl_fc1: Linear,
    fsl_fc2: Linear,
    sslcl_fc1: Linear,
    sslcl_fc2: Linear,
    sslcl_bn: BatchNorm,
    dropout_fsl: f64,
    dropout_sslcl: f64,
}

/// Outputs of both fusion heads over the same fused features.
pub struct FusedOutput {
    pub embedding: Var,
    pub probs: Var,
}

impl FusedNet {
    pub fn new(cfg: &NetworkConfig, bands: usize, n_classes: usize) -> Result<Self> {
        let fused = 2 * cfg.feature_dim;
        Ok(Self {
            spatial: SpatialEncoder::new(cfg, Some(bands))?,
            spectral: SpectralEncoder::new(cfg, bands)?,
            n_classes,
            fsl_fc1: Linear::new("fusion/fsl/fc1", fused, cfg.fusion_hidden),
            fsl_fc2: Linear::new("fusion/fsl/fc2", cfg.fusion_hidden, n_classes),
            sslcl_fc1: Linear::new("fusion/sslcl/fc1", fused, cfg.fusion_hidden),
            sslcl_fc2: Linear::new("fusion/sslcl/fc2", cfg.fusion_hidden, n_classes),
            sslcl_bn: BatchNorm::new("fusion/sslcl/bn", n_classes),
            dropout_fsl: cfg.dropout_fsl,
            dropout_sslcl: cfg.dropout_sslcl,
        })
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.spatial.init(&mut store, &mut rng);
        self.spectral.init(&mut store, &mut rng);
        for l in [&self.fsl_fc1, &self.fsl_fc2, &self.sslcl_fc1, &self.sslcl_fc2] {
            l.init(&mut store, &mut rng);
        }
        self.sslcl_bn.init(&mut store);
        store
    }

    /// Concatenated spatial and spectral features, `[n, 2 * feature_dim]`.
    pub fn fused_features<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        windows: Var,
        spectra: Var,
    ) -> Result<Var> {
        let a = self.spatial.forward(f, windows)?;
        let b = self.spectral.forward(f, spectra)?;
        let fused = f.g.concat_cols(&[a, b])?;
        f.record("fusion/concat", fused);
        Ok(fused)
    }

    pub fn fsl_head<T: Real>(&self, f: &mut Forward<'_, T>, fused: Var) -> Result<Var> {
        let h = self.fsl_fc1.forward(f, fused)?;
        let h = f.g.relu(h);
        let h = f.dropout(h, self.dropout_fsl)?;
        self.fsl_fc2.forward(f, h)
    }

    pub fn sslcl_head<T: Real>(&self, f: &mut Forward<'_, T>, fused: Var) -> Result<Var> {
        let h = f.dropout(fused, self.dropout_sslcl)?;
        let h = self.sslcl_fc1.forward(f, h)?;
        let h = f.g.relu(h);
        let h = self.sslcl_fc2.forward(f, h)?;
        let h = self.sslcl_bn.forward(f, h)?;
        f.g.softmax(h)
    }

    pub fn embedding<T: Real>(&self, f: &mut Forward<'_, T>, windows: Var, spectra: Var) -> Result<Var> {
        let fused = self.fused_features(f, windows, spectra)?;
        self.fsl_head(f, fused)
    }

    pub fn sslcl_probs<T: Real>(&self, f: &mut Forward<'_, T>, windows: Var, spectra: Var) -> Result<Var> {
        let fused = self.fused_features(f, windows, spectra)?;
        self.sslcl_head(f, fused)
    }

    pub fn forward_fused<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        windows: Var,
        spectra: Var,
    ) -> Result<FusedOutput> {
        let fused = self.fused_features(f, windows, spectra)?;
        Ok(FusedOutput {
            embedding: self.fsl_head(f, fused)?,
            probs: self.sslcl_head(f, fused)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn forward_once(
        net: &FusedNet,
        store: &mut ParamStore<f32>,
        bands: usize,
        n: usize,
        train: bool,
    ) -> (Vec<f32>, Vec<f32>) {
        let s = net.spatial.patch_size;
        let windows = Tensor::from_fn(&[n, bands, s, s], |i| ((i * 37) % 101) as f32 / 101.0);
        let spectra = Tensor::from_fn(&[n, bands], |i| ((i * 13) % 17) as f32 / 17.0);
        let mut f = Forward::new(store, train, ChaCha8Rng::seed_from_u64(0));
        let (w, sp) = (f.input(windows), f.input(spectra));
        let out = net.forward_fused(&mut f, w, sp).unwrap();
        (
            f.g.value(out.embedding).data().to_vec(),
            f.g.value(out.probs).data().to_vec(),
        )
    }

    #[test]
    fn fused_output_shapes_and_probability_rows() {
        let cfg = NetworkConfig::toy();
        let net = FusedNet::new(&cfg, 12, 3).unwrap();
        let mut store = net.init::<f32>(1);
        let (emb, probs) = forward_once(&net, &mut store, 12, 4, true);
        assert_eq!(emb.len(), 12);
        for row in probs.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic_and_batch_size_invariant() {
        let cfg = NetworkConfig::toy();
        let net = FusedNet::new(&cfg, 12, 3).unwrap();
        let mut store = net.init::<f32>(2);
        let a = forward_once(&net, &mut store, 12, 3, false);
        let b = forward_once(&net, &mut store, 12, 3, false);
        assert_eq!(a, b);
        // the first row of a batch of three equals a batch of one
        let single = forward_once(&net, &mut store, 12, 1, false);
        for (x, y) in single.0.iter().zip(&a.0[..3]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_count_matches_published_magnitude() {
        // spatial + spectral + fusion for a 103-band, 9-class target: ~3.16M
        let net = FusedNet::new(&NetworkConfig::default(), 103, 9).unwrap();
        let store = net.init::<f32>(0);
        let millions = store.trainable_count() as f64 / 1e6;
        assert!((millions - 3.16).abs() < 0.05, "{millions}");
    }

    #[test]
    fn mapper_identity_init_resamples_linearly() {
        let r = resample_matrix(5, 3).unwrap();
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = (0..3)
            .map(|j| (0..5).map(|i| x[i] * r.data()[i * 3 + j]).sum())
            .collect();
        assert_eq!(y, vec![0.0, 2.0, 4.0]);
        let id = resample_matrix(4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(id.data()[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
