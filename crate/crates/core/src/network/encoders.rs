//! Spatial (VGG-style) and spectral (1-D residual) feature extractors plus the spectral
//! dimension mapper.

use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv1d, Conv2d, Forward, Linear};
use super::{BackboneLayer, NetworkConfig};
use crate::autograd::{ConvGeom, Var};
use crate::error::{bail, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

enum Stage {
    Conv(Conv2d),
    Pool,
}

/// Optional 1×1 band mapping, convolutional backbone, and projection head.
pub struct SpatialEncoder {
    pub patch_size: usize,
    pub in_channels: usize,
    mapping: Option<(Conv2d, BatchNorm)>,
    backbone: Vec<Stage>,
    head_conv: Conv2d,
    head_bn: BatchNorm,
    head_linear: Linear,
    backbone_out: (usize, usize, usize),
}

pub const SPATIAL_MAPPING: &str = "spatial/mapping";
pub const SPATIAL_BACKBONE: &str = "spatial/backbone";
pub const SPATIAL_HEAD: &str = "spatial/head";

impl SpatialEncoder {
    /// `mapping_bands`: when set, a 1×1 convolution + batch-norm maps that many bands to
    /// the backbone's three input channels.
    pub fn new(cfg: &NetworkConfig, mapping_bands: Option<usize>) -> Result<Self> {
        let mapping = mapping_bands.map(|b| {
            (
                Conv2d::new(format!("{SPATIAL_MAPPING}/conv"), b, 3, 1, 1, 0),
                BatchNorm::new(format!("{SPATIAL_MAPPING}/bn"), 3),
            )
        });
        let mut backbone = Vec::new();
        let mut ch = 3;
        let mut size = cfg.patch_size;
        let mut conv_idx = 0;
        for layer in &cfg.backbone {
            match *layer {
                BackboneLayer::Conv(out) => {
                    conv_idx += 1;
                    backbone.push(Stage::Conv(Conv2d::new(
                        format!("{SPATIAL_BACKBONE}/conv{conv_idx}"),
                        ch,
                        out,
                        3,
                        1,
                        1,
                    )));
                    ch = out;
                }
                BackboneLayer::Pool => {
                    size /= 2;
                    backbone.push(Stage::Pool);
                }
            }
        }
        let Some(head_size) = ConvGeom::out_len(size, 3, 1, 0) else {
            bail!(Config, "patch size {} too small for the spatial head", cfg.patch_size);
        };
        let pooled = head_size / 2;
        if pooled == 0 {
            bail!(Config, "patch size {} too small for the spatial head", cfg.patch_size);
        }
        let flat = cfg.head_channels * pooled * pooled;
        Ok(Self {
            patch_size: cfg.patch_size,
            in_channels: mapping_bands.unwrap_or(3),
            mapping,
            backbone,
            head_conv: Conv2d::new(format!("{SPATIAL_HEAD}/conv"), ch, cfg.head_channels, 3, 1, 0),
            head_bn: BatchNorm::new(format!("{SPATIAL_HEAD}/bn"), cfg.head_channels),
            head_linear: Linear::new(format!("{SPATIAL_HEAD}/linear"), flat, cfg.feature_dim),
            backbone_out: (ch, size, size),
        })
    }

    /// Channels and spatial size after the backbone.
    pub fn backbone_out(&self) -> (usize, usize, usize) {
        self.backbone_out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        if let Some((conv, bn)) = &self.mapping {
            conv.init(store, rng);
            bn.init(store);
        }
        for s in &self.backbone {
            if let Stage::Conv(c) = s {
                c.init(store, rng);
            }
        }
        self.head_conv.init(store, rng);
        self.head_bn.init(store);
        self.head_linear.init(store, rng);
    }

    /// `x: [n, in_channels, S, S]` → `[n, feature_dim]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.g.value(x).shape().to_vec();
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] != self.patch_size
            || shape[3] != self.patch_size
        {
            bail!(
                Shape,
                "spatial encoder expects [n, {}, {}, {}], got {shape:?}",
                self.in_channels,
                self.patch_size,
                self.patch_size
            );
        }
        let mut h = x;
        if let Some((conv, bn)) = &self.mapping {
            h = conv.forward(f, h)?;
            h = bn.forward(f, h)?;
        }
        let mut pools = 0;
        for s in &self.backbone {
            h = match s {
                Stage::Conv(c) => {
                    let y = c.forward(f, h)?;
                    f.g.relu(y)
                }
                Stage::Pool => {
                    pools += 1;
                    let y = f.g.max_pool2d(h, 2, 2)?;
                    f.record(&format!("{SPATIAL_BACKBONE}/pool{pools}"), y);
                    y
                }
            };
        }
        h = self.head_conv.forward(f, h)?;
        h = self.head_bn.forward(f, h)?;
        h = f.g.relu(h);
        h = f.g.max_pool2d(h, 2, 2)?;
        f.record(&format!("{SPATIAL_HEAD}/pool"), h);
        let n = shape[0];
        let flat = f.g.value(h).numel() / n.max(1);
        h = f.g.reshape(h, &[n, flat])?;
        self.head_linear.forward(f, h)
    }
}

pub const SPECTRAL_ENCODER: &str = "spectral/encoder";

/// Initial strided 1-D convolution, one residual block, and a full-length convolution
/// that collapses the band axis to a single position.
pub struct SpectralEncoder {
    pub bands: usize,
    conv1: Conv1d,
    bn1: BatchNorm,
    res_a: Conv1d,
    bn_a: BatchNorm,
    res_b: Conv1d,
    bn_b: BatchNorm,
    conv_out: Conv1d,
    bn_out: BatchNorm,
    linear: Linear,
    conv1_len: usize,
}

impl SpectralEncoder {
    pub fn new(cfg: &NetworkConfig, bands: usize) -> Result<Self> {
        let k = cfg.spectral_kernel;
        let c = cfg.spectral_channels;
        let p = SPECTRAL_ENCODER;
        let conv1 = Conv1d::new(format!("{p}/conv1"), 1, c, k, cfg.spectral_stride, 0);
        let Some(conv1_len) = conv1.out_len(bands) else {
            bail!(Config, "spectral encoder needs at least {k} bands, got {bands}");
        };
        Ok(Self {
            bands,
            conv1,
            bn1: BatchNorm::new(format!("{p}/bn1"), c),
            res_a: Conv1d::new(format!("{p}/res/conv_a"), c, c, k, 1, k / 2),
            bn_a: BatchNorm::new(format!("{p}/res/bn_a"), c),
            res_b: Conv1d::new(format!("{p}/res/conv_b"), c, c, k, 1, k / 2),
            bn_b: BatchNorm::new(format!("{p}/res/bn_b"), c),
            conv_out: Conv1d::new(format!("{p}/conv_out"), c, cfg.spectral_out_channels, conv1_len, 1, 0),
            bn_out: BatchNorm::new(format!("{p}/bn_out"), cfg.spectral_out_channels),
            linear: Linear::new(format!("{p}/linear"), cfg.spectral_out_channels, cfg.feature_dim),
            conv1_len,
        })
    }

    /// Length after the first convolution, which is also the final kernel size.
    pub fn conv1_len(&self) -> usize {
        self.conv1_len
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for c in [&self.conv1, &self.res_a, &self.res_b, &self.conv_out] {
            c.init(store, rng);
        }
        for b in [&self.bn1, &self.bn_a, &self.bn_b, &self.bn_out] {
            b.init(store);
        }
        self.linear.init(store, rng);
    }

    /// `x: [n, bands]` → `[n, feature_dim]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (n, len) = f.g.value(x).dims2()?;
        if len != self.bands {
            bail!(Shape, "spectral encoder expects {} bands, got {len}", self.bands);
        }
        let h = f.g.reshape(x, &[n, 1, len])?;
        let h = self.conv1.forward(f, h)?;
        let h = self.bn1.forward(f, h)?;
        let skip = f.g.relu(h);
        let h = self.res_a.forward(f, skip)?;
        let h = self.bn_a.forward(f, h)?;
        let h = f.g.relu(h);
        let h = self.res_b.forward(f, h)?;
        let h = self.bn_b.forward(f, h)?;
        let h = f.g.add(h, skip)?;
        let h = f.g.relu(h);
        let h = self.conv_out.forward(f, h)?;
        let h = self.bn_out.forward(f, h)?;
        let h = f.g.relu(h);
        let width = f.g.value(h).numel() / n.max(1);
        let h = f.g.reshape(h, &[n, width])?;
        self.linear.forward(f, h)
    }
}

pub const SPECTRAL_MAPPER: &str = "spectral/mapper";

/// Piecewise-linear resampling from `in_bands` to `out_bands`, followed by a learnable
/// single-channel 1-D convolution with kernel 1.
pub struct SpectralMapper {
    pub in_bands: usize,
    pub out_bands: usize,
    resample: Tensor<f64>,
    conv: Conv1d,
}

/// `[in_len, out_len]` matrix `R` such that `x · R` linearly interpolates `x` at
/// `out_len` evenly spaced positions spanning the first to the last band.
pub fn resample_matrix(in_len: usize, out_len: usize) -> Result<Tensor<f64>> {
    if in_len < 2 && in_len != out_len {
        bail!(Config, "cannot resample a spectrum of {in_len} bands");
    }
    let mut m = vec![0.0; in_len * out_len];
    for j in 0..out_len {
        let pos = if out_len == 1 {
            0.0
        } else {
            j as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = pos - lo as f64;
        m[lo * out_len + j] += 1.0 - frac;
        if hi != lo {
            m[hi * out_len + j] += frac;
        }
    }
    Tensor::new(vec![in_len, out_len], m)
}

impl SpectralMapper {
    pub fn new(in_bands: usize, out_bands: usize) -> Result<Self> {
        Ok(Self {
            in_bands,
            out_bands,
            resample: resample_matrix(in_bands, out_bands)?,
            conv: Conv1d::new(format!("{SPECTRAL_MAPPER}/conv"), 1, 1, 1, 1, 0),
        })
    }

    /// Starts as the identity affine map on the resampled spectrum.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{SPECTRAL_MAPPER}/conv/weight"), Tensor::full(&[1, 1, 1], T::one()), ParamKind::Trainable);
        store.insert(format!("{SPECTRAL_MAPPER}/conv/bias"), Tensor::zeros(&[1]), ParamKind::Trainable);
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (n, len) = f.g.value(x).dims2()?;
        if len != self.in_bands {
            bail!(Shape, "spectral mapper expects {} bands, got {len}", self.in_bands);
        }
        let r = f.input(self.resample.cast());
        let h = f.g.matmul(x, r)?;
        let h = f.g.reshape(h, &[n, 1, self.out_bands])?;
        let h = self.conv.forward(f, h)?;
        f.g.reshape(h, &[n, self.out_bands])
    }
}
