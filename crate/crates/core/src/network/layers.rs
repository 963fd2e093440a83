use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnStats, ConvGeom, Graph, Var};
use crate::error::{bail, Result};
use crate::params::{Binding, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// One forward pass: the graph under construction, the parameters it reads, and the
/// mode-dependent state (batch-norm statistics, dropout randomness).
pub struct Forward<'a, T: Real> {
    pub g: Graph<T>,
    pub binding: Binding<T>,
    pub store: &'a mut ParamStore<T>,
    pub train: bool,
    rng: ChaCha8Rng,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, train: bool, rng: ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            binding: Binding::new(),
            store,
            train,
            rng,
            trace: None,
        }
    }

    /// Record the output shape of every layer, in order.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub(crate) fn record(&mut self, name: &str, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((name.to_string(), self.g.value(v).shape().to_vec()));
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binding.bind(&mut self.g, self.store, name)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.g.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.g.dropout_with_mask(x, mask)
    }

    /// Gradients of a scalar with respect to every bound trainable parameter.
    pub fn gradients(self, loss: Var) -> Result<std::collections::BTreeMap<String, Tensor<T>>> {
        let grads = self.g.backward(loss)?;
        Ok(self.binding.collect(grads))
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: (k, k),
            geom: ConvGeom::new((stride, stride), (pad, pad)),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel.0 * self.kernel.1;
        let w = kaiming(&[self.out_ch, self.in_ch, self.kernel.0, self.kernel.1], fan_in, rng);
        let b = uniform(&[self.out_ch], 1.0 / (fan_in as f64).sqrt(), rng);
        store.insert(format!("{}/weight", self.name), w, ParamKind::Trainable);
        store.insert(format!("{}/bias", self.name), b, ParamKind::Trainable);
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}/weight", self.name))?;
        let b = f.param(&format!("{}/bias", self.name))?;
        let y = f.g.conv2d(x, w, Some(b), self.geom)?;
        f.record(&self.name, y);
        Ok(y)
    }
}

/// 1-D convolution over `[n, c, len]`, stored with a `[out, in, k]` weight.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        ConvGeom::out_len(len, self.kernel, self.stride, self.pad)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel;
        let w = kaiming(&[self.out_ch, self.in_ch, self.kernel], fan_in, rng);
        let b = uniform(&[self.out_ch], 1.0 / (fan_in as f64).sqrt(), rng);
        store.insert(format!("{}/weight", self.name), w, ParamKind::Trainable);
        store.insert(format!("{}/bias", self.name), b, ParamKind::Trainable);
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (n, c, len) = match f.g.value(x).shape()[..] {
            [n, c, l] => (n, c, l),
            ref s => bail!(Shape, "{} expects [n, c, len], got {s:?}", self.name),
        };
        let w = f.param(&format!("{}/weight", self.name))?;
        let b = f.param(&format!("{}/bias", self.name))?;
        let w4 = f.g.reshape(w, &[self.out_ch, self.in_ch, 1, self.kernel])?;
        let x4 = f.g.reshape(x, &[n, c, 1, len])?;
        let geom = ConvGeom::new((1, self.stride), (0, self.pad));
        let y = f.g.conv2d(x4, w4, Some(b), geom)?;
        let out_len = f.g.value(y).shape()[3];
        let y = f.g.reshape(y, &[n, self.out_ch, out_len])?;
        f.record(&self.name, y);
        Ok(y)
    }
}

/// Batch normalization over axis 1 with running statistics (momentum 0.1, ε = 1e-5).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        store.insert(format!("{}/weight", self.name), Tensor::full(&[c], T::one()), ParamKind::Trainable);
        store.insert(format!("{}/bias", self.name), Tensor::zeros(&[c]), ParamKind::Trainable);
        store.insert(format!("{}/running_mean", self.name), Tensor::zeros(&[c]), ParamKind::Buffer);
        store.insert(format!("{}/running_var", self.name), Tensor::full(&[c], T::one()), ParamKind::Buffer);
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(&format!("{}/weight", self.name))?;
        let beta = f.param(&format!("{}/bias", self.name))?;
        let mean_name = format!("{}/running_mean", self.name);
        let var_name = format!("{}/running_var", self.name);
        let y = if f.train {
            let (y, moments) = f.g.batch_norm(x, gamma, beta, BnStats::Batch, Self::EPS)?;
            let moments = moments.expect("batch statistics in training mode");
            let m = T::lit(Self::MOMENTUM);
            let keep = T::one() - m;
            for (r, &b) in f.store.tensor_mut(&mean_name)?.data_mut().iter_mut().zip(&moments.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in f.store.tensor_mut(&var_name)?.data_mut().iter_mut().zip(&moments.var) {
                *r = keep * *r + m * b;
            }
            y
        } else {
            let mean = f.store.tensor(&mean_name)?.data().to_vec();
            let var = f.store.tensor(&var_name)?.data().to_vec();
            let stats = BnStats::Running {
                mean: &mean,
                var: &var,
            };
            f.g.batch_norm(x, gamma, beta, stats, Self::EPS)?.0
        };
        f.record(&self.name, y);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_f: usize, out_f: usize) -> Self {
        Self {
            name: name.into(),
            in_f,
            out_f,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.in_f as f64).sqrt();
        store.insert(format!("{}/weight", self.name), uniform(&[self.out_f, self.in_f], bound, rng), ParamKind::Trainable);
        store.insert(format!("{}/bias", self.name), uniform(&[self.out_f], bound, rng), ParamKind::Trainable);
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}/weight", self.name))?;
        let b = f.param(&format!("{}/bias", self.name))?;
        let y = f.g.linear(x, w, Some(b))?;
        f.record(&self.name, y);
        Ok(y)
    }
}
