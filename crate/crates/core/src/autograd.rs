//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are appended in
//! evaluation order, so the reverse of the node list is a valid topological order for
//! the backward sweep. Convolutions lower to im2col + GEMM per sample; samples are
//! processed in fixed-size groups so that parallel reductions sum in the same order no
//! matter how many threads run them.

use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Samples per deterministic reduction group in convolution backward.
const GROUP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad }
    }

    /// Output length along one axis: `(len + 2 * pad - kernel) / stride + 1`.
    pub fn out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

/// How a batch-norm node normalizes its input.
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics produced in training mode, for running-average updates.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LogClamp(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    PairwiseDist {
        q: Var,
        p: Var,
        squared: bool,
    },
    SumAll(Var),
    MeanRows(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

fn dims4(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => bail!(Shape, "{what} expects [n, c, h, w], got {:?}", t.shape()),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * ohw;
                let dst = &mut cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * ohw;
                let src = &cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geom: ConvGeom) -> bool {
    kh == 1 && kw == 1 && geom.stride == (1, 1) && geom.pad == (0, 0)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Natural logarithm of `max(x, eps)`.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::lit(eps);
        let v = self.value(x).map(|e| e.max(eps).ln());
        self.push(v, Op::LogClamp(x, eps), &[x])
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i {
            bail!(Shape, "linear expects {wi} input features, got {i}");
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != o {
                bail!(Shape, "linear bias has {} entries, expected {o}", bias.numel());
            }
            for row in out.chunks_mut(o) {
                for (r, &bv) in row.iter_mut().zip(bias.data()) {
                    *r += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if k != kb {
            bail!(Shape, "matmul inner dimensions {k} and {kb} differ");
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (o, wc, kh, kw) = dims4(self.value(w), "conv2d weight")?;
        if wc != c {
            bail!(Shape, "conv2d expects {wc} input channels, got {c}");
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_len(h, kh, geom.stride.0, geom.pad.0),
            ConvGeom::out_len(wd, kw, geom.stride.1, geom.pad.1),
        ) else {
            bail!(Shape, "conv2d kernel {kh}x{kw} does not fit input {h}x{wd}");
        };
        if let Some(b) = b {
            if self.value(b).numel() != o {
                bail!(Shape, "conv2d bias must have {o} entries");
            }
        }
        let ck = c * kh * kw;
        let ohw = oh * ow;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let pointwise = is_pointwise(kh, kw, geom);
        let mut out = vec![T::zero(); n * o * ohw];
        out.par_chunks_mut(o * ohw)
            .enumerate()
            .for_each_init(Vec::new, |cols, (s, dst)| {
                let xn = &xs[s * c * h * wd..(s + 1) * c * h * wd];
                let src = if pointwise {
                    xn
                } else {
                    cols.resize(ck * ohw, T::zero());
                    im2col(xn, c, h, wd, kh, kw, geom, oh, ow, cols);
                    &cols[..]
                };
                T::gemm(o, ck, ohw, T::one(), ws, false, src, false, T::zero(), dst);
                if let Some(bias) = bias {
                    for (row, &bv) in dst.chunks_mut(ohw).zip(bias) {
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Max pooling with a square window; trailing rows/columns that do not fill a window
    /// are dropped.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "max_pool2d")?;
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_len(h, kernel, stride, 0),
            ConvGeom::out_len(w, kernel, stride, 0),
        ) else {
            bail!(Shape, "pool window {kernel} does not fit {h}x{w}");
        };
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Per-channel normalization of `x: [n, c, ...]` followed by `gamma * x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            bail!(Shape, "batch_norm expects [n, c, ...], got {shape:?}");
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            bail!(Shape, "batch_norm affine parameters must have {c} entries");
        }
        let count = n * inner;
        let xs = self.value(x).data();
        let eps = T::lit(eps);
        let (mean, var, moments, batch_stats) = match stats {
            BnStats::Batch => {
                if count < 2 {
                    bail!(Shape, "batch_norm needs more than one value per channel in training mode");
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        s += xs[off..off + inner].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(count as f64);
                    let mut q = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        q += xs[off..off + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = q / T::lit(count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::lit(count as f64 / (count - 1) as f64))
                    .collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(moments), true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    bail!(Shape, "batch_norm running statistics must have {c} entries");
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for k in off..off + inner {
                    let xh = (xs[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, moments))
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by `1 / (1 - p)`.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            bail!(Shape, "dropout mask length mismatch");
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                bail!(Shape, "concat parts have different row counts");
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `idx` of `x` along the leading axis (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let stride = if n == 0 { 0 } else { t.numel() / n };
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                bail!(Shape, "row {i} out of range for {n} rows");
            }
            out.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    fn row_softmax(t: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
        let (r, c) = t.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| if log { v - lse } else { (v - lse).exp() }));
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = Self::row_softmax(self.value(x), false)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = Self::row_softmax(self.value(x), true)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Euclidean distance (or its square) between every row of `q: [nq, d]` and every row
    /// of `p: [np, d]`, giving `[nq, np]`.
    pub fn pairwise_dist(&mut self, q: Var, p: Var, squared: bool) -> Result<Var> {
        let (nq, d) = self.value(q).dims2()?;
        let (np, dp) = self.value(p).dims2()?;
        if d != dp {
            bail!(Shape, "pairwise_dist feature widths {d} and {dp} differ");
        }
        let (tq, tp) = (self.value(q), self.value(p));
        let mut out = Vec::with_capacity(nq * np);
        for i in 0..nq {
            let a = tq.row(i);
            for j in 0..np {
                let s: T = a.iter().zip(tp.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(if squared { s } else { s.sqrt() });
            }
        }
        let value = Tensor::new(vec![nq, np], out)?;
        Ok(self.push(value, Op::PairwiseDist { q, p, squared }, &[q, p]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean over the leading axis of a 2-D tensor, giving `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r == 0 {
            bail!(Shape, "mean over zero rows");
        }
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![1, c], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if idx.len() != r {
            bail!(Shape, "gather needs one index per row");
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                bail!(Shape, "gather index {j} out of range for {c} columns");
            }
            out.push(t.data()[i * c + j]);
        }
        let value = Tensor::new(vec![r], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, like(*a, d)?);
                }
                if self.wants(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, like(*b, d)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, dy.map(|v| v * s));
            }
            Op::Relu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::LogClamp(x, eps) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > *eps { g / v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (n, i) = tx.dims2()?;
                let (o, _) = tw.dims2()?;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, T::one(), dy.data(), false, tw.data(), false, T::zero(), &mut dx);
                    self.accumulate(grads, *x, like(*x, dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(o, n, i, T::one(), dy.data(), true, tx.data(), false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, like(*w, dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in dy.data().chunks(o) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, like(*b, db)?);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), dy.data(), false, tb.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, like(*a, da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), ta.data(), true, dy.data(), false, T::zero(), &mut db);
                    self.accumulate(grads, *b, like(*b, db)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, dy, grads)?,
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx[src] += g;
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let dys = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            dgamma[ch] += dys[k] * xhat[k];
                            dbeta[ch] += dys[k];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dys.len()];
                    let m = T::lit((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            for k in off..off + inner {
                                dx[k] = if *batch_stats {
                                    // dβ and dγ are the channel sums of dx̂ / γ and dx̂·x̂ / γ
                                    g[ch] * inv_std[ch] / m
                                        * (m * dys[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    dys[k] * g[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx)?);
                }
                self.accumulate(grads, *gamma, like(*gamma, dgamma)?);
                self.accumulate(grads, *beta, like(*beta, dbeta)?);
            }
            Op::Dropout { x, mask } => {
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::Reshape(x) => {
                let d = dy.data().to_vec();
                self.accumulate(grads, *x, like(*x, d)?);
            }
            Op::Concat(parts) => {
                let (rows, total) = dy.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&dy.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, like(p, d)?);
                    }
                    offset += c;
                }
            }
            Op::SelectRows { x, idx } => {
                let t = self.value(*x);
                let stride = t.numel() / t.shape()[0].max(1);
                let mut dx = vec![T::zero(); t.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &g) in dx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&dy.data()[k * stride..(k + 1) * stride])
                    {
                        *d += g;
                    }
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let s: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * s));
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
            Op::PairwiseDist { q, p, squared } => {
                let (tq, tp) = (self.value(*q), self.value(*p));
                let (nq, d) = tq.dims2()?;
                let (np, _) = tp.dims2()?;
                let dist = &node.value;
                let mut dq = vec![T::zero(); nq * d];
                let mut dp = vec![T::zero(); np * d];
                for i in 0..nq {
                    for j in 0..np {
                        let g = dy.data()[i * np + j];
                        let coef = if *squared {
                            T::lit(2.0) * g
                        } else {
                            let dv = dist.data()[i * np + j];
                            if dv > T::zero() {
                                g / dv
                            } else {
                                T::zero()
                            }
                        };
                        for k in 0..d {
                            let diff = tq.data()[i * d + k] - tp.data()[j * d + k];
                            dq[i * d + k] += coef * diff;
                            dp[j * d + k] -= coef * diff;
                        }
                    }
                }
                if self.wants(*q) {
                    self.accumulate(grads, *q, like(*q, dq)?);
                }
                if self.wants(*p) {
                    self.accumulate(grads, *p, like(*p, dp)?);
                }
            }
            Op::SumAll(x) => {
                let g = dy.data()[0];
                let t = Tensor::full(self.value(*x).shape(), g);
                self.accumulate(grads, *x, t);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let inv = T::one() / T::lit(r as f64);
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(dy.data().iter().map(|&g| g * inv));
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
            Op::Gather { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); r * c];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * c + j] += dy.data()[i];
                }
                self.accumulate(grads, *x, like(*x, dx)?);
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (n, c, h, wd) = dims4(tx, "conv2d input")?;
        let (o, _, kh, kw) = dims4(tw, "conv2d weight")?;
        let (_, _, oh, ow) = dims4(dy, "conv2d output grad")?;
        let ck = c * kh * kw;
        let ohw = oh * ow;
        let chw = c * h * wd;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let want_b = b.is_some_and(|b| self.wants(b));
        let pointwise = is_pointwise(kh, kw, geom);
        let xs = tx.data();
        let ws = tw.data();
        let dys = dy.data();

        let mut dx = if want_x { vec![T::zero(); n * chw] } else { Vec::new() };
        let n_groups = n.div_ceil(GROUP);
        let mut dx_chunks: Vec<Option<&mut [T]>> = if want_x {
            dx.chunks_mut(GROUP * chw).map(Some).collect()
        } else {
            (0..n_groups).map(|_| None).collect()
        };

        let partials: Vec<(Vec<T>, Vec<T>)> = dx_chunks
            .par_iter_mut()
            .enumerate()
            .map(|(gi, dx_chunk)| {
                let mut dw = if want_w { vec![T::zero(); o * ck] } else { Vec::new() };
                let mut db = if want_b { vec![T::zero(); o] } else { Vec::new() };
                let mut cols = Vec::new();
                let mut dcols = Vec::new();
                let start = gi * GROUP;
                for s in start..(start + GROUP).min(n) {
                    let xn = &xs[s * chw..(s + 1) * chw];
                    let dyn_ = &dys[s * o * ohw..(s + 1) * o * ohw];
                    if want_w {
                        let src: &[T] = if pointwise {
                            xn
                        } else {
                            cols.resize(ck * ohw, T::zero());
                            im2col(xn, c, h, wd, kh, kw, geom, oh, ow, &mut cols);
                            &cols
                        };
                        T::gemm(o, ohw, ck, T::one(), dyn_, false, src, true, T::one(), &mut dw);
                    }
                    if want_b {
                        for (d, row) in db.iter_mut().zip(dyn_.chunks(ohw)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(chunk) = dx_chunk.as_deref_mut() {
                        let local = s - start;
                        let dxn = &mut chunk[local * chw..(local + 1) * chw];
                        if pointwise {
                            T::gemm(ck, o, ohw, T::one(), ws, true, dyn_, false, T::zero(), dxn);
                        } else {
                            dcols.resize(ck * ohw, T::zero());
                            T::gemm(ck, o, ohw, T::one(), ws, true, dyn_, false, T::zero(), &mut dcols);
                            col2im(&dcols, c, h, wd, kh, kw, geom, oh, ow, dxn);
                        }
                    }
                }
                (dw, db)
            })
            .collect();
        drop(dx_chunks);

        if want_x {
            self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), dx)?);
        }
        if want_w {
            let mut dw = vec![T::zero(); o * ck];
            for (p, _) in &partials {
                for (a, &v) in dw.iter_mut().zip(p) {
                    *a += v;
                }
            }
            self.accumulate(grads, w, Tensor::new(tw.shape().to_vec(), dw)?);
        }
        if let (true, Some(b)) = (want_b, b) {
            let mut db = vec![T::zero(); o];
            for (_, p) in &partials {
                for (a, &v) in db.iter_mut().zip(p) {
                    *a += v;
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![o], db)?);
        }
        Ok(())
    }
}
