//! Scalar training objectives, all built on the autograd graph so they differentiate
//! through whatever network produced their inputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to probabilities inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

/// Tolerance on row sums of probability matrices.
pub const PROB_ROW_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Plain Euclidean norm.
    #[default]
    Euclidean,
    /// Squared Euclidean norm, as in classic prototypical networks.
    SquaredEuclidean,
}

/// Mean feature of each local class: `[n, d]` features with labels in `0..ways` → `[ways, d]`.
pub fn class_prototypes<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    labels: &[usize],
    ways: usize,
) -> Result<Var> {
    let (n, _) = g.value(features).dims2()?;
    if labels.len() != n {
        bail!(Contract, "{} labels for {n} features", labels.len());
    }
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            bail!(Contract, "label {l} outside 0..{ways}");
        }
        counts[l] += 1;
    }
    if let Some(m) = counts.iter().position(|&c| c == 0) {
        bail!(Contract, "class {m} has no support features");
    }
    let mut avg = vec![T::zero(); ways * n];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * n + i] = T::one() / T::lit(counts[l] as f64);
    }
    let a = g.constant(Tensor::new(vec![ways, n], avg)?);
    g.matmul(a, features)
}

/// Log-softmax over negative distances from each query to each prototype, `[q, ways]`.
pub fn proto_log_probs<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    distance: Distance,
) -> Result<Var> {
    let d = g.pairwise_dist(queries, prototypes, distance == Distance::SquaredEuclidean)?;
    let neg = g.scale(d, -1.0);
    g.log_softmax(neg)
}

/// Summed negative log-likelihood of the true local class over all queries.
pub fn fsl_episode_loss<T: Real>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = g.gather(log_probs, labels)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0))
}

/// Mean cross-entropy of six-way transform logits; `labels` are 0-based.
pub fn rm_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        bail!(Contract, "rm_loss over an empty batch");
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, labels)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Mean over samples of the per-band mean squared error, over every band.
pub fn mr_loss<T: Real>(g: &mut Graph<T>, target: Var, recon: Var) -> Result<Var> {
    if g.value(target).shape() != g.value(recon).shape() {
        bail!(
            Contract,
            "reconstruction shape {:?} differs from target {:?}",
            g.value(recon).shape(),
            g.value(target).shape()
        );
    }
    let numel = g.value(target).numel();
    if numel == 0 {
        bail!(Contract, "mr_loss over an empty batch");
    }
    let diff = g.sub(target, recon)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / numel as f64))
}

fn check_prob_rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    let (r, _) = t.dims2()?;
    for i in 0..r {
        let row = t.row(i);
        if row.iter().any(|&p| !(p >= T::zero())) {
            bail!(Contract, "{what} row {i} has a negative or NaN entry");
        }
        let s: f64 = row.iter().map(|p| p.f64()).sum();
        if (s - 1.0).abs() > PROB_ROW_TOL {
            bail!(Contract, "{what} row {i} sums to {s}");
        }
    }
    Ok(())
}

/// Entropy terms of one direction: mean KL(a‖b) + mean H(a) − H(mean a).
fn sslcl_direction<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (rows, _) = g.value(a).dims2()?;
    let inv = 1.0 / rows as f64;
    let log_a = g.log_clamp(a, LOG_EPS);
    let log_b = g.log_clamp(b, LOG_EPS);
    let ratio = g.sub(log_a, log_b)?;
    let kl = g.mul(a, ratio)?;
    let kl = g.sum_all(kl);
    let consistency = g.scale(kl, inv);
    let a_log_a = g.mul(a, log_a)?;
    let neg_h = g.sum_all(a_log_a);
    let sharpness = g.scale(neg_h, -inv);
    let mean = g.mean_rows(a)?;
    let log_mean = g.log_clamp(mean, LOG_EPS);
    let m_log_m = g.mul(mean, log_mean)?;
    // −H(mean) = Σ m log m
    let neg_diversity = g.sum_all(m_log_m);
    let t = g.add(consistency, sharpness)?;
    g.add(t, neg_diversity)
}

/// Symmetric consistency loss between two views' class-probability rows, with sharpness
/// and diversity entropy terms.
pub fn sslcl_loss<T: Real>(g: &mut Graph<T>, z1: Var, z2: Var) -> Result<Var> {
    if g.value(z1).shape() != g.value(z2).shape() {
        bail!(Contract, "views have different shapes");
    }
    check_prob_rows(g.value(z1), "first view")?;
    check_prob_rows(g.value(z2), "second view")?;
    let l12 = sslcl_direction(g, z1, z2)?;
    let l21 = sslcl_direction(g, z2, z1)?;
    let s = g.add(l12, l21)?;
    Ok(g.scale(s, 0.5))
}

/// Unweighted sum of a stage's component losses.
pub fn stage_total<T: Real>(g: &mut Graph<T>, components: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = components.split_first() else {
        bail!(Contract, "a stage total needs at least one component");
    };
    let mut acc = first;
    for &c in rest {
        acc = g.add(acc, c)?;
    }
    Ok(acc)
}

/// Evaluate a loss built from constant inputs, returning its value.
pub fn evaluate<T: Real>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).data()[0].f64())
}
