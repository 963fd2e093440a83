use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsifsl_core::augment::{mask_spectrum, rm_expand};
use hsifsl_core::data::synthetic::texture_pool;
use hsifsl_core::losses::{mr_loss, rm_loss, sslcl_loss, stage_total, Distance};
use hsifsl_core::network::{FusedNet, Forward, NetworkConfig, SpatialPretrainNet, SpectralPretrainNet};
use hsifsl_core::params::{ParamKind, ParamStore};
use hsifsl_core::patch::{patch_batch, vector_batch, Episode, Patch};
use hsifsl_core::pipeline::episode_loss;
use hsifsl_core::tensor::Tensor;

use crate::{ensure, Check};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
/// Relative error is taken against at least this magnitude, so near-zero gradients are
/// judged on absolute error instead of amplified roundoff.
const DENOM_FLOOR: f64 = 1e-4;

type LossFn<'a> = dyn Fn(&mut ParamStore<f64>, bool) -> (f64, BTreeMap<String, Tensor<f64>>) + 'a;

/// Compare analytic gradients with central differences over every trainable scalar.
fn check(name: &str, store: &ParamStore<f64>, loss: &LossFn<'_>) -> Result<(usize, f64), String> {
    let (_, analytic) = loss(&mut store.clone(), true);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (pname, p) in store.iter() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let grad = analytic.get(pname).ok_or_else(|| format!("{name}: no gradient for {pname}"))?;
        ensure!(grad.shape() == p.value.shape(), "{name}: gradient shape of {pname}");
        for i in 0..p.value.numel() {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.tensor_mut(pname).unwrap().data_mut()[i] += delta;
                loss(&mut s, false).0
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            ensure!(
                rel < REL_TOL,
                "{name}: {pname}[{i}] analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.2e})"
            );
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok((count, worst))
}

fn random_patches(n: usize, size: usize, bands: usize, rng: &mut ChaCha8Rng) -> Vec<Patch> {
    (0..n)
        .map(|_| {
            let w = (0..size * size * bands).map(|_| rng.random_range(0.0..1.0)).collect();
            Patch::new(size, bands, w).unwrap()
        })
        .collect()
}

/// Two-way one-shot episode over items 0..6: supports 0 and 1, two queries per class.
fn episode() -> Episode {
    Episode {
        ways: 2,
        shots: 1,
        queries: 2,
        support: vec![(0, 0), (1, 1)],
        query: vec![(2, 0), (3, 0), (4, 1), (5, 1)],
        class_map: vec![1, 2],
    }
}

fn finish(mut f: Forward<'_, f64>, comps: Vec<hsifsl_core::autograd::Var>, grads: bool) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let total = stage_total(&mut f.g, &comps).unwrap();
    let value = f.g.value(total).data()[0];
    let g = if grads { f.gradients(total).unwrap() } else { BTreeMap::new() };
    (value, g)
}

fn fused() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = NetworkConfig::toy();
    let (bands, size) = (16, cfg.patch_size);
    let net = FusedNet::new(&cfg, bands, 3).map_err(|e| e.to_string())?;
    let store: ParamStore<f64> = net.init(5);
    let ep = episode();
    let items = random_patches(6, size, bands, &mut rng);
    let view_a = random_patches(6, size, bands, &mut rng);
    let view_b = random_patches(6, size, bands, &mut rng);
    let loss = |s: &mut ParamStore<f64>, grads: bool| {
        let mut f = Forward::new(s, true, ChaCha8Rng::seed_from_u64(99));
        let batch = |ps: &[Patch]| patch_batch::<f64>(&ps.iter().collect::<Vec<_>>()).unwrap();
        let (w, sp) = batch(&items);
        let (w, sp) = (f.input(w), f.input(sp));
        let emb = net.embedding(&mut f, w, sp).unwrap();
        let fsl = episode_loss(&mut f.g, emb, &ep, Distance::Euclidean).unwrap();
        let mut probs = Vec::new();
        for view in [&view_a, &view_b] {
            let (w, sp) = batch(view);
            let (w, sp) = (f.input(w), f.input(sp));
            probs.push(net.sslcl_probs(&mut f, w, sp).unwrap());
        }
        let cl = sslcl_loss(&mut f.g, probs[0], probs[1]).unwrap();
        finish(f, vec![fsl, cl], grads)
    };
    check("fused", &store, &loss)
}

fn spatial() -> Result<(usize, f64), String> {
    let cfg = NetworkConfig::toy();
    let net = SpatialPretrainNet::new(&cfg).map_err(|e| e.to_string())?;
    let store: ParamStore<f64> = net.init(6);
    let pool: Vec<Patch> = texture_pool(2, 4, cfg.patch_size, 7).into_iter().map(|(p, _)| p).collect();
    // items 0..4 are class 1, 4..8 class 2
    let items: Vec<Patch> = [0, 4, 1, 2, 5, 6].iter().map(|&i| pool[i].clone()).collect();
    let expanded = rm_expand(&[pool[3].clone(), pool[7].clone()]);
    let labels: Vec<usize> = expanded.iter().map(|(_, t)| t.id() - 1).collect();
    let ep = episode();
    let loss = |s: &mut ParamStore<f64>, grads: bool| {
        let mut f = Forward::new(s, true, ChaCha8Rng::seed_from_u64(98));
        let (w, _) = patch_batch::<f64>(&items.iter().collect::<Vec<_>>()).unwrap();
        let w = f.input(w);
        let feats = net.features(&mut f, w).unwrap();
        let fsl = episode_loss(&mut f.g, feats, &ep, Distance::Euclidean).unwrap();
        let (w, _) = patch_batch::<f64>(&expanded.iter().map(|(p, _)| p).collect::<Vec<_>>()).unwrap();
        let w = f.input(w);
        let logits = net.rm_logits(&mut f, w).unwrap();
        let rm = rm_loss(&mut f.g, logits, &labels).unwrap();
        finish(f, vec![fsl, rm], grads)
    };
    check("spatial pretraining", &store, &loss)
}

fn spectral() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = NetworkConfig::toy();
    let (src, tgt) = (20, 16);
    let net = SpectralPretrainNet::new(&cfg, src, tgt).map_err(|e| e.to_string())?;
    let store: ParamStore<f64> = net.init(8);
    let spectra: Vec<Vec<f32>> = (0..6).map(|_| (0..src).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let masked: Vec<_> = (0..5)
        .map(|_| {
            let x: Vec<f32> = (0..src).map(|_| rng.random_range(0.0..1.0)).collect();
            mask_spectrum(&x, 0.75, &mut rng).unwrap()
        })
        .collect();
    let ep = episode();
    let loss = |s: &mut ParamStore<f64>, grads: bool| {
        let mut f = Forward::new(s, true, ChaCha8Rng::seed_from_u64(97));
        let rows: Vec<&[f32]> = spectra.iter().map(Vec::as_slice).collect();
        let x = f.input(vector_batch::<f64>(&rows).unwrap());
        let emb = net.embedding(&mut f, x).unwrap();
        let fsl = episode_loss(&mut f.g, emb, &ep, Distance::Euclidean).unwrap();
        let orig: Vec<&[f32]> = masked.iter().map(|m| m.original.as_slice()).collect();
        let inp: Vec<&[f32]> = masked.iter().map(|m| m.masked.as_slice()).collect();
        let target = f.input(vector_batch::<f64>(&orig).unwrap());
        let inp = f.input(vector_batch::<f64>(&inp).unwrap());
        let recon = net.reconstruct(&mut f, inp).unwrap();
        let mr = mr_loss(&mut f.g, target, recon).unwrap();
        finish(f, vec![fsl, mr], grads)
    };
    check("spectral pretraining", &store, &loss)
}

pub fn gradient_checks() -> Check {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, run) in [
        ("fused", fused as fn() -> Result<(usize, f64), String>),
        ("spatial", spatial),
        ("spectral", spectral),
    ] {
        let (n, w) = run()?;
        parts.push(format!("{name} {n} scalars"));
        worst = worst.max(w);
    }
    Ok(format!("{}; worst relative error {worst:.2e}", parts.join(", ")))
}
