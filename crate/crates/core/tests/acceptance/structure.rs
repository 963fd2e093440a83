use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsifsl_core::augment::{rm_transform, RmTransform};
use hsifsl_core::network::{FusedNet, Forward, NetworkConfig};
use hsifsl_core::params::ParamStore;
use hsifsl_core::patch::Patch;
use hsifsl_core::tensor::Tensor;

use crate::{ensure, Check};

fn conv_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Layer shapes of the default fused network, worked out from the layer table alone.
fn expected_trace(n: usize, bands: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>| out.push((name.to_string(), shape));
    let s = 33;
    push("spatial/mapping/conv", vec![n, 3, s, s]);
    push("spatial/mapping/bn", vec![n, 3, s, s]);
    let mut size = s;
    let blocks: [(&[usize], usize); 3] = [(&[1, 2], 64), (&[3, 4], 128), (&[5, 6, 7], 256)];
    for (pool, (convs, ch)) in blocks.iter().enumerate() {
        for c in *convs {
            push(&format!("spatial/backbone/conv{c}"), vec![n, *ch, size, size]);
        }
        size /= 2;
        push(&format!("spatial/backbone/pool{}", pool + 1), vec![n, *ch, size, size]);
    }
    let head = conv_len(size, 3, 1, 0);
    push("spatial/head/conv", vec![n, 512, head, head]);
    push("spatial/head/bn", vec![n, 512, head, head]);
    push("spatial/head/pool", vec![n, 512, head / 2, head / 2]);
    push("spatial/head/linear", vec![n, 100]);
    let l = conv_len(bands, 7, 2, 0);
    for layer in ["conv1", "bn1", "res/conv_a", "res/bn_a", "res/conv_b", "res/bn_b"] {
        push(&format!("spectral/encoder/{layer}"), vec![n, 24, l]);
    }
    push("spectral/encoder/conv_out", vec![n, 128, 1]);
    push("spectral/encoder/bn_out", vec![n, 128, 1]);
    push("spectral/encoder/linear", vec![n, 100]);
    push("fusion/concat", vec![n, 200]);
    push("fusion/fsl/fc1", vec![n, 64]);
    push("fusion/fsl/fc2", vec![n, classes]);
    push("fusion/sslcl/fc1", vec![n, 64]);
    push("fusion/sslcl/fc2", vec![n, classes]);
    push("fusion/sslcl/bn", vec![n, classes]);
    out
}

pub fn shape_ledger() -> Check {
    let n = 2;
    let mut lens = Vec::new();
    for (bands, classes) in [(103, 9), (200, 16), (204, 16), (274, 22)] {
        let cfg = NetworkConfig::default();
        let net = FusedNet::new(&cfg, bands, classes).map_err(|e| e.to_string())?;
        let mut store: ParamStore<f32> = net.init(0);
        let l = conv_len(bands, 7, 2, 0);
        let w = store.tensor("spectral/encoder/conv_out/weight").map_err(|e| e.to_string())?;
        ensure!(w.shape() == [128, 24, l], "B={bands}: final spectral kernel {:?}, want [128, 24, {l}]", w.shape());
        let s = cfg.patch_size;
        let windows = Tensor::from_fn(&[n, bands, s, s], |i| ((i * 31) % 97) as f32 / 97.0);
        let spectra = Tensor::from_fn(&[n, bands], |i| ((i * 7) % 13) as f32 / 13.0);
        let mut f = Forward::new(&mut store, false, ChaCha8Rng::seed_from_u64(0)).with_trace();
        let (w, sp) = (f.input(windows), f.input(spectra));
        let out = net.forward_fused(&mut f, w, sp).map_err(|e| e.to_string())?;
        ensure!(f.g.value(out.embedding).shape() == [n, classes], "B={bands}: embedding shape");
        let got = f.trace().to_vec();
        let want = expected_trace(n, bands, classes);
        ensure!(got.len() == want.len(), "B={bands}: {} traced layers, want {}", got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            ensure!(g == w, "B={bands}: traced {g:?}, want {w:?}");
        }
        lens.push(format!("B={bands}→L={l}"));
    }
    Ok(format!("fused network layer shapes match for {}", lens.join(", ")))
}

type Grid = Vec<Vec<Vec<f32>>>;

fn grid(p: &Patch) -> Grid {
    (0..p.size).map(|r| (0..p.size).map(|c| p.pixel(r, c).to_vec()).collect()).collect()
}

fn transpose(g: &Grid) -> Grid {
    (0..g.len()).map(|i| (0..g.len()).map(|j| g[j][i].clone()).collect()).collect()
}

fn rev_rows(g: &Grid) -> Grid {
    g.iter().rev().cloned().collect()
}

fn rev_cols(g: &Grid) -> Grid {
    g.iter().map(|r| r.iter().rev().cloned().collect()).collect()
}

fn rot90(g: &Grid) -> Grid {
    rev_rows(&transpose(g))
}

fn oracle(g: &Grid, t: RmTransform) -> Grid {
    match t {
        RmTransform::Identity => g.clone(),
        RmTransform::Rot90 => rot90(g),
        RmTransform::Rot180 => rot90(&rot90(g)),
        RmTransform::Rot270 => rot90(&rot90(&rot90(g))),
        RmTransform::HFlip => rev_cols(g),
        RmTransform::VFlip => rev_rows(g),
    }
}

pub fn transform_group() -> Check {
    use RmTransform::*;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for size in [3, 33] {
        for _ in 0..20 {
            let bands = rng.random_range(1..=4);
            let w = (0..size * size * bands).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = Patch::new(size, bands, w).map_err(|e| e.to_string())?;
            let g = grid(&p);
            let mut images = Vec::new();
            for t in RmTransform::ALL {
                let out = rm_transform(&p, t);
                ensure!(grid(&out) == oracle(&g, t), "size {size}: {t:?} differs from the array oracle");
                ensure!(out.center == p.center && out.label == p.label, "{t:?} changed metadata");
                images.push(grid(&out));
            }
            for i in 0..6 {
                for j in 0..i {
                    ensure!(images[i] != images[j], "size {size}: transforms {} and {} coincide", i + 1, j + 1);
                }
            }
            let apply = |ts: &[RmTransform]| ts.iter().fold(p.clone(), |q, &t| rm_transform(&q, t));
            ensure!(apply(&[Rot90; 4]) == p, "four quarter turns are not the identity");
            ensure!(apply(&[Rot90, Rot90]) == rm_transform(&p, Rot180), "two quarter turns differ from 180");
            ensure!(apply(&[Rot90; 3]) == rm_transform(&p, Rot270), "three quarter turns differ from 270");
            ensure!(apply(&[HFlip, HFlip]) == p, "horizontal flip is not an involution");
            ensure!(apply(&[VFlip, VFlip]) == p, "vertical flip is not an involution");
            ensure!(apply(&[HFlip, VFlip]) == rm_transform(&p, Rot180), "both flips differ from 180");
            ensure!(apply(&[Rot90, Rot270]) == p, "90 then 270 is not the identity");
            checked += 1;
        }
    }
    Ok(format!("{checked} random patches at sizes 3 and 33: all six transforms match array oracles, group identities exact"))
}
