use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsifsl_core::augment::mask_spectrum;
use hsifsl_core::autograd::{Graph, Var};
use hsifsl_core::losses::{
    class_prototypes, evaluate, fsl_episode_loss, mr_loss, proto_log_probs, rm_loss, sslcl_loss, Distance,
};
use hsifsl_core::metrics::{compute_metrics, from_confusion};
use hsifsl_core::network::{Forward, NetworkConfig, SpectralPretrainNet};
use hsifsl_core::params::ParamStore;
use hsifsl_core::tensor::Tensor;

use crate::{ensure, Check};

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-9;

type Mat = Vec<Vec<f64>>;

fn rand_mat(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

fn softmax_rows(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v.exp() / z).collect()
        })
        .collect()
}

fn rows_of(g: &Graph<f64>, v: Var) -> Mat {
    let t = g.value(v);
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs oracle {b}"))
    }
}

/// Class means, plain distances, exponentiated and normalized directly.
fn oracle_probs(sup: &Mat, sup_labels: &[usize], que: &Mat, ways: usize) -> Mat {
    let d = sup[0].len();
    let mut protos = vec![vec![0.0; d]; ways];
    let mut counts = vec![0.0; ways];
    for (x, &l) in sup.iter().zip(sup_labels) {
        counts[l] += 1.0;
        for k in 0..d {
            protos[l][k] += x[k];
        }
    }
    for (p, c) in protos.iter_mut().zip(&counts) {
        p.iter_mut().for_each(|v| *v /= c);
    }
    que.iter()
        .map(|q| {
            let e: Vec<f64> = protos
                .iter()
                .map(|p| (-q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).exp())
                .collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn oracle_sslcl(a: &Mat, b: &Mat) -> f64 {
    let dir = |a: &Mat, b: &Mat| {
        let n = a.len() as f64;
        let k = a[0].len();
        let mut kl = 0.0;
        let mut h = 0.0;
        let mut mean = vec![0.0; k];
        for (ra, rb) in a.iter().zip(b) {
            for j in 0..k {
                kl += ra[j] * (ra[j] / rb[j]).ln();
                h -= ra[j] * ra[j].ln();
                mean[j] += ra[j] / n;
            }
        }
        let h_mean: f64 = -mean.iter().map(|m| m * m.ln()).sum::<f64>();
        kl / n + h / n - h_mean
    };
    0.5 * (dir(a, b) + dir(b, a))
}

pub fn loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..INSTANCES {
        // prototype probabilities and the summed episode loss
        let ways = rng.random_range(2..=8);
        let shots = rng.random_range(1..=3);
        let queries = rng.random_range(1..=4);
        let dim = rng.random_range(1..=64);
        let sup = rand_mat(ways * shots, dim, 1.0, &mut rng);
        let que = rand_mat(ways * queries, dim, 1.0, &mut rng);
        let sup_labels: Vec<usize> = (0..ways * shots).map(|i| i / shots).collect();
        let que_labels: Vec<usize> = (0..ways * queries).map(|i| i / queries).collect();
        let want = oracle_probs(&sup, &sup_labels, &que, ways);
        let mut g = Graph::<f64>::new();
        let (s, q) = (g.constant(tensor(&sup)), g.constant(tensor(&que)));
        let protos = class_prototypes(&mut g, s, &sup_labels, ways).map_err(|e| e.to_string())?;
        let lp = proto_log_probs(&mut g, q, protos, Distance::Euclidean).map_err(|e| e.to_string())?;
        for (r, w) in rows_of(&g, lp).iter().zip(&want) {
            for (a, b) in r.iter().zip(w) {
                close(*a, b.ln(), &format!("case {case}: log-probability"))?;
            }
        }
        let loss = fsl_episode_loss(&mut g, lp, &que_labels).map_err(|e| e.to_string())?;
        let oracle: f64 = -que_labels.iter().enumerate().map(|(j, &l)| want[j][l].ln()).sum::<f64>();
        close(g.value(loss).data()[0], oracle, &format!("case {case}: episode loss"))?;

        // rotation-mirror cross-entropy
        let n = rng.random_range(1..=64);
        let logits = rand_mat(n, 6, 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let probs = softmax_rows(&logits);
        let oracle = -labels.iter().enumerate().map(|(i, &l)| probs[i][l].ln()).sum::<f64>() / n as f64;
        let got = evaluate::<f64>(|g| {
            let x = g.constant(tensor(&logits));
            rm_loss(g, x, &labels)
        })
        .map_err(|e| e.to_string())?;
        close(got, oracle, &format!("case {case}: rotation-mirror loss"))?;

        // reconstruction error over every band
        let (n, bands) = (rng.random_range(1..=8), rng.random_range(1..=64));
        let x = rand_mat(n, bands, 1.0, &mut rng);
        let y = rand_mat(n, bands, 1.0, &mut rng);
        let oracle = x
            .iter()
            .zip(&y)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / bands as f64)
            .sum::<f64>()
            / n as f64;
        let got = evaluate::<f64>(|g| {
            let (a, b) = (g.constant(tensor(&x)), g.constant(tensor(&y)));
            mr_loss(g, a, b)
        })
        .map_err(|e| e.to_string())?;
        close(got, oracle, &format!("case {case}: reconstruction loss"))?;

        // two-view consistency with entropy terms
        let (n, k) = (rng.random_range(1..=64), rng.random_range(2..=8));
        let a = softmax_rows(&rand_mat(n, k, 4.0, &mut rng));
        let b = softmax_rows(&rand_mat(n, k, 4.0, &mut rng));
        let got = evaluate::<f64>(|g| {
            let (z1, z2) = (g.constant(tensor(&a)), g.constant(tensor(&b)));
            sslcl_loss(g, z1, z2)
        })
        .map_err(|e| e.to_string())?;
        close(got, oracle_sslcl(&a, &b), &format!("case {case}: consistency loss"))?;
    }
    let decoded = decoder_oracle()?;
    Ok(format!(
        "{INSTANCES} instances each of prototype probabilities, episode, rotation-mirror, reconstruction \
         and consistency losses within {TOL:e}; {decoded} decoder outputs match"
    ))
}

/// The reconstruction head applied by hand to the encoder's latent code.
fn decoder_oracle() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = NetworkConfig::toy();
    for case in 0..INSTANCES {
        let src = rng.random_range(3..=64);
        let tgt = rng.random_range(3..=64);
        let n = rng.random_range(1..=4);
        let net = SpectralPretrainNet::new(&cfg, src, tgt).map_err(|e| e.to_string())?;
        let mut store: ParamStore<f64> = net.init(case as u64);
        let x = rand_mat(n, src, 1.0, &mut rng);
        let mut f = Forward::new(&mut store, false, ChaCha8Rng::seed_from_u64(0));
        let input = f.input(tensor(&x));
        let recon = net.reconstruct(&mut f, input).map_err(|e| e.to_string())?;
        let recon = rows_of(&f.g, recon);
        let mapped = net.mapper.forward(&mut f, input).map_err(|e| e.to_string())?;
        let z = net.spectral.forward(&mut f, mapped).map_err(|e| e.to_string())?;
        let z = rows_of(&f.g, z);
        let p = |name: &str| f.store.tensor(name).unwrap().clone();
        let (w1, b1) = (p("heads/decoder/fc1/weight"), p("heads/decoder/fc1/bias"));
        let (w2, b2) = (p("heads/decoder/fc2/weight"), p("heads/decoder/fc2/bias"));
        let dense = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            (0..w.shape()[0]).map(|o| b.data()[o] + w.row(o).iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
        };
        for (zr, rr) in z.iter().zip(&recon) {
            let h: Vec<f64> = dense(&w1, &b1, zr).into_iter().map(|v| v.max(0.0)).collect();
            let want = dense(&w2, &b2, &h);
            ensure!(want.len() == src, "case {case}: decoder emits {} bands for {src}", want.len());
            for (a, b) in rr.iter().zip(&want) {
                close(*a, *b, &format!("case {case}: reconstruction"))?;
            }
        }
    }
    Ok(INSTANCES)
}

pub fn sslcl_anchors() -> Check {
    let run = |a: &Mat, b: &Mat| {
        evaluate::<f64>(|g| {
            let (z1, z2) = (g.constant(tensor(a)), g.constant(tensor(b)));
            sslcl_loss(g, z1, z2)
        })
        .unwrap()
    };
    let uniform = vec![vec![0.25; 4]; 5];
    let u = run(&uniform, &uniform);
    ensure!(u.abs() <= TOL, "uniform views give {u}");
    let same = vec![vec![0.0, 1.0, 0.0]; 6];
    let s = run(&same, &same);
    ensure!(s.abs() <= TOL, "identical one-hot batch gives {s}");
    let mut worst: f64 = 0.0;
    for n in [2usize, 4, 9, 16] {
        let eye: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let v = run(&eye, &eye);
        let err = (v + (n as f64).ln()).abs();
        ensure!(err <= TOL, "{n} distinct one-hots give {v}, want {}", -(n as f64).ln());
        worst = worst.max(err);
    }
    Ok(format!("uniform {u:e}, one-hot batch {s:e}, distinct one-hots within {worst:.1e} of -ln N"))
}

pub fn masking_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ratios = [0.0, 0.25, 0.5, 0.75, 1.0];
    for case in 0..10_000 {
        let bands = rng.random_range(1..=512);
        let ratio = ratios[rng.random_range(0..ratios.len())];
        let x: Vec<f32> = (0..bands).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = mask_spectrum(&x, ratio, &mut rng).map_err(|e| e.to_string())?;
        let pop = m.mask.iter().filter(|&&b| b == 1).count();
        let want = (ratio * bands as f64).floor() as usize;
        ensure!(pop == want, "case {case}: {pop} masked of {bands} at ratio {ratio}, want {want}");
        ensure!(m.original == x, "case {case}: original altered");
        for i in 0..bands {
            ensure!(m.mask[i] <= 1, "case {case}: mask entry {}", m.mask[i]);
            let expect = x[i] * (1.0 - m.mask[i] as f32);
            ensure!(m.masked[i] == expect, "case {case}: band {i} is {} not {expect}", m.masked[i]);
        }
    }
    let x: Vec<f32> = (0..128).map(|i| i as f32 + 1.0).collect();
    let m = mask_spectrum(&x, 0.75, &mut rng).map_err(|e| e.to_string())?;
    let pop = m.mask.iter().filter(|&&b| b == 1).count();
    ensure!(pop == 96, "ratio 0.75 over 128 bands masks {pop}");
    Ok("10000 draws exact; 96 of 128 bands at ratio 0.75".into())
}

pub fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..INSTANCES {
        let n = rng.random_range(2..=12usize);
        let total = rng.random_range(n..=400);
        // every class appears in the truth at least once
        let mut truth: Vec<u16> = (1..=n as u16).collect();
        truth.extend((n..total).map(|_| rng.random_range(1..=n as u16)));
        let skill = rng.random_range(0.0..1.0);
        let pred: Vec<u16> = truth
            .iter()
            .map(|&t| if rng.random_bool(skill) { t } else { rng.random_range(1..=n as u16) })
            .collect();
        let r = compute_metrics(&truth, &pred, n).map_err(|e| e.to_string())?;

        let count = |f: &dyn Fn(usize) -> bool| (0..total).filter(|&i| f(i)).count() as f64;
        let t = total as f64;
        let oa = count(&|i| truth[i] == pred[i]) / t;
        let mut aa = 0.0;
        let mut pe = 0.0;
        for c in 1..=n as u16 {
            let in_class = count(&|i| truth[i] == c);
            aa += count(&|i| truth[i] == c && pred[i] == c) / in_class / n as f64;
            pe += in_class * count(&|i| pred[i] == c) / (t * t);
        }
        let kappa = (oa - pe) / (1.0 - pe);
        close(r.oa, oa, &format!("case {case}: OA"))?;
        close(r.aa, aa, &format!("case {case}: AA"))?;
        close(r.kappa, kappa, &format!("case {case}: kappa"))?;
    }
    let diag = from_confusion(vec![vec![7, 0, 0], vec![0, 3, 0], vec![0, 0, 11]]).map_err(|e| e.to_string())?;
    ensure!(diag.kappa == 1.0 && diag.oa == 1.0, "diagonal gives kappa {}", diag.kappa);
    let truth: Vec<u16> = (0..50).map(|i| 1 + (i % 3) as u16).collect();
    let constant = compute_metrics(&truth, &[2; 50], 3).map_err(|e| e.to_string())?;
    ensure!(constant.kappa == 0.0, "constant predictor gives kappa {}", constant.kappa);
    Ok(format!("{INSTANCES} random settings within {TOL:e}; diagonal kappa 1, constant predictor kappa 0"))
}
