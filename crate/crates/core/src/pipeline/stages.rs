use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::log::{LogRecord, RunLog};
use super::sources::{ImagePool, SpectralPool, TargetData};
use crate::augment::{mask_spectrum, rm_expand_with, sslcl_augment, RmTransform};
use crate::autograd::{Graph, Var};
use crate::config::{ExperimentConfig, RmSsl, SslclMode};
use crate::data::{augment_labeled_set, AugEntry, SplitSpec};
use crate::error::{bail, Result};
use crate::losses::{
    class_prototypes, fsl_episode_loss, mr_loss, proto_log_probs, rm_loss, sslcl_loss, stage_total, Distance,
};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::network::checkpoint::transfer;
use crate::network::{
    FusedNet, Forward, NetworkConfig, SpatialPretrainNet, SpectralPretrainNet, SPATIAL_BACKBONE, SPATIAL_TRANSFER,
    SPECTRAL_TRANSFER,
};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::patch::{extract_patch, patch_batch, sample_episode, vector_batch, ClassPool, Episode, Patch};
use crate::tensor::{Tensor, Real};

/// Independent seed for `(tag, index)` under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(tag.wrapping_mul(0x1000_0000_01B3) ^ mix(index)))
}

fn rng(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Prototype loss of an episode whose features hold the support rows, then the query rows.
pub fn episode_loss<T: Real>(g: &mut Graph<T>, feats: Var, ep: &Episode, distance: Distance) -> Result<Var> {
    let ns = ep.support.len();
    let nq = ep.query.len();
    let sup = g.select_rows(feats, &(0..ns).collect::<Vec<_>>())?;
    let que = g.select_rows(feats, &(ns..ns + nq).collect::<Vec<_>>())?;
    let protos = class_prototypes(g, sup, &ep.support_labels(), ep.ways)?;
    let lp = proto_log_probs(g, que, protos, distance)?;
    fsl_episode_loss(g, lp, &ep.query_labels())
}

type Grads = BTreeMap<String, Tensor<f32>>;

/// Component values and the gradients of their sum.
fn finish(f: Forward<'_, f32>, comps: Vec<(&str, Var)>) -> Result<(BTreeMap<String, f64>, Grads)> {
    let mut f = f;
    let mut values = BTreeMap::new();
    for (name, v) in &comps {
        let x = f.g.value(*v).data()[0] as f64;
        if !x.is_finite() {
            bail!(Contract, "loss component {name} is not finite");
        }
        values.insert(name.to_string(), x);
    }
    let vars: Vec<Var> = comps.iter().map(|c| c.1).collect();
    let total = stage_total(&mut f.g, &vars)?;
    Ok((values, f.gradients(total)?))
}

fn rm_set(mode: RmSsl) -> Vec<RmTransform> {
    match mode {
        RmSsl::Off => Vec::new(),
        RmSsl::SixWay => RmTransform::ALL.to_vec(),
        RmSsl::FourRotation => RmTransform::ALL[..4].to_vec(),
    }
}

/// Stage 1: few-shot episodes plus the rotation-mirror task on three-channel images.
/// `backbone` optionally seeds the backbone before training.
pub fn pretrain_spatial(
    cfg: &ExperimentConfig,
    ways: usize,
    pool: &ImagePool,
    backbone: Option<&ParamStore<f32>>,
    log: &mut RunLog,
) -> Result<ParamStore<f32>> {
    let sc = &cfg.stage1;
    if pool.size != cfg.network.patch_size {
        bail!(Config, "image pool items are {}x{}, patch size is {}", pool.size, pool.size, cfg.network.patch_size);
    }
    let classes = pool.classes();
    if classes.n_classes() < ways {
        bail!(Config, "image pool has {} classes, episodes need {ways}", classes.n_classes());
    }
    let net = SpatialPretrainNet::new(&cfg.network)?;
    let mut store = net.init::<f32>(derive_seed(cfg.base_seed, 1, 0));
    if let Some(b) = backbone {
        let prefix = format!("{SPATIAL_BACKBONE}/");
        transfer(b, &mut store, &[prefix.as_str()], true)?;
    }
    let transforms = rm_set(cfg.ablation.rm_ssl);
    let mut components = vec!["fsl".to_string()];
    if !transforms.is_empty() {
        components.push("rm".into());
    }
    log.push(LogRecord::Plan {
        stage: 1,
        run: None,
        components,
        rm_transforms: transforms.iter().map(|t| t.id()).collect(),
        sslcl: None,
    })?;
    let mut draw = rng(cfg.base_seed, 1, 1);
    let mut adam = Adam::new(sc.lr);
    let start = Instant::now();
    for e in 1..=sc.episodes {
        let ep = sample_episode(&classes, ways, sc.shots, sc.queries, &mut draw)?;
        let rm_idx = if transforms.is_empty() {
            Vec::new()
        } else {
            sample(&mut draw, pool.items.len(), sc.rm_batch.min(pool.items.len())).into_vec()
        };
        let mut f = Forward::new(&mut store, true, rng(cfg.base_seed, 1, 1000 + e as u64));
        let items: Vec<&Patch> = ep.support.iter().chain(&ep.query).map(|&(i, _)| &pool.items[i]).collect();
        let (w, _) = patch_batch::<f32>(&items)?;
        let w = f.input(w);
        let feats = net.features(&mut f, w)?;
        let mut comps = vec![("fsl", episode_loss(&mut f.g, feats, &ep, cfg.distance)?)];
        if !transforms.is_empty() {
            let base: Vec<Patch> = rm_idx.iter().map(|&i| pool.items[i].clone()).collect();
            let expanded = rm_expand_with(&base, &transforms);
            let refs: Vec<&Patch> = expanded.iter().map(|(p, _)| p).collect();
            let labels: Vec<usize> = expanded.iter().map(|(_, t)| t.id() - 1).collect();
            let (w, _) = patch_batch::<f32>(&refs)?;
            let w = f.input(w);
            let logits = net.rm_logits(&mut f, w)?;
            comps.push(("rm", rm_loss(&mut f.g, logits, &labels)?));
        }
        let (values, grads) = finish(f, comps)?;
        adam.step(&mut store, &grads)?;
        let total = log.step(1, None, e, values)?;
        log::debug!("stage 1 episode {e}: loss {total:.4}");
    }
    log.push(LogRecord::Timing {
        stage: 1,
        run: None,
        train_seconds: start.elapsed().as_secs_f64(),
        test_seconds: 0.0,
    })?;
    Ok(store)
}

/// Stage 2: few-shot episodes and masked reconstruction on source spectra mapped to
/// `target_bands`. Returns `None` when both tasks are disabled.
pub fn pretrain_spectral(
    cfg: &ExperimentConfig,
    ways: usize,
    target_bands: usize,
    pool: &SpectralPool,
    log: &mut RunLog,
) -> Result<Option<ParamStore<f32>>> {
    let sc = &cfg.stage2;
    let ab = cfg.ablation;
    if !ab.spectral_stage_enabled() {
        log.push(LogRecord::Skipped {
            stage: 2,
            reason: "homogeneous few-shot and masked reconstruction both disabled".into(),
        })?;
        return Ok(None);
    }
    if pool.is_empty() {
        bail!(Config, "spectral pool is empty");
    }
    let net = SpectralPretrainNet::new(&cfg.network, pool.bands, target_bands)?;
    let mut store = net.init::<f32>(derive_seed(cfg.base_seed, 2, 0));
    let mut draw = rng(cfg.base_seed, 2, 1);
    let fsl_pool = if ab.hom_fsl {
        let r = pool.classes().restrict(sc.pool_min_exclusive, sc.pool_cap, &mut draw);
        if r.n_classes() < ways {
            bail!(
                Config,
                "{} source classes have more than {} samples, episodes need {ways}",
                r.n_classes(),
                sc.pool_min_exclusive
            );
        }
        Some(r)
    } else {
        None
    };
    let components = [("fsl", ab.hom_fsl), ("mr", ab.mr_ssl)];
    log.push(LogRecord::Plan {
        stage: 2,
        run: None,
        components: components.iter().filter(|c| c.1).map(|c| c.0.to_string()).collect(),
        rm_transforms: Vec::new(),
        sslcl: None,
    })?;
    let mut adam = Adam::new(sc.lr);
    let start = Instant::now();
    for e in 1..=sc.episodes {
        let ep = match &fsl_pool {
            Some(p) => Some(sample_episode(p, ways, sc.shots, sc.queries, &mut draw)?),
            None => None,
        };
        let masked = if ab.mr_ssl {
            let idx = sample(&mut draw, pool.len(), sc.mr_batch.min(pool.len())).into_vec();
            idx.iter()
                .map(|&i| mask_spectrum(pool.spectrum(i), sc.mask_ratio, &mut draw))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut f = Forward::new(&mut store, true, rng(cfg.base_seed, 2, 1000 + e as u64));
        let mut comps = Vec::new();
        if let Some(ep) = &ep {
            let rows: Vec<&[f32]> = ep.support.iter().chain(&ep.query).map(|&(i, _)| pool.spectrum(i)).collect();
            let x = f.input(vector_batch::<f32>(&rows)?);
            let emb = net.embedding(&mut f, x)?;
            comps.push(("fsl", episode_loss(&mut f.g, emb, ep, cfg.distance)?));
        }
        if !masked.is_empty() {
            let orig: Vec<&[f32]> = masked.iter().map(|m| m.original.as_slice()).collect();
            let inp: Vec<&[f32]> = masked.iter().map(|m| m.masked.as_slice()).collect();
            let target = f.input(vector_batch::<f32>(&orig)?);
            let inp = f.input(vector_batch::<f32>(&inp)?);
            let recon = net.reconstruct(&mut f, inp)?;
            comps.push(("mr", mr_loss(&mut f.g, target, recon)?));
        }
        let (values, grads) = finish(f, comps)?;
        adam.step(&mut store, &grads)?;
        let total = log.step(2, None, e, values)?;
        log::debug!("stage 2 episode {e}: loss {total:.4}");
    }
    log.push(LogRecord::Timing {
        stage: 2,
        run: None,
        train_seconds: start.elapsed().as_secs_f64(),
        test_seconds: 0.0,
    })?;
    Ok(Some(store))
}

/// The fused model of a run; its SSLCL dropout comes from the stage-3 settings.
pub fn fused_net(cfg: &ExperimentConfig, bands: usize, n_classes: usize) -> Result<FusedNet> {
    let net_cfg = NetworkConfig {
        dropout_sslcl: cfg.stage3.sslcl_dropout,
        ..cfg.network.clone()
    };
    FusedNet::new(&net_cfg, bands, n_classes)
}

/// Metrics over the test coordinates, with a prediction for every labeled pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Row-major predicted class per pixel; 0 where the ground truth is unlabeled.
    pub predictions: Vec<u16>,
    pub seconds: f64,
}

/// Patches of the labeled originals, class-major in the split's order.
pub fn labeled_patches(target: &TargetData, split: &SplitSpec, size: usize) -> Result<Vec<Patch>> {
    let mut out = Vec::with_capacity(split.labeled_len());
    for (&class, coords) in &split.labeled {
        for &(y, x) in coords {
            let mut p = extract_patch(&target.cube, y, x, size)?;
            p.label = Some(class);
            out.push(p);
        }
    }
    Ok(out)
}

fn embed(net: &FusedNet, store: &mut ParamStore<f32>, patches: &[&Patch]) -> Result<Tensor<f64>> {
    let (w, s) = patch_batch::<f32>(patches)?;
    let mut f = Forward::new(store, false, ChaCha8Rng::seed_from_u64(0));
    let (w, s) = (f.input(w), f.input(s));
    let e = net.embedding(&mut f, w, s)?;
    Ok(f.g.value(e).cast())
}

fn embed_coords(
    net: &FusedNet,
    store: &mut ParamStore<f32>,
    target: &TargetData,
    coords: &[(usize, usize)],
    batch: usize,
) -> Result<Vec<Tensor<f64>>> {
    let size = net.spatial.patch_size;
    let mut out = Vec::new();
    for chunk in coords.chunks(batch) {
        let patches = chunk
            .iter()
            .map(|&(y, x)| extract_patch(&target.cube, y, x, size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Patch> = patches.iter().collect();
        out.push(embed(net, store, &refs)?);
    }
    Ok(out)
}

/// Nearest-prototype classification in inference mode. Prototypes come from the labeled
/// originals only.
pub fn evaluate(
    net: &FusedNet,
    store: &mut ParamStore<f32>,
    target: &TargetData,
    split: &SplitSpec,
    distance: Distance,
    batch: usize,
) -> Result<Evaluation> {
    let start = Instant::now();
    let classes: Vec<u16> = split.labeled.keys().copied().collect();
    let originals = labeled_patches(target, split, net.spatial.patch_size)?;
    let mut labels = Vec::with_capacity(originals.len());
    for (i, &c) in classes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(i, split.labeled[&c].len()));
    }
    let mut proto_feats = Vec::new();
    for chunk in originals.chunks(batch) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        proto_feats.extend_from_slice(embed(net, store, &refs)?.data());
    }
    let d = proto_feats.len() / originals.len();
    let mut g = Graph::<f64>::new();
    let sup = g.constant(Tensor::new(vec![originals.len(), d], proto_feats)?);
    let protos = class_prototypes(&mut g, sup, &labels, classes.len())?;
    let protos = g.value(protos).clone();

    let mut coords: Vec<(usize, usize)> = split.test.iter().map(|&(y, x, _)| (y, x)).collect();
    coords.extend(split.labeled.values().flatten().copied());
    let mut predicted = Vec::with_capacity(coords.len());
    for emb in embed_coords(net, store, target, &coords, batch)? {
        let mut g = Graph::<f64>::new();
        let q = g.constant(emb);
        let p = g.constant(protos.clone());
        let lp = proto_log_probs(&mut g, q, p, distance)?;
        let lp = g.value(lp);
        let (rows, _) = lp.dims2()?;
        for r in 0..rows {
            let row = lp.row(r);
            let best = (0..row.len()).fold(0, |b, m| if row[m] > row[b] { m } else { b });
            predicted.push(classes[best]);
        }
    }
    let n_test = split.test.len();
    let truth: Vec<u16> = split.test.iter().map(|t| t.2).collect();
    let report = compute_metrics(&truth, &predicted[..n_test], target.n_classes())?;
    let mut predictions = vec![0u16; target.gt.labels.len()];
    for (&(y, x), &p) in coords.iter().zip(&predicted) {
        predictions[y * target.gt.width + x] = p;
    }
    Ok(Evaluation {
        report,
        predictions,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of one target run.
pub struct Finetuned {
    pub store: ParamStore<f32>,
    pub best_episode: usize,
    pub best: Evaluation,
    pub final_episode: usize,
    pub final_eval: Evaluation,
    pub train_seconds: f64,
    pub test_seconds: f64,
}

/// Stage 3 for run `run` (seed `base_seed + run`): few-shot episodes over the augmented
/// labeled set plus the two-view consistency task over the originals, with periodic
/// evaluation. Pretrained parameters are loaded from whichever archives are given.
pub fn finetune_target(
    cfg: &ExperimentConfig,
    run: usize,
    target: &TargetData,
    split: &SplitSpec,
    spatial: Option<&ParamStore<f32>>,
    spectral: Option<&ParamStore<f32>>,
    log: &mut RunLog,
) -> Result<Finetuned> {
    let sc = &cfg.stage3;
    let seed = cfg.base_seed.wrapping_add(run as u64);
    let ways = target.n_classes();
    if split.n_classes() != ways {
        bail!(Config, "split has {} classes, target has {ways}", split.n_classes());
    }
    let size = cfg.network.patch_size;
    let net = fused_net(cfg, target.cube.bands, ways)?;
    let mut store = net.init::<f32>(derive_seed(seed, 3, 0));
    let mut loaded = Vec::new();
    if let Some(a) = spatial {
        loaded.extend(transfer(a, &mut store, SPATIAL_TRANSFER, true)?.loaded);
    }
    if let Some(a) = spectral {
        loaded.extend(transfer(a, &mut store, SPECTRAL_TRANSFER, true)?.loaded);
    }
    log.push(LogRecord::Transfer { run, loaded })?;
    let mut components = vec!["fsl".to_string()];
    if cfg.ablation.sslcl != SslclMode::Off {
        components.push("cl".into());
    }
    log.push(LogRecord::Plan {
        stage: 3,
        run: Some(run),
        components,
        rm_transforms: Vec::new(),
        sslcl: Some(cfg.ablation.sslcl),
    })?;

    let aug = augment_labeled_set(split, sc.augmented_per_class, derive_seed(seed, 3, 1))?;
    let entries: Vec<(u16, AugEntry)> =
        aug.per_class.iter().flat_map(|(&c, es)| es.iter().map(move |&e| (c, e))).collect();
    let pool = ClassPool::from_labels(entries.iter().map(|(c, _)| *c as u32));
    let originals = labeled_patches(target, split, size)?;
    let mut draw = rng(seed, 3, 2);
    let mut adam = Adam::new(sc.lr);
    let mut best: Option<(usize, Evaluation)> = None;
    let mut last: Option<(usize, Evaluation)> = None;
    let mut train_seconds = 0.0;
    let mut test_seconds = 0.0;
    for e in 1..=sc.episodes {
        let t0 = Instant::now();
        let ep = sample_episode(&pool, ways, sc.shots, sc.queries, &mut draw)?;
        let patches = ep
            .support
            .iter()
            .chain(&ep.query)
            .map(|&(i, _)| aug.patch(&target.cube, entries[i].0, &entries[i].1, size))
            .collect::<Result<Vec<_>>>()?;
        let views = match cfg.ablation.sslcl {
            SslclMode::Off => None,
            SslclMode::Augment => {
                let a: Vec<Patch> = originals.iter().map(|p| sslcl_augment(p, &mut draw)).collect();
                let b: Vec<Patch> = originals.iter().map(|p| sslcl_augment(p, &mut draw)).collect();
                Some((a, b))
            }
            SslclMode::DropoutOnly => Some((originals.clone(), originals.clone())),
        };
        let mut f = Forward::new(&mut store, true, rng(seed, 3, 1000 + e as u64));
        let refs: Vec<&Patch> = patches.iter().collect();
        let (w, s) = patch_batch::<f32>(&refs)?;
        let (w, s) = (f.input(w), f.input(s));
        let emb = net.embedding(&mut f, w, s)?;
        let mut comps = vec![("fsl", episode_loss(&mut f.g, emb, &ep, cfg.distance)?)];
        if let Some((a, b)) = &views {
            let mut probs = Vec::with_capacity(2);
            for view in [a, b] {
                let refs: Vec<&Patch> = view.iter().collect();
                let (w, s) = patch_batch::<f32>(&refs)?;
                let (w, s) = (f.input(w), f.input(s));
                probs.push(net.sslcl_probs(&mut f, w, s)?);
            }
            comps.push(("cl", sslcl_loss(&mut f.g, probs[0], probs[1])?));
        }
        let (values, grads) = finish(f, comps)?;
        adam.step(&mut store, &grads)?;
        let total = log.step(3, Some(run), e, values)?;
        train_seconds += t0.elapsed().as_secs_f64();
        log::debug!("run {run} episode {e}: loss {total:.4}");
        let cadence = e % sc.eval_every == 0;
        if cadence || e == sc.episodes {
            let ev = evaluate(&net, &mut store, target, split, cfg.distance, sc.eval_batch)?;
            test_seconds += ev.seconds;
            if cadence {
                log.push(LogRecord::Eval {
                    run,
                    episode: e,
                    report: ev.report.clone(),
                })?;
                log::info!("run {run} episode {e}: OA {:.4}", ev.report.oa);
                if best.as_ref().is_none_or(|(_, b)| ev.report.oa > b.report.oa) {
                    best = Some((e, ev.clone()));
                }
            } else {
                log.push(LogRecord::Final {
                    run,
                    episode: e,
                    report: ev.report.clone(),
                })?;
            }
            last = Some((e, ev));
        }
    }
    log.push(LogRecord::Timing {
        stage: 3,
        run: Some(run),
        train_seconds,
        test_seconds,
    })?;
    let (final_episode, final_eval) = last.expect("at least one episode");
    let (best_episode, best) = best.unwrap_or_else(|| (final_episode, final_eval.clone()));
    Ok(Finetuned {
        store,
        best_episode,
        best,
        final_episode,
        final_eval,
        train_seconds,
        test_seconds,
    })
}
