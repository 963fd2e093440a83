//! The three training stages and the multi-run experiment driver.
//!
//! Stages 1 and 2 run once and are shared by every run; stage 3 runs once per seed
//! (`base_seed + run`) with its own split.

mod log;
mod sources;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use self::log::{read_log, LogRecord, RunLog};
pub use sources::{ImagePool, SpectralPool, TargetData};
pub use stages::{
    derive_seed, episode_loss, evaluate, finetune_target, fused_net, labeled_patches, pretrain_spatial,
    pretrain_spectral, Evaluation, Finetuned,
};

use crate::config::ExperimentConfig;
use crate::data::{make_split, SplitSpec};
use crate::error::{bail, Error, Result};
use crate::metrics::{aggregate_runs, default_palette, render_map, render_table, save_png, AggregateReport, MetricsReport};
use crate::network::checkpoint::{checkpoint_base, load_checkpoint, save_checkpoint, write_atomic};
use crate::params::ParamStore;

/// Everything an experiment reads from disk.
pub struct Sources {
    pub target: TargetData,
    pub images: Option<ImagePool>,
    pub spectra: Option<SpectralPool>,
    pub backbone: Option<ParamStore<f32>>,
}

impl Sources {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let paths = cfg.validate_paths()?;
        let (cube, gt) = ExperimentConfig::require_target(&paths)?;
        let spectra = match (&paths.homo_cube, &paths.homo_gt) {
            (Some(c), Some(g)) => Some(SpectralPool::load(c, g)?),
            (None, None) => None,
            (Some(_), None) => bail!(Config, "data.homo_gt is required with data.homo_cube"),
            (None, Some(_)) => bail!(Config, "data.homo_cube is required with data.homo_gt"),
        };
        Ok(Self {
            target: TargetData::load(&cube, &gt)?,
            images: paths
                .hetero_pool
                .as_deref()
                .map(|d| ImagePool::load_dir(d, cfg.network.patch_size))
                .transpose()?,
            spectra,
            backbone: paths
                .backbone_weights
                .as_deref()
                .map(|p| load_checkpoint(&checkpoint_base(p)))
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub best_episode: usize,
    pub best: MetricsReport,
    pub final_episode: usize,
    #[serde(rename = "final")]
    pub final_report: MetricsReport,
    pub train_seconds: f64,
    pub test_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Aggregate of each run's best evaluation.
    pub best: AggregateReport,
    /// Aggregate of each run's last evaluation.
    #[serde(rename = "final")]
    pub final_agg: AggregateReport,
    pub runs: Vec<RunSummary>,
    pub stage1_seconds: Option<f64>,
    pub stage2_seconds: Option<f64>,
}

pub struct Experiment {
    pub report: ExperimentReport,
    pub log: RunLog,
    /// Per-pixel predictions of run 0 at its best evaluation.
    pub map: Vec<u16>,
}

/// Files an experiment writes under its output directory.
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1").join("spatial")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2").join("spectral")
    }
    pub fn split(&self, run: usize) -> PathBuf {
        self.root.join(format!("run{run}")).join("split.json")
    }
    pub fn stage3(&self, run: usize) -> PathBuf {
        self.root.join(format!("run{run}")).join("fused")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn map(&self) -> PathBuf {
        self.root.join("map.png")
    }
}

fn timing(log: &RunLog, stage: u8) -> Option<f64> {
    log.records.iter().find_map(|r| match r {
        LogRecord::Timing {
            stage: s,
            run: None,
            train_seconds,
            ..
        } if *s == stage => Some(*train_seconds),
        _ => None,
    })
}

/// Split of run `run`: seeded by `base_seed + run`.
pub fn run_split(cfg: &ExperimentConfig, target: &TargetData, run: usize) -> Result<SplitSpec> {
    make_split(&target.gt, cfg.k0, cfg.subsample_fraction, cfg.base_seed.wrapping_add(run as u64))
}

/// Stages 1 and 2 once, then stage 3 and evaluation for each of `cfg.n_runs` seeds.
/// With `out`, the log is streamed to disk as it grows, so a failed run leaves the
/// records up to the failure.
pub fn run_experiment(cfg: &ExperimentConfig, src: &Sources, out: Option<&Path>) -> Result<Experiment> {
    cfg.check()?;
    let layout = out.map(OutputLayout::new);
    let mut log = match &layout {
        Some(l) => {
            fs::create_dir_all(&l.root).map_err(|e| Error::io(&l.root, e))?;
            write_atomic(&l.config(), cfg.to_json().as_bytes())?;
            RunLog::to_file(&l.log())?
        }
        None => RunLog::new(),
    };
    let ways = src.target.n_classes();
    let bands = src.target.cube.bands;

    let spatial = match &src.images {
        Some(pool) => {
            let store = pretrain_spatial(cfg, ways, pool, src.backbone.as_ref(), &mut log)?;
            if let Some(l) = &layout {
                let (path, _) = save_checkpoint(&store, &l.stage1())?;
                log.push(LogRecord::Checkpoint { stage: 1, run: None, path })?;
            }
            Some(store)
        }
        None => {
            log.push(LogRecord::Skipped {
                stage: 1,
                reason: "no heterogeneous image pool".into(),
            })?;
            None
        }
    };
    let spectral = match &src.spectra {
        Some(pool) => {
            let store = pretrain_spectral(cfg, ways, bands, pool, &mut log)?;
            if let (Some(l), Some(s)) = (&layout, &store) {
                let (path, _) = save_checkpoint(s, &l.stage2())?;
                log.push(LogRecord::Checkpoint { stage: 2, run: None, path })?;
            }
            store
        }
        None => {
            log.push(LogRecord::Skipped {
                stage: 2,
                reason: "no homogeneous source cube".into(),
            })?;
            None
        }
    };

    let mut runs = Vec::with_capacity(cfg.n_runs);
    let mut map = Vec::new();
    for run in 0..cfg.n_runs {
        let split = run_split(cfg, &src.target, run)?;
        if let Some(l) = &layout {
            split.write(&l.split(run))?;
        }
        let ft = finetune_target(cfg, run, &src.target, &split, spatial.as_ref(), spectral.as_ref(), &mut log)?;
        if let Some(l) = &layout {
            let (path, _) = save_checkpoint(&ft.store, &l.stage3(run))?;
            log.push(LogRecord::Checkpoint { stage: 3, run: Some(run), path })?;
        }
        ::log::info!("run {run}: best OA {:.4} at episode {}", ft.best.report.oa, ft.best_episode);
        if run == 0 {
            map = ft.best.predictions.clone();
        }
        runs.push(RunSummary {
            run,
            seed: cfg.base_seed.wrapping_add(run as u64),
            best_episode: ft.best_episode,
            best: ft.best.report,
            final_episode: ft.final_episode,
            final_report: ft.final_eval.report,
            train_seconds: ft.train_seconds,
            test_seconds: ft.test_seconds,
        });
    }
    let best: Vec<MetricsReport> = runs.iter().map(|r| r.best.clone()).collect();
    let last: Vec<MetricsReport> = runs.iter().map(|r| r.final_report.clone()).collect();
    let report = ExperimentReport {
        best: aggregate_runs(&best)?,
        final_agg: aggregate_runs(&last)?,
        runs,
        stage1_seconds: timing(&log, 1),
        stage2_seconds: timing(&log, 2),
    };
    if let Some(l) = &layout {
        let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::json(&l.report_json(), e))?;
        write_atomic(&l.report_json(), &json)?;
        write_atomic(&l.report_txt(), render_table(&report.best, None).as_bytes())?;
        let img = render_map(&src.target.gt, &map, &default_palette(src.target.gt.n_classes))?;
        save_png(&img, &l.map())?;
    }
    Ok(Experiment { report, log, map })
}
