//! Command-line driver. Any `--key value` not recognized as a flag is a config override,
//! with dotted keys addressing nested fields (`--stage3.episodes 200`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use hsifsl_core::config::ExperimentConfig;
use hsifsl_core::data::{
    augment_labeled_set, import_cube, import_gt, normalize_cube, subsample_classes, write_cube, write_gt,
    CubeDescriptor, GtDescriptor, SplitSpec,
};
use hsifsl_core::metrics::{default_palette, render_map, render_table, save_png};
use hsifsl_core::network::checkpoint::{checkpoint_base, load_checkpoint, manifest_path, save_checkpoint, transfer};
use hsifsl_core::pipeline::{
    derive_seed, evaluate, finetune_target, fused_net, pretrain_spatial, pretrain_spectral, run_experiment, run_split,
    LogRecord, OutputLayout, RunLog, Sources,
};

#[derive(Parser)]
#[command(name = "hsifsl", version, about = "Staged few-shot hyperspectral classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; unset keys take the target's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (same as `--base_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (same as `--out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only warnings and errors on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw cube and label map into canonical normalized files under the output directory.
    Import {
        #[arg(long)]
        cube: PathBuf,
        /// JSON cube descriptor: name, height, width, bands, dtype, order.
        #[arg(long)]
        cube_desc: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON label descriptor: name, height, width, n_classes, dtype.
        #[arg(long)]
        gt_desc: PathBuf,
        /// Keep this fraction of each class's labeled pixels.
        #[arg(long)]
        subsample: Option<f64>,
    },
    /// Write the labeled/test split and augmented-set manifest of every run.
    MakeSplits,
    /// Stage 1 on the heterogeneous image pool.
    PretrainSpatial,
    /// Stage 2 on the homogeneous source cube.
    PretrainSpectral,
    /// Stage 3 for one run, loading the stage-1/2 checkpoints found under the output directory.
    Finetune {
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Stage-1 checkpoint (default: `<out>/stage1/spatial` if present).
        #[arg(long)]
        spatial: Option<PathBuf>,
        /// Stage-2 checkpoint (default: `<out>/stage2/spectral` if present).
        #[arg(long)]
        spectral: Option<PathBuf>,
    },
    /// Score a fused-model checkpoint on a split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Split file (default: `<out>/run<run>/split.json`, or a fresh split).
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// All stages for every run, with aggregation.
    Run,
}

/// Separate `--key value` config overrides from arguments clap knows about.
fn split_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let cmd = Cli::command();
    let mut known: BTreeSet<String> = ["help", "version"].map(String::from).into();
    let args = cmd.get_arguments().chain(cmd.get_subcommands().flat_map(|s| s.get_arguments()));
    known.extend(args.filter_map(|a| a.get_long().map(String::from)));

    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--").filter(|f| !f.is_empty()) else {
            kept.push(tok);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if known.contains(&name) {
            kept.push(tok);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => bail!("--{name}: missing value"),
        };
        overrides.push((name, value));
    }
    Ok((kept, overrides))
}

fn resolve_config(global: &Global, mut overrides: Vec<(String, String)>) -> Result<ExperimentConfig> {
    if let Some(s) = global.seed {
        overrides.push(("base_seed".into(), s.to_string()));
    }
    if let Some(o) = &global.out {
        overrides.push(("out_dir".into(), Value::String(o.to_string_lossy().into()).to_string()));
    }
    let cfg = match &global.config {
        Some(p) => ExperimentConfig::from_file(p, &overrides),
        None => ExperimentConfig::resolve(json!({}), &overrides),
    };
    Ok(cfg?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Explicit checkpoint, else the default location when its manifest exists.
fn pick_checkpoint(explicit: Option<&Path>, default: PathBuf) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(checkpoint_base(p)),
        None => manifest_path(&default).exists().then_some(default),
    }
}

fn split_for(layout: &OutputLayout, cfg: &ExperimentConfig, src: &Sources, run: usize) -> Result<SplitSpec> {
    let path = layout.split(run);
    Ok(if path.exists() {
        SplitSpec::read(&path)?
    } else {
        run_split(cfg, &src.target, run)?
    })
}

fn execute(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let cfg = resolve_config(&cli.global, overrides)?;
    let layout = OutputLayout::new(&cfg.out_dir);
    if !matches!(cli.command, Command::Import { .. }) {
        fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
        fs::write(layout.config(), cfg.to_json()).with_context(|| format!("writing {}", layout.config().display()))?;
    }
    match cli.command {
        Command::Import {
            cube,
            cube_desc,
            gt,
            gt_desc,
            subsample,
        } => {
            let cd: CubeDescriptor = read_json(&cube_desc)?;
            let gd: GtDescriptor = read_json(&gt_desc)?;
            let mut c = import_cube(&cube, &cd)?;
            if !c.normalized {
                c = normalize_cube(&c);
            }
            let mut g = import_gt(&gt, &gd)?;
            if let Some(f) = subsample {
                g = subsample_classes(&g, f, cfg.base_seed)?;
            }
            println!("{}", write_cube(&c, &layout.root)?.display());
            println!("{}", write_gt(&g, &layout.root)?.display());
        }
        Command::MakeSplits => {
            let src = Sources::load(&cfg)?;
            for run in 0..cfg.n_runs {
                let split = run_split(&cfg, &src.target, run)?;
                split.write(&layout.split(run))?;
                let seed = cfg.base_seed.wrapping_add(run as u64);
                let aug = augment_labeled_set(&split, cfg.stage3.augmented_per_class, derive_seed(seed, 3, 1))?;
                let path = layout.split(run).with_file_name("augmented.json");
                write_json(&path, &aug)?;
                println!("{}", layout.split(run).display());
            }
        }
        Command::PretrainSpatial => {
            let src = Sources::load(&cfg)?;
            let Some(pool) = &src.images else {
                bail!("data.hetero_pool is required for pretrain-spatial");
            };
            let mut log = RunLog::to_file(&layout.root.join("stage1").join("log.jsonl"))?;
            let store = pretrain_spatial(&cfg, src.target.n_classes(), pool, src.backbone.as_ref(), &mut log)?;
            let (path, _) = save_checkpoint(&store, &layout.stage1())?;
            log.push(LogRecord::Checkpoint { stage: 1, run: None, path: path.clone() })?;
            println!("{}", path.display());
        }
        Command::PretrainSpectral => {
            let src = Sources::load(&cfg)?;
            let Some(pool) = &src.spectra else {
                bail!("data.homo_cube and data.homo_gt are required for pretrain-spectral");
            };
            let mut log = RunLog::to_file(&layout.root.join("stage2").join("log.jsonl"))?;
            let bands = src.target.cube.bands;
            match pretrain_spectral(&cfg, src.target.n_classes(), bands, pool, &mut log)? {
                Some(store) => {
                    let (path, _) = save_checkpoint(&store, &layout.stage2())?;
                    log.push(LogRecord::Checkpoint { stage: 2, run: None, path: path.clone() })?;
                    println!("{}", path.display());
                }
                None => println!("stage 2 disabled by the ablation flags"),
            }
        }
        Command::Finetune { run, spatial, spectral } => {
            let src = Sources::load(&cfg)?;
            let split = split_for(&layout, &cfg, &src, run)?;
            split.write(&layout.split(run))?;
            let spatial = pick_checkpoint(spatial.as_deref(), layout.stage1()).map(|p| load_checkpoint(&p)).transpose()?;
            let spectral = pick_checkpoint(spectral.as_deref(), layout.stage2()).map(|p| load_checkpoint(&p)).transpose()?;
            let dir = layout.split(run).with_file_name("");
            let mut log = RunLog::to_file(&dir.join("log.jsonl"))?;
            let ft = finetune_target(&cfg, run, &src.target, &split, spatial.as_ref(), spectral.as_ref(), &mut log)?;
            let (path, _) = save_checkpoint(&ft.store, &layout.stage3(run))?;
            log.push(LogRecord::Checkpoint { stage: 3, run: Some(run), path: path.clone() })?;
            write_json(
                &dir.join("report.json"),
                &json!({
                    "best_episode": ft.best_episode,
                    "best": ft.best.report,
                    "final_episode": ft.final_episode,
                    "final": ft.final_eval.report,
                }),
            )?;
            println!("{}", path.display());
            println!("best OA {:.4} at episode {}", ft.best.report.oa, ft.best_episode);
        }
        Command::Evaluate { model, split, run } => {
            let src = Sources::load(&cfg)?;
            let split = match split {
                Some(p) => SplitSpec::read(&p)?,
                None => split_for(&layout, &cfg, &src, run)?,
            };
            let net = fused_net(&cfg, src.target.cube.bands, src.target.n_classes())?;
            let mut store = net.init::<f32>(0);
            let archive = load_checkpoint(&checkpoint_base(&model))?;
            let report = transfer(&archive, &mut store, &[""], true)?;
            if !report.unused_in_archive.is_empty() {
                bail!("{}: not a fused model for this config (e.g. {})", model.display(), report.unused_in_archive[0]);
            }
            let ev = evaluate(&net, &mut store, &src.target, &split, cfg.distance, cfg.stage3.eval_batch)?;
            let dir = layout.root.join("eval");
            write_json(&dir.join("metrics.json"), &ev.report)?;
            let img = render_map(&src.target.gt, &ev.predictions, &default_palette(src.target.gt.n_classes))?;
            fs::create_dir_all(&dir)?;
            save_png(&img, &dir.join("map.png"))?;
            println!("OA {:.4}  AA {:.4}  Kappa {:.4}", ev.report.oa, ev.report.aa, ev.report.kappa);
        }
        Command::Run => {
            let src = Sources::load(&cfg)?;
            let exp = run_experiment(&cfg, &src, Some(&layout.root))?;
            print!("{}", render_table(&exp.report.best, None));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (kept, overrides) = match split_overrides(argv) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(kept);
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
