//! Command-line driver: synthetic data, stage training, inference,
//! evaluation and cross-validation, each run leaving a manifest behind.

pub mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ceph_landmark::codec::{save_heatmap_dump, Frame, LandmarkSet};
use ceph_landmark::dataset::{
    load_isbi, parse_landmark_file, preprocess, synth_generate, write_dataset, write_landmark_file, CephDataset, GroundTruth,
};
use ceph_landmark::eval::{crossval, write_errors_csv, write_summary_csv, EvalReport};
use ceph_landmark::pipeline::{
    infer, prepare_dataset, train_global, train_local, EpochStats, InferMode, InferOptions, TrainedStage,
};
use ceph_landmark::unet::UNet;
use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::manifest::Manifest;

pub use manifest::sha256_file;

#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit status 2).
    Config(String),
    /// Failure while running a command (exit status 1).
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<ceph_landmark::Error> for Failure {
    fn from(e: ceph_landmark::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ceph-landmark", version, about = "Two-stage heatmap regression for cephalometric landmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set local.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Run directory; defaults to `<output_dir>/<timestamp>-<config hash>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train the global (whole-image) stage.
    TrainGlobal,
    /// Train the local (patch) stage.
    TrainLocal,
    /// Predict landmarks for the test split.
    Infer {
        /// full, stage1 or no-expand; overrides `infer.mode`.
        #[arg(long)]
        mode: Option<InferMode>,
        #[arg(long)]
        global: Option<PathBuf>,
        #[arg(long)]
        local: Option<PathBuf>,
    },
    /// Score predictions against the test split.
    Eval {
        #[arg(long)]
        mode: Option<InferMode>,
        /// Directory of `<id>.txt` predictions; defaults to `predictions/<mode>`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// K-fold cross-validation over the whole dataset.
    Crossval,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainGlobal => "train-global",
            Command::TrainLocal => "train-local",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Crossval => "crossval",
        }
    }
}

/// Parses the configuration and runs one command; returns the run directory.
pub fn run(cli: &Cli) -> Result<PathBuf, Failure> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let run_dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            Path::new(&cfg.output_dir).join(format!("{stamp}-{}", &cfg.hash()[..8]))
        }
    };
    fs::create_dir_all(&run_dir)?;
    eprintln!("{}: run directory {}", cli.command.name(), run_dir.display());
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &run_dir),
        Command::TrainGlobal => cmd_train(&cfg, &run_dir, Stage::Global),
        Command::TrainLocal => cmd_train(&cfg, &run_dir, Stage::Local),
        Command::Infer { mode, global, local } => {
            let mode = mode.unwrap_or(cfg.infer.mode);
            cmd_infer(&cfg, &run_dir, mode, global.as_deref(), local.as_deref())
        }
        Command::Eval { mode, predictions } => {
            cmd_eval(&cfg, &run_dir, mode.unwrap_or(cfg.infer.mode), predictions.as_deref())
        }
        Command::Crossval => cmd_crossval(&cfg, &run_dir),
    }?;
    Ok(run_dir)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Global,
    Local,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }
}

fn global_seed(cfg: &RunConfig) -> u64 {
    cfg.seed
}

fn local_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

fn load_dataset(cfg: &RunConfig, run_dir: &Path, manifest: &mut Manifest) -> Result<CephDataset, Failure> {
    let root = cfg.dataset_root(run_dir);
    let ds = load_isbi(&root, &cfg.dataset.layout)?;
    let listing = root.join(&cfg.dataset.layout.manifest);
    if listing.is_file() {
        manifest.input(run_dir, &listing)?;
    }
    Ok(ds)
}

fn cmd_synth(cfg: &RunConfig, run_dir: &Path) -> Result<(), Failure> {
    if cfg.synth.num_landmarks != cfg.dataset.layout.num_landmarks {
        return Err(Failure::Config(format!(
            "synth.num_landmarks ({}) must equal dataset.layout.num_landmarks ({})",
            cfg.synth.num_landmarks, cfg.dataset.layout.num_landmarks
        )));
    }
    let root = cfg.dataset_root(run_dir);
    let ds = synth_generate(&cfg.synth)?;
    write_dataset(&ds, &root, &cfg.dataset.layout)?;
    let mut m = Manifest::new("synth", cfg);
    m.seed("synth", cfg.synth.seed);
    m.output(run_dir, &root.join(&cfg.dataset.layout.manifest))?;
    m.write(run_dir, "synth")?;
    eprintln!("synth: wrote {} items to {}", ds.len(), root.display());
    Ok(())
}

fn log_epoch(stage: &'static str, total: usize) -> impl FnMut(&EpochStats) {
    move |s| eprintln!("{stage}: epoch {}/{total} loss {:.4}", s.epoch + 1, s.mean_loss)
}

fn write_loss_log(path: &Path, log: &[EpochStats]) -> Result<(), Failure> {
    let mut out = String::from("epoch,mean_loss,steps\n");
    for s in log {
        out.push_str(&format!("{},{},{}\n", s.epoch, s.mean_loss, s.steps));
    }
    fs::write(path, out)?;
    Ok(())
}

fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    ds: &CephDataset,
    seed: u64,
    truth: GroundTruth,
) -> Result<TrainedStage<f32>, Failure> {
    let (stage_cfg, frame) = match stage {
        Stage::Global => (&cfg.global, Frame::GlobalScaled),
        Stage::Local => (&cfg.local, Frame::LocalScaled),
    };
    let prepared = prepare_dataset(ds, &cfg.preprocess, stage_cfg.scale_factor, frame)?;
    let mut progress = log_epoch(stage.name(), stage_cfg.epochs);
    let trained = match stage {
        Stage::Global => train_global::<f32>(&prepared, stage_cfg, seed, truth, &mut progress)?,
        Stage::Local => train_local::<f32>(&prepared, stage_cfg, seed, truth, &mut progress)?,
    };
    Ok(trained)
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, stage: Stage) -> Result<(), Failure> {
    let name = stage.name();
    let mut m = Manifest::new(&format!("train-{name}"), cfg);
    let ds = load_dataset(cfg, run_dir, &mut m)?.split(cfg.dataset.train_split);
    if ds.is_empty() {
        return Err(Failure::Runtime(format!("split {} is empty", cfg.dataset.train_split)));
    }
    let seed = if stage == Stage::Global { global_seed(cfg) } else { local_seed(cfg) };
    m.seed(name, seed);
    let trained = train_stage(cfg, stage, &ds, seed, cfg.dataset.ground_truth)?;
    let ckpt = run_dir.join(format!("{name}.ckpt"));
    let meta = vec![("stage".to_string(), name.to_string()), ("seed".to_string(), seed.to_string())];
    trained.model.save(&ckpt, Some(&trained.optimizer), &meta)?;
    let log = run_dir.join(format!("{name}_loss.csv"));
    write_loss_log(&log, &trained.log)?;
    m.output(run_dir, &ckpt)?;
    m.output(run_dir, &log)?;
    m.write(run_dir, &format!("train-{name}"))?;
    Ok(())
}

fn load_model(path: &Path, stage: &str) -> Result<UNet<f32>, Failure> {
    if !path.is_file() {
        return Err(Failure::Runtime(format!("{stage} checkpoint {} not found", path.display())));
    }
    Ok(UNet::load(path)?.0)
}

fn predictions_dir(run_dir: &Path, mode: InferMode) -> PathBuf {
    run_dir.join("predictions").join(mode.to_string())
}

fn cmd_infer(
    cfg: &RunConfig,
    run_dir: &Path,
    mode: InferMode,
    global: Option<&Path>,
    local: Option<&Path>,
) -> Result<(), Failure> {
    let mut m = Manifest::new(&format!("infer-{mode}"), cfg);
    let g_path = global.map_or_else(|| run_dir.join("global.ckpt"), Path::to_path_buf);
    let l_path = local.map_or_else(|| run_dir.join("local.ckpt"), Path::to_path_buf);
    let g_model = load_model(&g_path, "global")?;
    let l_model = load_model(&l_path, "local")?;
    m.input(run_dir, &g_path)?;
    m.input(run_dir, &l_path)?;
    let ds = load_dataset(cfg, run_dir, &mut m)?.split(cfg.dataset.test_split);
    let opts = InferOptions { mode, merge_all_channels: cfg.infer.merge_all_channels, keep_heatmaps: cfg.infer.dump_heatmaps };
    let out_dir = predictions_dir(run_dir, mode);
    let hm_dir = run_dir.join("heatmaps").join(mode.to_string());
    fs::create_dir_all(&out_dir)?;
    for item in &ds.items {
        let cropped = preprocess(item, &cfg.preprocess)?;
        let r = infer(&cropped, &g_model, &l_model, &cfg.global, &cfg.local, &cfg.preprocess, &opts)?;
        for w in &r.warnings {
            eprintln!("infer: warning: {w}");
        }
        let path = out_dir.join(format!("{}.txt", item.id));
        write_landmark_file(&path, &r.landmarks)?;
        m.output(run_dir, &path)?;
        for (tag, stack) in [("global", &r.global_heatmaps), ("merged", &r.merged_heatmaps)] {
            if let Some(s) = stack {
                let p = hm_dir.join(format!("{}.{tag}.hmap", item.id));
                fs::create_dir_all(&hm_dir)?;
                save_heatmap_dump(s, &p)?;
                m.output(run_dir, &p)?;
            }
        }
    }
    m.write(run_dir, &format!("infer-{mode}"))?;
    eprintln!("infer: {} predictions in {}", ds.len(), out_dir.display());
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    let sdr: Vec<String> = r.thresholds.iter().zip(&r.sdr).map(|(t, s)| format!("{t}mm {s:.2}%")).collect();
    println!("{label}: MRE {:.4} +- {:.4} mm, SDR {}, invalid {}", r.mre, r.std, sdr.join(" "), r.invalid);
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, mode: InferMode, predictions: Option<&Path>) -> Result<(), Failure> {
    let mut m = Manifest::new(&format!("eval-{mode}"), cfg);
    let ds = load_dataset(cfg, run_dir, &mut m)?.split(cfg.dataset.test_split);
    if ds.is_empty() {
        return Err(Failure::Runtime(format!("split {} is empty", cfg.dataset.test_split)));
    }
    let dir = predictions.map_or_else(|| predictions_dir(run_dir, mode), Path::to_path_buf);
    let mut scored: Vec<(String, LandmarkSet, LandmarkSet)> = Vec::with_capacity(ds.len());
    for item in &ds.items {
        let path = dir.join(format!("{}.txt", item.id));
        if !path.is_file() {
            return Err(Failure::Runtime(format!("prediction {} not found", path.display())));
        }
        m.input(run_dir, &path)?;
        let pred = parse_landmark_file(&path, ds.num_landmarks, Frame::Raw)?;
        scored.push((item.id.clone(), pred, item.ground_truth(cfg.dataset.ground_truth)?));
    }
    let spacing = cfg.eval.pixel_spacing.unwrap_or(ds.pixel_spacing);
    let report = EvalReport::evaluate(scored.iter().map(|(i, p, g)| (i.as_str(), p, g)), spacing, &cfg.eval.thresholds)?;
    let out = run_dir.join("reports").join(mode.to_string());
    let label = mode.to_string();
    write_summary_csv(&out.join("summary.csv"), &[(label.as_str(), &report)])?;
    write_errors_csv(&out.join("errors.csv"), &report)?;
    m.output(run_dir, &out.join("summary.csv"))?;
    m.output(run_dir, &out.join("errors.csv"))?;
    m.write(run_dir, &format!("eval-{mode}"))?;
    print_report(&label, &report);
    Ok(())
}

fn cmd_crossval(cfg: &RunConfig, run_dir: &Path) -> Result<(), Failure> {
    let mut m = Manifest::new("crossval", cfg);
    let ds = load_dataset(cfg, run_dir, &mut m)?;
    let shuffle_seed = cfg.seed.wrapping_add(2);
    m.seed("fold_shuffle", shuffle_seed);
    for f in 0..cfg.crossval.folds as u64 {
        m.seed(&format!("fold{f}.global"), cfg.seed.wrapping_add(100 * (f + 1)));
        m.seed(&format!("fold{f}.local"), cfg.seed.wrapping_add(100 * (f + 1) + 1));
    }
    let opts = InferOptions { mode: InferMode::Full, merge_all_channels: cfg.infer.merge_all_channels, keep_heatmaps: false };
    let report = crossval(
        &ds,
        cfg.crossval.folds,
        shuffle_seed,
        &cfg.eval.thresholds,
        |f, train| {
            eprintln!("crossval: fold {} of {} ({} training items)", f + 1, cfg.crossval.folds, train.len());
            let base = cfg.seed.wrapping_add(100 * (f as u64 + 1));
            let g = train_stage(cfg, Stage::Global, train, base, GroundTruth::Senior).map_err(to_core)?;
            let l = train_stage(cfg, Stage::Local, train, base.wrapping_add(1), GroundTruth::Senior).map_err(to_core)?;
            Ok((g.model, l.model))
        },
        |(g, l): &(UNet<f32>, UNet<f32>), item| {
            let cropped = preprocess(item, &cfg.preprocess)?;
            Ok(infer(&cropped, g, l, &cfg.global, &cfg.local, &cfg.preprocess, &opts)?.landmarks)
        },
    )?;
    let out = run_dir.join("crossval");
    let labels: Vec<String> = (0..report.fold_reports.len()).map(|f| format!("fold{f}")).collect();
    let mut rows: Vec<(&str, &EvalReport)> = labels.iter().map(String::as_str).zip(&report.fold_reports).collect();
    rows.push(("pooled", &report.pooled));
    write_summary_csv(&out.join("summary.csv"), &rows)?;
    write_errors_csv(&out.join("errors.csv"), &report.pooled)?;
    let mut folds = String::from("item_id,fold\n");
    for (f, ids) in report.folds.iter().enumerate() {
        for id in ids {
            folds.push_str(&format!("{id},{f}\n"));
        }
    }
    fs::write(out.join("folds.csv"), folds)?;
    for name in ["summary.csv", "errors.csv", "folds.csv"] {
        m.output(run_dir, &out.join(name))?;
    }
    m.write(run_dir, "crossval")?;
    for (label, r) in &rows {
        print_report(label, r);
    }
    Ok(())
}

fn to_core(f: Failure) -> ceph_landmark::Error {
    match f {
        Failure::Config(m) | Failure::Runtime(m) => ceph_landmark::Error::InvalidArgument(m),
    }
}
