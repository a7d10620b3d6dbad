//! Command-line orchestration: config-driven pipelines, sweeps and reports.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure.

pub mod config;
pub mod pipeline;
pub mod plots;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{ExperimentConfig, SCHEMA_VERSION, SCRATCH};
pub use pipeline::{run_experiment, sweep_pretrain_size, RunOptions, SweepReport};
pub use plots::emit_plots;
pub use report::BenchmarkReport;

use crate::cka::{default_taps, layerwise_cka, CkaScheme};
use crate::finetune::{sliding_window_infer, SegTask, Segmentor, Shots};
use crate::nn::IndexCache;
use crate::params::Checkpoint;
use crate::phantom::{io, DatasetManifest, IntensityPolicy, Modality, Split};
use crate::pretext::Method;

pub const OUT_ENV: &str = "SSLBENCH_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed{}: {msg}", seed.map(|s| format!(" (seed {s})")).unwrap_or_default())]
    Stage { stage: String, seed: Option<u64>, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sslbench", version, about = "Self-supervised pretext-task benchmark for volumetric segmentation")]
pub struct Cli {
    /// Experiment config (JSON); the desk benchmark when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Replace the config's seed list with this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continue a run found in the output directory.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Parallel jobs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    match s {
        "A" | "a" => Ok(Modality::A),
        "B" | "b" => Ok(Modality::B),
        _ => Err(format!("unknown modality {s:?} (A or B)")),
    }
}

fn parse_task(s: &str) -> Result<SegTask, String> {
    match s {
        "organs" => Ok(SegTask::Organs),
        "tumor" => Ok(SegTask::Tumor),
        _ => Err(format!("unknown task {s:?} (organs or tumor)")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: crate::pretext::PretextError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom set of a config.
    Phantom,
    /// Pretrain one method (every config seed unless --seed).
    Pretrain {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Fine-tune one model ("scratch" or a method) in one cell.
    Finetune {
        #[arg(long)]
        model: String,
        #[arg(long, value_parser = parse_task, default_value = "organs")]
        task: SegTask,
        #[arg(long, value_parser = parse_modality, default_value = "A")]
        modality: Modality,
        /// Defaults to the smallest configured shot count.
        #[arg(long)]
        shots: Option<Shots>,
    },
    /// Segment one volume with a fine-tuned checkpoint; --out is the label file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Layerwise CKA between the encoders of two checkpoints.
    Cka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Phantom directory holding manifest.json.
        #[arg(long)]
        probes: PathBuf,
        /// Comma-separated taps; every tap when omitted.
        #[arg(long, value_delimiter = ',')]
        taps: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
    /// Rebuild report.json and the plots from a finished run.
    Report,
    /// The full pipeline.
    Run,
    /// Pretraining-set size sweep.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out.clone()))
            .ok_or_else(|| CliError::Config(format!("no output directory: pass --out or set {OUT_ENV}")))
    }

    fn options(&self, cfg: &ExperimentConfig) -> Result<RunOptions, CliError> {
        Ok(RunOptions { out: self.out_dir(Some(cfg))?, resume: self.resume, jobs: self.jobs.max(1), existing_only: false })
    }
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Phantom => {
            let cfg = cli.experiment()?;
            let opts = cli.options(&cfg)?;
            let data = pipeline::data_stage(&cfg, &opts)?;
            println!("{} phantoms in {}", data.manifest.entries.len(), data.dir.display());
        }
        Command::Pretrain { method } => {
            let cfg = cli.experiment()?;
            let opts = cli.options(&cfg)?;
            let data = pipeline::data_stage(&cfg, &opts)?;
            for &seed in &cfg.seeds {
                let dir = pipeline::pretrain_dir(&opts.out, *method, seed);
                let s = pipeline::pretrain_stage(&cfg, &data, *method, seed, data.pretrain.len(), &dir, false)?;
                println!("{} seed {}: loss {:.5} -> {:.5}", s.method, s.seed, s.first_loss, s.final_loss);
            }
        }
        Command::Finetune { model, task, modality, shots } => {
            let cfg = cli.experiment()?;
            let opts = cli.options(&cfg)?;
            if model != SCRATCH && parse_method(model).is_err() {
                return Err(CliError::Config(format!("unknown model {model:?}")));
            }
            if !cfg.tasks.contains(task) || !cfg.dataset.modalities.contains(modality) {
                return Err(CliError::Config(format!("{task} on modality {modality} is not part of the config")));
            }
            let data = pipeline::data_stage(&cfg, &opts)?;
            let shots = shots.unwrap_or(cfg.shots[0]);
            for &seed in &cfg.seeds {
                let key = pipeline::JobKey { model: model.clone(), task: *task, modality: *modality, shots, seed };
                let ckpt = if model == SCRATCH {
                    None
                } else {
                    let m = parse_method(model).map_err(CliError::Config)?;
                    let dir = pipeline::pretrain_dir(&opts.out, m, seed);
                    pipeline::pretrain_stage(&cfg, &data, m, seed, data.pretrain.len(), &dir, false)?;
                    Some(dir.join("encoder.ckpt"))
                };
                let r = pipeline::finetune_stage(&cfg, &data, &key, ckpt.as_deref(), &key.dir(&opts.out.join("finetune")), false)?;
                println!("{model} {task} {modality} {shots} seed {seed}: test DSC {:.4}", r.mean_dsc);
            }
        }
        Command::Infer { checkpoint, volume, overlap } => {
            let out = cli.out_dir(None)?;
            let stage = |e: &dyn std::fmt::Display| CliError::Stage { stage: "infer".into(), seed: None, msg: e.to_string() };
            let ckpt = Checkpoint::load(checkpoint).map_err(|e| stage(&e))?;
            let seg = Segmentor::from_checkpoint(&ckpt).map_err(|e| stage(&e))?;
            let v = io::read_volume(volume).map_err(|e| stage(&e))?;
            let v = IntensityPolicy::default_for(v.modality()).apply(&v).map_err(|e| stage(&e))?;
            let names = if seg.cfg.num_classes == 2 { SegTask::Tumor.class_names() } else { SegTask::Organs.class_names() };
            let labels = sliding_window_infer(&seg, &IndexCache::default(), &v, *overlap, names).map_err(|e| stage(&e))?;
            io::write_labels(&out, &labels, v.id()).map_err(|e| stage(&e))?;
            println!("wrote {}", out.display());
        }
        Command::Cka { a, b, probes, taps, count } => {
            let out = cli.out_dir(None)?;
            let stage = |e: &dyn std::fmt::Display| CliError::Stage { stage: "cka".into(), seed: None, msg: e.to_string() };
            let ca = Checkpoint::load(a).map_err(|e| stage(&e))?;
            let cb = Checkpoint::load(b).map_err(|e| stage(&e))?;
            if ca.manifest.config_hash != cb.manifest.config_hash {
                return Err(CliError::Config(format!("encoder configs differ: {} vs {}", ca.manifest.config_hash, cb.manifest.config_hash)));
            }
            let enc: crate::encoder::EncoderConfig = serde_json::from_value(ca.manifest.encoder_config.clone()).map_err(|e| stage(&e))?;
            let manifest = DatasetManifest::load(probes).map_err(|e| stage(&e))?;
            let mut vols = Vec::new();
            for e in manifest.entries.iter().filter(|e| e.split == Split::Test).take(*count) {
                let v = manifest.load_volume(probes, e).map_err(|x| stage(&x))?;
                let v = IntensityPolicy::default_for(v.modality()).apply(&v).map_err(|x| stage(&x))?;
                if (0..3).any(|a| v.shape()[a] < enc.input_shape[a]) {
                    return Err(CliError::Config(format!("probe shape {:?} is smaller than the encoder input {:?}", v.shape(), enc.input_shape)));
                }
                vols.push((e.id.clone(), pipeline::center_crop(v.voxels(), v.shape(), enc.input_shape)));
            }
            let refs: Vec<(&str, &[f64])> = vols.iter().map(|(i, v)| (i.as_str(), v.as_slice())).collect();
            let taps = if taps.is_empty() { default_taps(&enc) } else { taps.clone() };
            let prefix = format!("{}.", crate::encoder::PREFIX);
            let m = layerwise_cka(&enc, &ca.params.with_prefix(&prefix), &cb.params.with_prefix(&prefix), &refs, &taps, CkaScheme::Full).map_err(|e| stage(&e))?;
            std::fs::create_dir_all(&out).map_err(|e| stage(&e))?;
            std::fs::write(out.join("cka.csv"), m.to_csv()).map_err(|e| stage(&e))?;
            m.render_heatmap(&out.join("cka.svg"), "Layerwise CKA").map_err(|e| stage(&e))?;
            println!("profile {:?}", m.diagonal());
        }
        Command::Report => {
            let cfg = cli.experiment()?;
            let opts = RunOptions { existing_only: true, ..cli.options(&cfg)? };
            let r = run_experiment(&cfg, &opts)?;
            println!("report with {} rows in {}", r.rows.len(), opts.out.display());
        }
        Command::Run => {
            let cfg = cli.experiment()?;
            let opts = cli.options(&cfg)?;
            let r = run_experiment(&cfg, &opts)?;
            println!("report with {} rows in {}", r.rows.len(), opts.out.display());
        }
        Command::Sweep { sizes } => {
            let cfg = cli.experiment()?;
            let opts = cli.options(&cfg)?;
            let r = sweep_pretrain_size(&cfg, sizes, &opts)?;
            for p in &r.points {
                println!("size {} {} {}: DSC {:.4} ± {:.4}", p.size, p.task, p.modality, p.mean, p.std);
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
