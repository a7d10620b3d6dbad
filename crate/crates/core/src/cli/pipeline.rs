use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SCRATCH};
use super::report::{assemble_report, BenchmarkReport};
use super::CliError;
use crate::cka::{default_taps, layerwise_cka, CkaMatrix, CkaScheme};
use crate::encoder::{self, EncoderConfig};
use crate::finetune::{
    build_segmentor_with, extract, encoder_checkpoint, finetune, sliding_window_infer, Sample, SegTask, Segmentor, SegmentorConfig, Shots,
    TrainRunRecord,
};
use crate::metrics::{dice_report, mean_report, DiceReport};
use crate::nn::{Grid, IndexCache};
use crate::params::{config_hash, Checkpoint, ParameterSet};
use crate::phantom::{build_manifest, DatasetManifest, IntensityPolicy, Modality, Split};
use crate::pretext::train::{pretrain, write_loss_csv};
use crate::pretext::Method;
use crate::rng::substream;

const STAGE_FILE: &str = "stage.json";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Continue in a directory that already holds a run.
    pub resume: bool,
    /// Worker threads for independent jobs.
    pub jobs: usize,
    /// Fail instead of computing a missing stage.
    pub existing_only: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), resume: false, jobs: 1, existing_only: false }
    }
}

#[derive(Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    inputs: String,
}

fn stage_err(stage: &str, seed: Option<u64>, e: impl std::fmt::Display) -> CliError {
    CliError::Stage { stage: stage.to_string(), seed, msg: e.to_string() }
}

fn io_err(stage: &str, seed: Option<u64>) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| stage_err(stage, seed, e)
}

/// True when `dir` holds a finished stage with the same inputs and every output.
fn stage_done(dir: &Path, inputs: &str, outputs: &[&str]) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(STAGE_FILE)) else {
        return false;
    };
    let Ok(marker) = serde_json::from_str::<StageMarker>(&text) else {
        return false;
    };
    marker.inputs == inputs && outputs.iter().all(|o| dir.join(o).exists())
}

fn mark_done(dir: &Path, stage: &str, inputs: &str) -> std::io::Result<()> {
    let marker = StageMarker { stage: stage.to_string(), inputs: inputs.to_string() };
    fs::write(dir.join(STAGE_FILE), serde_json::to_string_pretty(&marker).expect("marker serializes") + "\n")
}

fn file_hash(path: &Path) -> std::io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("value serializes") + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs `f(0..n)` on up to `jobs` threads. Results keep index order; the
/// lowest-index failure is returned.
pub fn parallel<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
}

/// Normalized phantoms of one run, loaded once.
pub struct Data {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub hash: String,
    /// `(id, voxels)` of the pretraining split.
    pub pretrain: Vec<(String, Vec<f64>)>,
    samples: BTreeMap<(SegTask, Modality, Split), Vec<Sample>>,
    indices: BTreeMap<String, u64>,
}

impl Data {
    pub fn samples(&self, task: SegTask, modality: Modality, split: Split) -> &[Sample] {
        self.samples.get(&(task, modality, split)).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Geometry index of a phantom id; modalities share geometry at equal indices.
    pub fn index_of(&self, id: &str) -> Option<u64> {
        self.indices.get(id).copied()
    }
}

/// Generates (or reuses) the phantom set and loads it.
pub fn data_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Data, CliError> {
    const STAGE: &str = "data";
    let dir = opts.out.join("data");
    let dcfg = cfg.dataset_config();
    let inputs = config_hash(&dcfg);
    if !stage_done(&dir, &inputs, &[crate::phantom::manifest::MANIFEST_FILE]) {
        if opts.existing_only {
            return Err(stage_err(STAGE, None, "phantom set missing"));
        }
        log::info!("generating {} phantoms", dcfg.requests.iter().map(|r| r.count).sum::<u64>());
        fs::create_dir_all(&dir).map_err(io_err(STAGE, None))?;
        build_manifest(&dcfg, &dir).map_err(|e| stage_err(STAGE, None, e))?;
        mark_done(&dir, STAGE, &inputs).map_err(io_err(STAGE, None))?;
    }
    load_data(cfg, &dir, inputs)
}

fn load_data(cfg: &ExperimentConfig, dir: &Path, hash: String) -> Result<Data, CliError> {
    const STAGE: &str = "data";
    let manifest = DatasetManifest::load(dir).map_err(|e| stage_err(STAGE, None, e))?;
    let err = |e: &dyn std::fmt::Display| stage_err(STAGE, None, e);
    let pm = cfg.dataset.pretrain_modality;
    let policy = IntensityPolicy::default_for(pm);
    let mut pretrain = Vec::new();
    for e in manifest.entries_for(Split::Pretrain, pm) {
        let v = manifest.load_volume(dir, e).map_err(|x| err(&x))?;
        pretrain.push((e.id.clone(), policy.apply(&v).map_err(|x| err(&x))?.voxels().to_vec()));
    }
    let mut samples = BTreeMap::new();
    for &task in &cfg.tasks {
        for &m in &cfg.dataset.modalities {
            for split in [Split::Train, Split::Val, Split::Test] {
                let s = crate::finetune::load_samples(&manifest, dir, split, m, task).map_err(|x| err(&x))?;
                samples.insert((task, m, split), s);
            }
        }
    }
    let indices = manifest.entries.iter().map(|e| (e.id.clone(), e.index)).collect();
    Ok(Data { dir: dir.to_path_buf(), manifest, hash, pretrain, samples, indices })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub method: String,
    pub seed: u64,
    pub pool: usize,
    pub steps: usize,
    pub first_loss: f64,
    /// Mean total loss over the last tenth of the steps.
    pub final_loss: f64,
}

pub fn pretrain_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("pretrain").join(method.name()).join(format!("seed{seed}"))
}

/// Pretrains `method` on the first `pool` pretraining phantoms and writes the
/// student encoder checkpoint.
pub fn pretrain_stage(cfg: &ExperimentConfig, data: &Data, method: Method, seed: u64, pool: usize, dir: &Path, existing_only: bool) -> Result<PretrainSummary, CliError> {
    let stage = format!("pretrain {method}");
    let s = Some(seed);
    let pcfg = cfg.pretrain_config(method, seed)?;
    if pool == 0 || pool > data.pretrain.len() {
        return Err(CliError::Config(format!("pretraining pool of {pool} from {} phantoms", data.pretrain.len())));
    }
    let inputs = config_hash(&(&pcfg, &data.hash, pool));
    if stage_done(dir, &inputs, &["encoder.ckpt", "loss.csv", "summary.json"]) {
        return read_json(&dir.join("summary.json")).map_err(|e| stage_err(&stage, s, e));
    }
    if existing_only {
        return Err(stage_err(&stage, s, "pretraining outputs missing"));
    }
    log::info!("pretraining {method} (seed {seed}, {pool} phantoms, {} steps)", pcfg.steps);
    let sources: Vec<(&str, &[f64], [usize; 3])> =
        data.pretrain[..pool].iter().map(|(id, v)| (id.as_str(), v.as_slice(), data.manifest.shape)).collect();
    let outcome = pretrain(&pcfg, &sources).map_err(|e| stage_err(&stage, s, e))?;
    let ckpt = encoder_checkpoint(&format!("pretrain:{method}"), &pcfg.encoder, &outcome.student, pcfg.steps as u64, Some(outcome.rng_state.clone()));
    fs::create_dir_all(dir).map_err(io_err(&stage, s))?;
    ckpt.save(&dir.join("encoder.ckpt")).map_err(|e| stage_err(&stage, s, e))?;
    write_loss_csv(&dir.join("loss.csv"), &outcome.reports).map_err(io_err(&stage, s))?;
    let tail = (outcome.reports.len() / 10).max(1);
    let summary = PretrainSummary {
        method: method.name().to_string(),
        seed,
        pool,
        steps: pcfg.steps,
        first_loss: outcome.reports[0].total,
        final_loss: outcome.reports.iter().rev().take(tail).map(|r| r.total).sum::<f64>() / tail as f64,
    };
    write_json(&dir.join("summary.json"), &summary).map_err(io_err(&stage, s))?;
    mark_done(dir, &stage, &inputs).map_err(io_err(&stage, s))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub model: String,
    pub task: SegTask,
    pub modality: Modality,
    pub shots: Shots,
    pub seed: u64,
}

impl JobKey {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.model).join(format!("{}_{}", self.task, self.modality)).join(self.shots.to_string()).join(format!("seed{}", self.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub key: JobKey,
    pub record: TrainRunRecord,
    /// Per test volume, in manifest order.
    pub test: Vec<DiceReport>,
    pub mean_dsc: f64,
    pub per_structure: BTreeMap<String, f64>,
}

/// Test-split Dice of a segmentor.
pub fn evaluate(seg: &Segmentor, test: &[Sample], overlap: f64) -> Result<Vec<DiceReport>, String> {
    let cache = IndexCache::default();
    test.iter()
        .map(|s| {
            let names = s.labels.class_names().to_vec();
            let pred = sliding_window_infer(seg, &cache, &s.volume, overlap, names.clone()).map_err(|e| e.to_string())?;
            dice_report(s.id(), pred.labels(), s.labels.labels(), &names).map_err(|e| e.to_string())
        })
        .collect()
}

/// Fine-tunes one model from `encoder_ckpt` (or random weights) and scores it on the test split.
pub fn finetune_stage(cfg: &ExperimentConfig, data: &Data, key: &JobKey, encoder_ckpt: Option<&Path>, dir: &Path, existing_only: bool) -> Result<FinetuneResult, CliError> {
    let stage = format!("finetune {} {} {} {}", key.model, key.task, key.modality, key.shots);
    let s = Some(key.seed);
    let fcfg = cfg.finetune_config(key.task, key.shots, key.seed);
    let scfg = SegmentorConfig::new(cfg.encoder_config()?, key.task.num_classes());
    let ckpt_hash = encoder_ckpt.map(file_hash).transpose().map_err(io_err(&stage, s))?;
    let inputs = config_hash(&(&fcfg, &scfg, &ckpt_hash, &data.hash, key));
    if stage_done(dir, &inputs, &["segmentor.ckpt", "curve.csv", "result.json"]) {
        return read_json(&dir.join("result.json")).map_err(|e| stage_err(&stage, s, e));
    }
    if existing_only {
        return Err(stage_err(&stage, s, "fine-tuning outputs missing"));
    }
    log::info!("fine-tuning {stage} (seed {})", key.seed);
    let ckpt = encoder_ckpt.map(Checkpoint::load).transpose().map_err(|e| stage_err(&stage, s, e))?;
    let init = build_segmentor_with(&scfg, key.seed, ckpt.as_ref()).map_err(|e| stage_err(&stage, s, e))?;
    let pool = data.samples(key.task, key.modality, Split::Train);
    let val = data.samples(key.task, key.modality, Split::Val);
    let (best, record) = finetune(&init, pool, val, &fcfg).map_err(|e| stage_err(&stage, s, e))?;
    let test = evaluate(&best, data.samples(key.task, key.modality, Split::Test), fcfg.overlap).map_err(|e| stage_err(&stage, s, e))?;
    let mean_dsc = test.iter().map(|r| r.mean).sum::<f64>() / test.len() as f64;
    let result = FinetuneResult { key: key.clone(), record, per_structure: mean_report(&test), test, mean_dsc };
    fs::create_dir_all(dir).map_err(io_err(&stage, s))?;
    best.checkpoint(result.record.train_loss.len() as u64).save(&dir.join("segmentor.ckpt")).map_err(|e| stage_err(&stage, s, e))?;
    fs::write(dir.join("curve.csv"), result.record.to_csv()).map_err(io_err(&stage, s))?;
    write_json(&dir.join("result.json"), &result).map_err(io_err(&stage, s))?;
    mark_done(dir, &stage, &inputs).map_err(io_err(&stage, s))?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaSummary {
    pub method: String,
    pub seed: u64,
    /// The fine-tuned descendant compared against the pretrained encoder.
    pub descendant: JobKey,
    pub taps: Vec<usize>,
    pub finetuned: CkaMatrix,
    /// Pretrained encoder against an independent random initialization.
    pub random: CkaMatrix,
}

impl CkaSummary {
    pub fn finetuned_profile(&self) -> Vec<f64> {
        self.finetuned.diagonal()
    }

    pub fn random_profile(&self) -> Vec<f64> {
        self.random.diagonal()
    }
}

/// Encoder arrays of a random initialization independent of every training stream.
pub fn reference_encoder(cfg: &EncoderConfig, seed: u64) -> ParameterSet {
    encoder::init_params(cfg, &mut substream(seed, "cka-reference"))
}

/// The centered `window`-shaped block of a volume.
pub fn center_crop(voxels: &[f64], shape: Grid, window: Grid) -> Vec<f64> {
    let origin = [0, 1, 2].map(|a| (shape[a] - window[a]) / 2);
    extract(voxels, shape, origin, window)
}

/// Probe volumes for CKA: center crops of the test phantoms of every modality, in order.
pub fn cka_probes(cfg: &ExperimentConfig, data: &Data) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let task = cfg.tasks[0];
    let window = cfg.encoder_config()?.input_shape;
    Ok(cfg
        .dataset
        .modalities
        .iter()
        .flat_map(|&m| data.samples(task, m, Split::Test).iter())
        .take(cfg.analysis.cka_probes)
        .map(|s| (s.id().to_string(), center_crop(s.volume.voxels(), s.volume.shape(), window)))
        .collect())
}

pub fn cka_stage(cfg: &ExperimentConfig, data: &Data, method: Method, seed: u64, opts: &RunOptions) -> Result<CkaSummary, CliError> {
    let stage = format!("cka {method}");
    let s = Some(seed);
    let descendant = JobKey { model: method.name().to_string(), task: cfg.tasks[0], modality: cfg.dataset.modalities[0], shots: cfg.shots[0], seed };
    let pre = pretrain_dir(&opts.out, method, seed).join("encoder.ckpt");
    let fin = descendant.dir(&opts.out.join("finetune")).join("segmentor.ckpt");
    let dir = opts.out.join("cka").join(method.name()).join(format!("seed{seed}"));
    let hashes = (file_hash(&pre).map_err(io_err(&stage, s))?, file_hash(&fin).map_err(io_err(&stage, s))?);
    let inputs = config_hash(&(&hashes, cfg.analysis.cka_probes, &data.hash));
    if stage_done(&dir, &inputs, &["summary.json"]) {
        return read_json(&dir.join("summary.json")).map_err(|e| stage_err(&stage, s, e));
    }
    if opts.existing_only {
        return Err(stage_err(&stage, s, "cka outputs missing"));
    }
    let enc = cfg.encoder_config()?;
    let a = Checkpoint::load(&pre).map_err(|e| stage_err(&stage, s, e))?.params;
    let b = Checkpoint::load(&fin).map_err(|e| stage_err(&stage, s, e))?.params.with_prefix(&format!("{}.", encoder::PREFIX));
    let r = reference_encoder(&enc, seed);
    let probes = cka_probes(cfg, data)?;
    let refs: Vec<(&str, &[f64])> = probes.iter().map(|(id, v)| (id.as_str(), v.as_slice())).collect();
    let taps = default_taps(&enc);
    let finetuned = layerwise_cka(&enc, &a, &b, &refs, &taps, CkaScheme::Full).map_err(|e| stage_err(&stage, s, e))?;
    let random = layerwise_cka(&enc, &a, &r, &refs, &taps, CkaScheme::Full).map_err(|e| stage_err(&stage, s, e))?;
    let summary = CkaSummary { method: method.name().to_string(), seed, descendant, taps, finetuned, random };
    fs::create_dir_all(&dir).map_err(io_err(&stage, s))?;
    fs::write(dir.join("finetuned.csv"), summary.finetuned.to_csv()).map_err(io_err(&stage, s))?;
    fs::write(dir.join("random.csv"), summary.random.to_csv()).map_err(io_err(&stage, s))?;
    write_json(&dir.join("summary.json"), &summary).map_err(io_err(&stage, s))?;
    mark_done(&dir, &stage, &inputs).map_err(io_err(&stage, s))?;
    Ok(summary)
}

/// Refuses a directory holding a different run, or any run without `resume`.
pub fn prepare_out(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(), CliError> {
    let path = opts.out.join("config.json");
    let mut stored = cfg.clone();
    stored.out = None;
    if path.exists() {
        if !opts.resume && !opts.existing_only {
            return Err(CliError::Config(format!("{} already holds a run; pass --resume to continue it", opts.out.display())));
        }
        let prior: ExperimentConfig = read_json(&path).map_err(CliError::Config)?;
        if prior != stored {
            return Err(CliError::Config(format!("{} holds a run with a different config", opts.out.display())));
        }
        return Ok(());
    }
    if opts.existing_only {
        return Err(CliError::Config(format!("{} holds no run", opts.out.display())));
    }
    fs::create_dir_all(&opts.out).map_err(|e| CliError::Config(format!("{}: {e}", opts.out.display())))?;
    fs::write(&path, stored.to_json()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Every fine-tuning job of a config, in report order.
pub fn finetune_jobs(cfg: &ExperimentConfig) -> Vec<JobKey> {
    let mut jobs = Vec::new();
    for model in cfg.models() {
        for &task in &cfg.tasks {
            for &modality in &cfg.dataset.modalities {
                for &shots in &cfg.shots {
                    for &seed in &cfg.seeds {
                        jobs.push(JobKey { model: model.clone(), task, modality, shots, seed });
                    }
                }
            }
        }
    }
    jobs
}

pub fn run_pretraining(cfg: &ExperimentConfig, data: &Data, opts: &RunOptions) -> Result<Vec<PretrainSummary>, CliError> {
    let pairs: Vec<(Method, u64)> = cfg.methods.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = data.pretrain.len();
    parallel(pairs.len(), opts.jobs, |i| {
        let (m, s) = pairs[i];
        pretrain_stage(cfg, data, m, s, pool, &pretrain_dir(&opts.out, m, s), opts.existing_only)
    })
}

pub fn run_finetuning(cfg: &ExperimentConfig, data: &Data, opts: &RunOptions) -> Result<Vec<FinetuneResult>, CliError> {
    let jobs = finetune_jobs(cfg);
    let root = opts.out.join("finetune");
    parallel(jobs.len(), opts.jobs, |i| {
        let key = &jobs[i];
        let ckpt = (key.model != SCRATCH).then(|| {
            let m: Method = key.model.parse().expect("model names come from methods");
            pretrain_dir(&opts.out, m, key.seed).join("encoder.ckpt")
        });
        finetune_stage(cfg, data, key, ckpt.as_deref(), &key.dir(&root), opts.existing_only)
    })
}

/// The whole pipeline: phantoms, pretraining, fine-tuning, analyses, report and plots.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<BenchmarkReport, CliError> {
    cfg.validate()?;
    prepare_out(cfg, opts)?;
    let data = data_stage(cfg, opts)?;
    let pretrain = run_pretraining(cfg, &data, opts)?;
    let results = run_finetuning(cfg, &data, opts)?;
    let mut notices = Vec::new();
    let cka = if cfg.analysis.cka && !cfg.methods.is_empty() {
        let pairs: Vec<(Method, u64)> = cfg.methods.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
        parallel(pairs.len(), opts.jobs, |i| cka_stage(cfg, &data, pairs[i].0, pairs[i].1, opts))?
    } else {
        notices.push("cka analysis disabled or no pretrained methods".to_string());
        Vec::new()
    };
    let report = assemble_report(cfg, &data, pretrain, results, cka, notices).map_err(|e| stage_err("report", None, e))?;
    write_json(&opts.out.join("report.json"), &report).map_err(io_err("report", None))?;
    let plots = super::plots::emit_plots(&report, &opts.out.join("plots")).map_err(|e| stage_err("plots", None, e))?;
    for s in &plots.skipped {
        log::info!("plot skipped: {s}");
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub size: usize,
    pub task: SegTask,
    pub modality: Modality,
    /// `(seed, test mean DSC)`.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config_hash: String,
    /// Method pretrained at every nonzero size.
    pub method: Option<String>,
    pub shots: Shots,
    pub sizes: Vec<usize>,
    pub points: Vec<SizePoint>,
    /// Whether mean DSC is nondecreasing in size, per `task modality`; reported only.
    pub monotone: BTreeMap<String, bool>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// One pretrain + fine-tune pipeline per pretraining-set size (0 = scratch),
/// using the first configured method and the smallest shot count.
pub fn sweep_pretrain_size(cfg: &ExperimentConfig, sizes: &[usize], opts: &RunOptions) -> Result<SweepReport, CliError> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config(format!("sizes must be nonempty and strictly ascending, got {sizes:?}")));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s as u64 > cfg.dataset.pretrain) {
        return Err(CliError::Config(format!("pretraining size {big} exceeds the pool of {}", cfg.dataset.pretrain)));
    }
    let method = cfg.methods.first().copied();
    if method.is_none() && sizes.iter().any(|&s| s > 0) {
        return Err(CliError::Config("nonzero pretraining sizes need a method".into()));
    }
    prepare_out(cfg, opts)?;
    let data = data_stage(cfg, opts)?;
    let shots = cfg.shots[0];
    let root = opts.out.join("sweep");
    let mut jobs = Vec::new();
    for &size in sizes {
        for &task in &cfg.tasks {
            for &modality in &cfg.dataset.modalities {
                for &seed in &cfg.seeds {
                    jobs.push((size, task, modality, seed));
                }
            }
        }
    }
    let pre_jobs: Vec<(usize, u64)> = sizes.iter().filter(|&&s| s > 0).flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed))).collect();
    let pre_dir = |size: usize, seed: u64| root.join(format!("size{size}")).join("pretrain").join(format!("seed{seed}"));
    parallel(pre_jobs.len(), opts.jobs, |i| {
        let (size, seed) = pre_jobs[i];
        pretrain_stage(cfg, &data, method.expect("checked above"), seed, size, &pre_dir(size, seed), opts.existing_only)
    })?;
    let results = parallel(jobs.len(), opts.jobs, |i| {
        let (size, task, modality, seed) = jobs[i];
        let model = if size == 0 { SCRATCH.to_string() } else { method.expect("checked above").name().to_string() };
        let key = JobKey { model, task, modality, shots, seed };
        let ckpt = (size > 0).then(|| pre_dir(size, seed).join("encoder.ckpt"));
        let dir = root.join(format!("size{size}")).join(format!("{task}_{modality}")).join(format!("seed{seed}"));
        finetune_stage(cfg, &data, &key, ckpt.as_deref(), &dir, opts.existing_only)
    })?;
    let mut points = Vec::new();
    let mut monotone = BTreeMap::new();
    for &task in &cfg.tasks {
        for &modality in &cfg.dataset.modalities {
            let mut prev: Option<f64> = None;
            let mut up = true;
            for &size in sizes {
                let per_seed: Vec<(u64, f64)> = jobs
                    .iter()
                    .zip(&results)
                    .filter(|((sz, t, m, _), _)| *sz == size && *t == task && *m == modality)
                    .map(|((_, _, _, seed), r)| (*seed, r.mean_dsc))
                    .collect();
                let (mean, std) = mean_std(&per_seed.iter().map(|(_, d)| *d).collect::<Vec<_>>());
                if prev.is_some_and(|p| mean < p) {
                    up = false;
                }
                prev = Some(mean);
                points.push(SizePoint { size, task, modality, per_seed, mean, std });
            }
            monotone.insert(format!("{task} {modality}"), up);
        }
    }
    let mut stored = cfg.clone();
    stored.out = None;
    let report = SweepReport {
        schema_version: super::config::SCHEMA_VERSION,
        config_hash: config_hash(&stored),
        method: method.map(|m| m.name().to_string()),
        shots,
        sizes: sizes.to_vec(),
        points,
        monotone,
    };
    write_json(&root.join("sweep.json"), &report).map_err(io_err("sweep", None))?;
    super::plots::size_curve(&report, &opts.out.join("plots")).map_err(|e| stage_err("plots", None, e))?;
    Ok(report)
}
