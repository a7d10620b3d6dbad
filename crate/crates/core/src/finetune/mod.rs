//! Segmentation transfer: the encoder plus a convolutional decoder with skip
//! connections, few-shot fine-tuning, and sliding-window inference.
//!
//! Decoder layout, deepest first: a bridge convolution on the last stage, then
//! per stage an upsampling, concatenation with that stage's encoder output and
//! a conv-BN-LeakyReLU block. Patch-resolution features are upsampled to voxel
//! resolution and fused with a convolution of the raw input before the 1×1 head.

mod crops;
mod infer;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sslbench_autograd::{BatchStats, Graph, Var};

pub use crops::{extract, foreground_schedule, sample_crops, Crop, CropBatch};
pub use infer::{argmax_labels, coverage_map, predict_logits, sliding_window, sliding_window_infer, tile_origins, window_starts};
pub use train::{finetune, load_samples, mean_validation_dice, select_shots, FinetuneConfig, Sample, Shots, TrainRunRecord};

use crate::encoder::{self, EncoderConfig, EncoderError, STAGES};
use crate::metrics::MetricsError;
use crate::nn::{self, grid_volume, IndexCache, Mode, ParamSpec};
use crate::params::{config_hash, Bound, Checkpoint, CheckpointManifest, ParamError, ParameterSet, CKPT_VERSION};
use crate::phantom::{LabelMap, PhantomError, CLASS_NAMES};
use crate::rng::{substream, RngState};

pub const DECODER: &str = "decoder";
/// Added to numerator and denominator of every soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("checkpoint config hash {found} does not match encoder config hash {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("tumor mode needs exactly 2 classes, got {0}")]
    TumorClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: u8, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("decoder needs a cubic power-of-two patch, got {0:?}")]
    Patch([usize; 3]),
    #[error("crop {crop:?} exceeds volume {volume:?}")]
    Crop { crop: [usize; 3], volume: [usize; 3] },
    #[error("overlap {0} outside [0, 1)")]
    Overlap(f64),
    #[error("requested {requested} shots from a pool of {pool}")]
    Shots { requested: usize, pool: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("non-finite loss at epoch {epoch}, batch {batch:?}")]
    NonFinite { epoch: usize, batch: Vec<String> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FinetuneError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegInit {
    Random,
    FromCheckpoint { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentorConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub init: SegInit,
}

impl SegmentorConfig {
    pub fn new(encoder: EncoderConfig, num_classes: usize) -> Self {
        Self { encoder, num_classes, init: SegInit::Random }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(FinetuneError::Classes(self.num_classes));
        }
        let p = self.encoder.patch_size;
        if p[0] != p[1] || p[1] != p[2] || !p[0].is_power_of_two() {
            return Err(FinetuneError::Patch(p));
        }
        Ok(())
    }

    /// Channel width at voxel resolution.
    pub fn full_width(&self) -> usize {
        (self.encoder.embed_dim / 2).max(4)
    }

    fn full_steps(&self) -> usize {
        self.encoder.patch_size[0].trailing_zeros() as usize
    }

    /// Decoder parameters and batch-norm buffers.
    pub fn decoder_specs(&self) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
        let enc = &self.encoder;
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        let mut push = |(p, b): (Vec<ParamSpec>, Vec<ParamSpec>), params: &mut Vec<ParamSpec>| {
            params.extend(p);
            buffers.extend(b);
        };
        let last = enc.width(STAGES - 1);
        push(nn::conv_bn_act_specs(&format!("{DECODER}.bridge"), 3, last, last), &mut params);
        for s in (0..STAGES - 1).rev() {
            params.extend(nn::upsample2_specs(&format!("{DECODER}.up{s}"), enc.width(s + 1), enc.width(s)));
            push(nn::conv_bn_act_specs(&format!("{DECODER}.stages.{s}"), 3, 2 * enc.width(s), enc.width(s)), &mut params);
        }
        let cf = self.full_width();
        let mut w = enc.width(0);
        for i in 0..self.full_steps() {
            params.extend(nn::upsample2_specs(&format!("{DECODER}.full_up{i}"), w, cf));
            w = cf;
        }
        push(nn::conv_bn_act_specs(&format!("{DECODER}.input"), 3, 1, cf), &mut params);
        push(nn::conv_bn_act_specs(&format!("{DECODER}.full"), 3, w + cf, cf), &mut params);
        params.extend(nn::linear_specs(&format!("{DECODER}.out"), cf, self.num_classes, true));
        (params, buffers)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = self.encoder.param_shapes();
        shapes.extend(nn::specs_shapes(&self.decoder_specs().0));
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentor {
    pub cfg: SegmentorConfig,
    pub params: ParameterSet,
    pub buffers: ParameterSet,
}

/// Builds a segmentor, loading encoder weights from the configured checkpoint.
pub fn build_segmentor(cfg: &SegmentorConfig, seed: u64) -> Result<Segmentor> {
    let ckpt = match &cfg.init {
        SegInit::Random => None,
        SegInit::FromCheckpoint { path } => Some(Checkpoint::load(path)?),
    };
    build_segmentor_with(cfg, seed, ckpt.as_ref())
}

/// Random initialization, then encoder arrays replaced from `ckpt` if given.
/// The decoder draw does not depend on the checkpoint.
pub fn build_segmentor_with(cfg: &SegmentorConfig, seed: u64, ckpt: Option<&Checkpoint>) -> Result<Segmentor> {
    cfg.validate()?;
    let mut rng = substream(seed, "segmentor-init");
    let mut params = encoder::init_params(&cfg.encoder, &mut rng);
    let (dec, buf) = cfg.decoder_specs();
    params.extend(nn::init_params(&dec, &mut rng));
    let buffers = nn::init_params(&buf, &mut rng);
    if let Some(c) = ckpt {
        let expected = config_hash(&cfg.encoder);
        if c.manifest.config_hash != expected {
            return Err(FinetuneError::HashMismatch { expected, found: c.manifest.config_hash.clone() });
        }
        let enc = c.params.with_prefix(&format!("{}.", encoder::PREFIX));
        encoder::check_params(&cfg.encoder, &enc)?;
        for (name, t) in enc.iter() {
            params.insert(name.clone(), t.clone());
        }
    }
    Ok(Segmentor { cfg: cfg.clone(), params, buffers })
}

/// Archive of the encoder arrays in `params`, hashed by encoder config.
pub fn encoder_checkpoint(kind: &str, cfg: &EncoderConfig, params: &ParameterSet, step: u64, rng_state: Option<RngState>) -> Checkpoint {
    Checkpoint {
        manifest: CheckpointManifest {
            format_version: CKPT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash(cfg),
            encoder_config: serde_json::to_value(cfg).expect("config serializes"),
            step,
            rng_state,
            extra: serde_json::Value::Null,
        },
        params: params.with_prefix(&format!("{}.", encoder::PREFIX)),
        buffers: ParameterSet::new(),
    }
}

impl Segmentor {
    /// Full archive (encoder, decoder, buffers); its hash is the encoder's, so
    /// the encoder can be reloaded from it.
    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        let mut c = encoder_checkpoint("segmentor", &self.cfg.encoder, &self.params, step, None);
        c.params = self.params.clone();
        c.buffers = self.buffers.clone();
        c.manifest.extra = serde_json::to_value(&self.cfg).expect("config serializes");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: SegmentorConfig = serde_json::from_value(c.manifest.extra.clone()).map_err(ParamError::from)?;
        c.params.check_shapes(&cfg.param_shapes())?;
        Ok(Self { cfg, params: c.params.clone(), buffers: c.buffers.clone() })
    }
}

/// Voxel logits `[B·D·H·W, num_classes]` (volume order) for a `[B, D, H, W]` batch.
#[allow(clippy::too_many_arguments)]
pub fn segment(
    cfg: &SegmentorConfig,
    p: &Bound,
    buffers: &ParameterSet,
    cache: &IndexCache,
    g: &mut Graph,
    volumes: Var,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let shape = g.shape(volumes).to_vec();
    let b = shape[0];
    let spatial = [shape[1], shape[2], shape[3]];
    let out = encoder::encode(&cfg.encoder, p, cache, g, volumes, None)?;
    let st = &out.stages;
    let mut conv = |g: &mut Graph, name: &str, x: Var, grid| nn::conv_bn_act(g, p, buffers, cache, name, x, b, grid, 3, mode, stats);
    let last = st[STAGES - 1];
    let mut x = conv(g, &format!("{DECODER}.bridge"), last.var, last.grid);
    for s in (0..STAGES - 1).rev() {
        let up = nn::upsample2(g, p, cache, &format!("{DECODER}.up{s}"), x, b, st[s + 1].grid);
        let cat = g.concat(&[up, st[s].var]);
        x = conv(g, &format!("{DECODER}.stages.{s}"), cat, st[s].grid);
    }
    let mut grid = st[0].grid;
    for i in 0..cfg.full_steps() {
        x = nn::upsample2(g, p, cache, &format!("{DECODER}.full_up{i}"), x, b, grid);
        grid = grid.map(|d| d * 2);
    }
    debug_assert_eq!(grid, spatial);
    let raw = g.reshape(volumes, &[b * grid_volume(spatial), 1]);
    let skip = conv(g, &format!("{DECODER}.input"), raw, spatial);
    let cat = g.concat(&[x, skip]);
    let x = conv(g, &format!("{DECODER}.full"), cat, spatial);
    Ok(nn::linear(g, p, &format!("{DECODER}.out"), x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Multiorgan,
    /// Two classes; the softmax cross-entropy over two logits is the binary
    /// cross-entropy of their difference.
    Tumor,
}

pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    /// Soft Dice averaged over the foreground classes.
    pub dice: Var,
}

/// `0.5·CE + 0.5·(1 − mean foreground soft Dice)`, pooled over every voxel of the batch.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8], mode: LossMode) -> Result<SegLoss> {
    let k = g.value(logits).cols();
    let n = g.value(logits).rows();
    if labels.len() != n {
        return Err(FinetuneError::Shape(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if k < 2 {
        return Err(FinetuneError::Classes(k));
    }
    if mode == LossMode::Tumor && k != 2 {
        return Err(FinetuneError::TumorClasses(k));
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(FinetuneError::Label { label, classes: k });
    }
    let lsm = g.log_softmax(logits);
    let idx: Vec<u32> = labels.iter().enumerate().map(|(i, &l)| (i * k + l as usize) as u32).collect();
    let picked = g.gather(lsm, idx.into(), &[n]);
    let mean = g.mean(picked);
    let ce = g.scale(mean, -1.0);
    let prob = g.softmax(logits);
    let mut dice_sum: Option<Var> = None;
    for c in 1..k {
        let idx: Vec<u32> = (0..n).map(|i| (i * k + c) as u32).collect();
        let pc = g.gather(prob, idx.into(), &[n]);
        let onehot: Vec<f64> = labels.iter().map(|&l| if l as usize == c { 1.0 } else { 0.0 }).collect();
        let count: f64 = onehot.iter().sum();
        let inter = g.mul_const(pc, onehot.into());
        let inter = g.sum(inter);
        let inter = g.scale(inter, 2.0);
        let num = g.add_scalar(inter, DICE_SMOOTH);
        let psum = g.sum(pc);
        let den = g.add_scalar(psum, count + DICE_SMOOTH);
        let d = g.div(num, den);
        dice_sum = Some(match dice_sum {
            Some(s) => g.add(s, d),
            None => d,
        });
    }
    let dice = g.scale(dice_sum.expect("k ≥ 2"), 1.0 / (k - 1) as f64);
    let half_ce = g.scale(ce, 0.5);
    let half_dice = g.scale(dice, 0.5);
    let diff = g.sub(half_ce, half_dice);
    let total = g.add_scalar(diff, 0.5);
    Ok(SegLoss { total, ce, dice })
}

/// Which structures a segmentor is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTask {
    /// Background plus the four organs; tumor voxels count as the organ hosting them.
    Organs,
    /// Tumor versus everything else.
    Tumor,
}

impl SegTask {
    pub fn table(self) -> [u8; 6] {
        match self {
            SegTask::Organs => [0, 1, 2, 3, 4, 1],
            SegTask::Tumor => [0, 0, 0, 0, 0, 1],
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            SegTask::Organs => &CLASS_NAMES[..5],
            SegTask::Tumor => &["background", "tumor"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn loss_mode(self) -> LossMode {
        match self {
            SegTask::Organs => LossMode::Multiorgan,
            SegTask::Tumor => LossMode::Tumor,
        }
    }

    pub fn remap(self, labels: &LabelMap) -> Result<LabelMap> {
        Ok(labels.remap(&self.table(), self.class_names())?)
    }
}

impl std::fmt::Display for SegTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegTask::Organs => "organs",
            SegTask::Tumor => "tumor",
        })
    }
}
