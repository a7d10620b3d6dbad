//! The pretraining loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sslbench_autograd::Graph;

use super::heads::head_specs;
use super::objective::{build_batch, method_loss, Batch, Context, Source, GLOBAL_CENTER, PATCH_CENTER};
use super::{ema_update, update_center, DistillConfig, MethodConfig, PretextError};
use crate::encoder::{self, EncoderConfig};
use crate::nn::{self, IndexCache};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::{Bound, ParameterSet};
use crate::rng::{substream, Rng, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub method: MethodConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    pub lr: f64,
    pub tau_t: f64,
}

impl LossReport {
    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn write_loss_csv(path: &Path, reports: &[LossReport]) -> std::io::Result<()> {
    let mut s = String::from("step,total");
    if let Some(first) = reports.first() {
        for (name, _) in &first.parts {
            write!(s, ",{name}").unwrap();
        }
    }
    s.push_str(",lr,tau_t\n");
    for r in reports {
        write!(s, "{},{}", r.step, r.total).unwrap();
        for (_, v) in &r.parts {
            write!(s, ",{v}").unwrap();
        }
        writeln!(s, ",{},{}", r.lr, r.tau_t).unwrap();
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, s)
}

/// Mutable state of a run.
pub struct TrainState {
    pub student: ParameterSet,
    pub teacher: Option<ParameterSet>,
    pub centers: BTreeMap<String, Vec<f64>>,
    pub opt: AdamW,
}

impl TrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self, PretextError> {
        cfg.encoder.validate()?;
        let mut rng = substream(cfg.seed, "init");
        let mut student = encoder::init_params(&cfg.encoder, &mut rng);
        student.extend(nn::init_params(&head_specs(&cfg.method, &cfg.encoder, &cfg.distill), &mut rng));
        let distills = cfg.method.method.distills();
        let teacher = distills.then(|| student.clone());
        let k = cfg.distill.head_output_dim;
        let centers = if distills {
            [GLOBAL_CENTER, PATCH_CENTER].iter().map(|c| (c.to_string(), vec![0.0; k])).collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self { student, teacher, centers, opt: AdamW::new(cfg.optim.clone()) })
    }
}

pub fn schedule(cfg: &PretrainConfig) -> CosineSchedule {
    CosineSchedule { peak: cfg.optim.lr, floor: 0.0, warmup: cfg.warmup_steps, total: cfg.steps }
}

/// Fractional epoch at `step` for a pool of `pool` volumes.
pub fn epoch_at(step: usize, pool: usize, batch_size: usize) -> f64 {
    let per_epoch = pool.div_ceil(batch_size).max(1);
    step as f64 / per_epoch as f64
}

/// One optimizer step on the student followed, for distillation methods, by
/// the EMA teacher and center updates.
pub fn pretrain_step(
    cfg: &PretrainConfig,
    state: &mut TrainState,
    cache: &IndexCache,
    batch: &Batch,
    step: usize,
    lr: f64,
    tau_t: f64,
) -> Result<LossReport, PretextError> {
    let mut g = Graph::new();
    let student = Bound::new(&mut g, &state.student, true);
    let teacher = state.teacher.as_ref().map(|t| Bound::new(&mut g, t, false));
    let ctx = Context { method: &cfg.method, encoder: &cfg.encoder, distill: &cfg.distill, cache, centers: &state.centers, tau_t };
    let out = method_loss(&ctx, &mut g, &student, teacher.as_ref(), batch)?;
    let total = g.value(out.total).item();
    let parts: Vec<(String, f64)> = out.parts.iter().map(|(n, v)| (n.to_string(), g.value(*v).item())).collect();
    if !total.is_finite() || parts.iter().any(|(_, v)| !v.is_finite()) {
        let parts = parts.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
        return Err(PretextError::NonFinite { step, batch: batch.ids.clone(), parts: format!("total={total}, {parts}") });
    }
    let grads = student.gradients(&g, &g.backward(out.total));
    state.opt.update(&mut state.student, &grads, lr);
    if let Some(t) = state.teacher.as_mut() {
        ema_update(t, &state.student, cfg.distill.ema_momentum)?;
        for (name, logits) in &out.teacher_logits {
            let c = state.centers.get_mut(*name).expect("center exists");
            *c = update_center(c, logits.data(), logits.cols(), cfg.distill.center_momentum)?;
        }
    }
    Ok(LossReport { step, total, parts, lr, tau_t })
}

pub struct PretrainOutcome {
    pub student: ParameterSet,
    pub teacher: Option<ParameterSet>,
    pub reports: Vec<LossReport>,
    pub rng_state: RngState,
}

impl PretrainOutcome {
    /// Encoder arrays of the student, the weights handed to fine-tuning.
    pub fn encoder_params(&self) -> ParameterSet {
        self.student.with_prefix(&format!("{}.", encoder::PREFIX))
    }
}

/// Runs `cfg.steps` steps over `sources`, reshuffled every epoch.
pub fn pretrain(cfg: &PretrainConfig, sources: &[Source<'_>]) -> Result<PretrainOutcome, PretextError> {
    if sources.is_empty() || cfg.batch_size == 0 {
        return Err(PretextError::EmptyBatch);
    }
    let mut state = TrainState::new(cfg)?;
    let cache = IndexCache::default();
    let mut rng: Rng = substream(cfg.seed, "sampling");
    let sched = schedule(cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(sources.len()) {
            if order.is_empty() {
                order = (0..sources.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picked.push(sources[order.pop().expect("refilled")]);
        }
        let batch = build_batch(&cfg.method, &cfg.encoder, &picked, &mut rng)?;
        let tau_t = cfg.distill.tau_t(epoch_at(step, sources.len(), cfg.batch_size));
        let report = pretrain_step(cfg, &mut state, &cache, &batch, step, sched.lr(step), tau_t)?;
        log::debug!("{} step {step}: {:.5}", cfg.method.method, report.total);
        reports.push(report);
    }
    Ok(PretrainOutcome { student: state.student, teacher: state.teacher, reports, rng_state: RngState::capture(&rng) })
}
