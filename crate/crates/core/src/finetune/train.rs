use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sslbench_autograd::Graph;

use super::{sample_crops, seg_loss, segment, sliding_window_infer, FinetuneError, LossMode, Result, SegTask, Segmentor};
use crate::encoder::stack_volumes;
use crate::metrics::dice_report;
use crate::nn::{update_running_stats, IndexCache, Mode};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Bound;
use crate::phantom::{DatasetManifest, IntensityPolicy, LabelMap, Modality, Split, Volume};
use crate::rng::substream;

/// Number of labeled training volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shots {
    Count(usize),
    Full,
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::Count(n) => write!(f, "{n}"),
            Shots::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Shots {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "full" {
            return Ok(Shots::Full);
        }
        s.parse().map(Shots::Count).map_err(|_| format!("shots must be a count or \"full\", got {s:?}"))
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::Count(n) => s.serialize_u64(*n as u64),
            Shots::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Shots::Count(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub shots: Shots,
    pub epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub foreground_ratio: f64,
    pub overlap: f64,
    pub loss: LossMode,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            shots: Shots::Count(5),
            epochs: 200,
            patience: 20,
            eval_every: 5,
            batch_size: 3,
            foreground_ratio: 0.5,
            overlap: 0.5,
            loss: LossMode::Multiorgan,
            optim: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            seed: 0,
        }
    }
}

/// A labeled, normalized volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub labels: LabelMap,
}

impl Sample {
    pub fn id(&self) -> &str {
        self.volume.id()
    }
}

/// Loads, normalizes and relabels every entry of one split and modality.
pub fn load_samples(manifest: &DatasetManifest, dir: &Path, split: Split, modality: Modality, task: SegTask) -> Result<Vec<Sample>> {
    let policy = IntensityPolicy::default_for(modality);
    manifest
        .entries_for(split, modality)
        .map(|e| {
            let volume = policy.apply(&manifest.load_volume(dir, e)?)?;
            let labels = manifest
                .load_labels(dir, e)?
                .ok_or_else(|| FinetuneError::Shape(format!("{} has no label map", e.id)))?;
            Ok(Sample { volume, labels: task.remap(&labels)? })
        })
        .collect()
}

/// Positions of the training volumes: the first `shots` of a seed-shuffled
/// order, so smaller shot sets are prefixes of larger ones.
pub fn select_shots(pool: usize, shots: Shots, seed: u64) -> Result<Vec<usize>> {
    let k = match shots {
        Shots::Count(k) if k > pool => return Err(FinetuneError::Shots { requested: k, pool }),
        Shots::Count(k) => k,
        Shots::Full => pool,
    };
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut substream(seed, "shots"));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub shots: Shots,
    pub epochs: usize,
    pub train_ids: Vec<String>,
    /// Mean training loss of epochs `1..=train_loss.len()`.
    pub train_loss: Vec<f64>,
    /// `(epoch, mean validation Dice)` in epoch order.
    pub val_dice: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub early_stop_epoch: Option<usize>,
}

impl TrainRunRecord {
    pub fn best_val_dice(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.val_dice.iter().find(|(e, _)| *e == best).map(|(_, d)| *d)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_dice\n");
        for (i, loss) in self.train_loss.iter().enumerate() {
            let epoch = i + 1;
            write!(s, "{epoch},{loss},").unwrap();
            if let Some((_, d)) = self.val_dice.iter().find(|(e, _)| *e == epoch) {
                write!(s, "{d}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Mean over volumes of the mean foreground Dice.
pub fn mean_validation_dice(seg: &Segmentor, cache: &IndexCache, val: &[Sample], overlap: f64) -> Result<f64> {
    if val.is_empty() {
        return Err(FinetuneError::EmptyValidation);
    }
    let mut total = 0.0;
    for s in val {
        let names = s.labels.class_names().to_vec();
        let pred = sliding_window_infer(seg, cache, &s.volume, overlap, names.clone())?;
        total += dice_report(s.id(), pred.labels(), s.labels.labels(), &names)?.mean;
    }
    Ok(total / val.len() as f64)
}

/// Supervised training on the selected shots with periodic validation.
/// Returns the best-validation segmentor and the run record.
pub fn finetune(init: &Segmentor, pool: &[Sample], val: &[Sample], cfg: &FinetuneConfig) -> Result<(Segmentor, TrainRunRecord)> {
    if val.is_empty() {
        return Err(FinetuneError::EmptyValidation);
    }
    let picked = select_shots(pool.len(), cfg.shots, cfg.seed)?;
    let train: Vec<&Sample> = picked.iter().map(|&i| &pool[i]).collect();
    let mut record = TrainRunRecord {
        shots: cfg.shots,
        epochs: cfg.epochs,
        train_ids: train.iter().map(|s| s.id().to_string()).collect(),
        train_loss: Vec::new(),
        val_dice: Vec::new(),
        best_epoch: None,
        early_stop_epoch: None,
    };
    if cfg.epochs == 0 || train.is_empty() {
        return Ok((init.clone(), record));
    }
    let cache = IndexCache::default();
    let crop = init.cfg.encoder.input_shape;
    let mut seg = init.clone();
    let mut best = init.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut rng = substream(cfg.seed, "finetune-sampling");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let fg = super::foreground_schedule(order.len(), cfg.foreground_ratio);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let mut volumes = Vec::with_capacity(chunk.len());
            let mut labels = Vec::new();
            for (j, &i) in chunk.iter().enumerate() {
                let s = train[i];
                let ratio = if fg[b * bs + j] { 1.0 } else { 0.0 };
                let c = sample_crops(&s.volume, &s.labels, crop, 1, ratio, &mut rng)?.crops.remove(0);
                labels.extend_from_slice(&c.labels);
                volumes.push(c.volume);
            }
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &seg.params, true);
            let refs: Vec<&[f64]> = volumes.iter().map(|v| v.as_slice()).collect();
            let x = g.constant(stack_volumes(&refs, crop));
            let mut stats = Vec::new();
            let logits = segment(&seg.cfg, &p, &seg.buffers, &cache, &mut g, x, Mode::Train, &mut stats)?;
            let loss = seg_loss(&mut g, logits, &labels, cfg.loss)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                let batch = chunk.iter().map(|&i| train[i].id().to_string()).collect();
                return Err(FinetuneError::NonFinite { epoch, batch });
            }
            let grads = p.gradients(&g, &g.backward(loss.total));
            opt.update(&mut seg.params, &grads, cfg.optim.lr);
            for (name, s) in &stats {
                update_running_stats(&mut seg.buffers, name, s);
            }
            epoch_loss += value;
            batches += 1;
        }
        record.train_loss.push(epoch_loss / batches as f64);
        if epoch == 1 || epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs {
            let d = mean_validation_dice(&seg, &cache, val, cfg.overlap)?;
            log::debug!("epoch {epoch}: loss {:.4}, val dice {d:.4}", epoch_loss / batches as f64);
            record.val_dice.push((epoch, d));
            if d > best_dice {
                best_dice = d;
                best = seg.clone();
                record.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    record.early_stop_epoch = Some(epoch);
                    break;
                }
            }
        }
    }
    Ok((best, record))
}
