use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::encoder::EncoderConfig;
use crate::finetune::{FinetuneConfig, SegTask, Shots};
use crate::nn::Grid;
use crate::optim::AdamWConfig;
use crate::phantom::{DatasetConfig, Modality, MIN_PHANTOM_EXTENT};
use crate::pretext::{DistillConfig, Method, MethodConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Model name of the randomly initialized baseline.
pub const SCRATCH: &str = "scratch";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub shape: Grid,
    /// Unlabeled pretraining phantoms, all of `pretrain_modality`.
    pub pretrain: u64,
    #[serde(default = "default_pretrain_modality")]
    pub pretrain_modality: Modality,
    /// Train, validation and test counts per fine-tuning modality.
    pub train: u64,
    pub val: u64,
    pub test: u64,
    pub modalities: Vec<Modality>,
}

fn default_pretrain_modality() -> Modality {
    Modality::A
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainBlock {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBlock {
    pub epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub foreground_ratio: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    pub cka: bool,
    pub gaps: bool,
    pub wilcoxon: bool,
    /// Probe volumes for CKA, drawn from the test splits.
    pub cka_probes: usize,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        Self { cka: true, gaps: true, wilcoxon: true, cka_probes: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Master seed of the phantom data.
    pub seed: u64,
    pub dataset: DatasetBlock,
    /// Encoder preset name.
    pub encoder: String,
    /// Overrides the preset input extent.
    #[serde(default)]
    pub input_shape: Option<Grid>,
    pub methods: Vec<Method>,
    /// Adds the randomly initialized baseline.
    #[serde(default = "yes")]
    pub scratch: bool,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<SegTask>,
    pub shots: Vec<Shots>,
    /// Training seeds; each one fans out into init, mask and sampling streams.
    pub seeds: Vec<u64>,
    pub pretrain: PretrainBlock,
    pub finetune: FinetuneBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

fn default_tasks() -> Vec<SegTask> {
    vec![SegTask::Organs]
}

impl ExperimentConfig {
    /// The desk-scale benchmark: every method plus scratch on 16³ phantoms.
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk".into(),
            seed: 0,
            dataset: DatasetBlock {
                shape: [16; 3],
                pretrain: 200,
                pretrain_modality: Modality::A,
                train: 40,
                val: 10,
                test: 20,
                modalities: vec![Modality::A, Modality::B],
            },
            encoder: "desk".into(),
            input_shape: Some([16; 3]),
            methods: Method::ALL.to_vec(),
            scratch: true,
            tasks: default_tasks(),
            shots: vec![Shots::Count(5), Shots::Count(10), Shots::Count(20), Shots::Full],
            seeds: vec![0, 1, 2],
            pretrain: PretrainBlock { steps: 300, batch_size: 4, warmup_steps: 30, lr: 1e-3 },
            finetune: FinetuneBlock {
                epochs: 200,
                patience: 20,
                eval_every: 5,
                batch_size: 3,
                lr: 1e-3,
                foreground_ratio: 0.5,
                overlap: 0.5,
            },
            analysis: AnalysisBlock::default(),
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CliError::Config(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})"))),
            None => return Err(CliError::Config(format!("{}: missing schema_version", path.display()))),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported", self.schema_version));
        }
        let enc = self.encoder_config()?;
        enc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let d = &self.dataset;
        if d.shape.iter().any(|&s| s < MIN_PHANTOM_EXTENT) {
            return bad(format!("phantom shape {:?} is below {MIN_PHANTOM_EXTENT}", d.shape));
        }
        if (0..3).any(|a| enc.input_shape[a] > d.shape[a]) {
            return bad(format!("encoder input {:?} exceeds phantom shape {:?}", enc.input_shape, d.shape));
        }
        if d.modalities.is_empty() || d.modalities.iter().collect::<BTreeSet<_>>().len() != d.modalities.len() {
            return bad("modalities must be nonempty and distinct".into());
        }
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return bad("train, val and test counts must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.shots.is_empty() || self.shots.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("shots must be nonempty and strictly ascending, got {:?}", self.shots));
        }
        if let Some(Shots::Count(k)) = self.shots.iter().find(|s| matches!(s, Shots::Count(k) if *k as u64 > d.train || *k == 0)) {
            return bad(format!("{k} shots requested from {} training volumes", d.train));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        if self.methods.is_empty() && !self.scratch {
            return bad("no models to fine-tune".into());
        }
        if !self.methods.is_empty() && (d.pretrain == 0 || self.pretrain.steps == 0 || self.pretrain.batch_size == 0) {
            return bad("pretraining needs phantoms, steps and a batch size".into());
        }
        if self.tasks.is_empty() {
            return bad("tasks must be nonempty".into());
        }
        let f = &self.finetune;
        if f.batch_size == 0 || !(0.0..=1.0).contains(&f.foreground_ratio) || !(0.0..1.0).contains(&f.overlap) {
            return bad("fine-tuning needs a batch size, a ratio in [0,1] and an overlap in [0,1)".into());
        }
        if self.analysis.cka && self.analysis.cka_probes < 4 {
            return bad("cka needs at least 4 probes".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, CliError> {
        let enc = EncoderConfig::preset(&self.encoder)
            .map_err(|_| CliError::Config(format!("unknown encoder preset {:?}; known: {:?}", self.encoder, EncoderConfig::PRESETS)))?;
        Ok(match self.input_shape {
            Some(s) => enc.with_input(s),
            None => enc,
        })
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        let finetune: Vec<_> = d.modalities.iter().map(|&m| (m, d.train, d.val, d.test)).collect();
        DatasetConfig::sequential(self.seed, d.shape, &[(d.pretrain_modality, d.pretrain)], &finetune)
    }

    /// Fine-tuned models in report order: scratch first, then the methods.
    pub fn models(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.scratch {
            out.push(SCRATCH.to_string());
        }
        out.extend(self.methods.iter().map(|m| m.name().to_string()));
        out
    }

    pub fn pretrain_config(&self, method: Method, seed: u64) -> Result<crate::pretext::train::PretrainConfig, CliError> {
        let p = &self.pretrain;
        Ok(crate::pretext::train::PretrainConfig {
            method: MethodConfig::for_method(method),
            encoder: self.encoder_config()?,
            distill: DistillConfig::default(),
            optim: AdamWConfig { lr: p.lr, ..AdamWConfig::default() },
            steps: p.steps,
            batch_size: p.batch_size,
            warmup_steps: p.warmup_steps,
            seed,
        })
    }

    pub fn finetune_config(&self, task: SegTask, shots: Shots, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            shots,
            epochs: f.epochs,
            patience: f.patience,
            eval_every: f.eval_every,
            batch_size: f.batch_size,
            foreground_ratio: f.foreground_ratio,
            overlap: f.overlap,
            loss: task.loss_mode(),
            optim: AdamWConfig { lr: f.lr, ..AdamWConfig::default() },
            seed,
        }
    }
}
