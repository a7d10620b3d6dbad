use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SCHEMA_VERSION};
use super::pipeline::{CkaSummary, Data, FinetuneResult, PretrainSummary};
use crate::finetune::{SegTask, Shots};
use crate::metrics::{gap_report, modality_gap, stars, wilcoxon_signed_rank, GapReport, MetricsError, WilcoxonResult};
use crate::params::config_hash;
use crate::phantom::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub task: SegTask,
    pub modality: Modality,
    pub shots: Shots,
    pub seed: u64,
    pub mean_dsc: f64,
    pub per_structure: BTreeMap<String, f64>,
    /// Performance gap against the best model of the cell, in percent.
    pub gap: Option<f64>,
    pub best_epoch: Option<usize>,
    pub early_stop_epoch: Option<usize>,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<(usize, f64)>,
}

/// Seed means of one (task, modality, shots) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: SegTask,
    pub modality: Modality,
    pub shots: Shots,
    pub mean_dsc: BTreeMap<String, f64>,
    pub seed_std: BTreeMap<String, f64>,
    pub per_structure: BTreeMap<String, BTreeMap<String, f64>>,
    pub gap: Option<GapReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityGapRow {
    pub task: SegTask,
    pub shots: Shots,
    pub model: String,
    pub from: Modality,
    pub to: Modality,
    /// `to − from` of the seed-mean DSC.
    pub mean_gap: f64,
    pub per_structure: BTreeMap<String, f64>,
    /// Paired over test geometries, seed-averaged per volume.
    pub wilcoxon: Option<WilcoxonResult>,
    pub stars: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub models: Vec<String>,
    pub pretrain: Vec<PretrainSummary>,
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellSummary>,
    pub modality_gaps: Vec<ModalityGapRow>,
    pub cka: Vec<CkaSummary>,
    pub analysis: super::config::AnalysisBlock,
    pub notices: Vec<String>,
}

impl BenchmarkReport {
    pub fn cell(&self, task: SegTask, modality: Modality, shots: Shots) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.task == task && c.modality == modality && c.shots == shots)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

type CellKey = (SegTask, Modality, Shots);

pub fn assemble_report(
    cfg: &ExperimentConfig,
    data: &Data,
    pretrain: Vec<PretrainSummary>,
    results: Vec<FinetuneResult>,
    cka: Vec<CkaSummary>,
    mut notices: Vec<String>,
) -> Result<BenchmarkReport, MetricsError> {
    let models = cfg.models();
    let mut cells = Vec::new();
    let mut by_cell: BTreeMap<CellKey, Vec<&FinetuneResult>> = BTreeMap::new();
    for r in &results {
        by_cell.entry((r.key.task, r.key.modality, r.key.shots)).or_default().push(r);
    }
    for &task in &cfg.tasks {
        for &modality in &cfg.dataset.modalities {
            for &shots in &cfg.shots {
                let rs = by_cell.get(&(task, modality, shots)).map(|v| v.as_slice()).unwrap_or(&[]);
                let mut mean_dsc = BTreeMap::new();
                let mut seed_std = BTreeMap::new();
                let mut per_structure = BTreeMap::new();
                for m in &models {
                    let mine: Vec<&&FinetuneResult> = rs.iter().filter(|r| &r.key.model == m).collect();
                    if mine.is_empty() {
                        continue;
                    }
                    let (mean, std) = mean_std(&mine.iter().map(|r| r.mean_dsc).collect::<Vec<_>>());
                    mean_dsc.insert(m.clone(), mean);
                    seed_std.insert(m.clone(), std);
                    let mut ps: BTreeMap<String, f64> = BTreeMap::new();
                    for r in &mine {
                        for (k, v) in &r.per_structure {
                            *ps.entry(k.clone()).or_default() += v / mine.len() as f64;
                        }
                    }
                    per_structure.insert(m.clone(), ps);
                }
                let gap = if cfg.analysis.gaps && !mean_dsc.is_empty() { Some(gap_report(&shots.to_string(), &mean_dsc)?) } else { None };
                cells.push(CellSummary { task, modality, shots, mean_dsc, seed_std, per_structure, gap });
            }
        }
    }
    if !cfg.analysis.gaps {
        notices.push("performance gaps disabled".into());
    }
    let rows = results
        .iter()
        .map(|r| {
            let gap = cells
                .iter()
                .find(|c| c.task == r.key.task && c.modality == r.key.modality && c.shots == r.key.shots)
                .and_then(|c| c.gap.as_ref())
                .and_then(|g| g.gaps.get(&r.key.model).copied());
            ResultRow {
                model: r.key.model.clone(),
                task: r.key.task,
                modality: r.key.modality,
                shots: r.key.shots,
                seed: r.key.seed,
                mean_dsc: r.mean_dsc,
                per_structure: r.per_structure.clone(),
                gap,
                best_epoch: r.record.best_epoch,
                early_stop_epoch: r.record.early_stop_epoch,
                train_loss: r.record.train_loss.clone(),
                val_dice: r.record.val_dice.clone(),
            }
        })
        .collect();
    let mut modality_gaps = Vec::new();
    if cfg.dataset.modalities.len() >= 2 {
        let (from, to) = (cfg.dataset.modalities[0], cfg.dataset.modalities[1]);
        for &task in &cfg.tasks {
            for &shots in &cfg.shots {
                for m in &models {
                    let (Some(ca), Some(cb)) = (cells.iter().find(|c| c.task == task && c.modality == from && c.shots == shots), cells.iter().find(|c| c.task == task && c.modality == to && c.shots == shots)) else {
                        continue;
                    };
                    let (Some(a), Some(b)) = (ca.mean_dsc.get(m), cb.mean_dsc.get(m)) else {
                        continue;
                    };
                    let per_structure = modality_gap(&ca.per_structure[m], &cb.per_structure[m])?;
                    let wilcoxon = if cfg.analysis.wilcoxon {
                        let pa = volume_means(&results, data, m, task, from, shots);
                        let pb = volume_means(&results, data, m, task, to, shots);
                        let (xa, xb): (Vec<f64>, Vec<f64>) = pa.iter().filter_map(|(i, v)| pb.get(i).map(|w| (*v, *w))).unzip();
                        match wilcoxon_signed_rank(&xa, &xb) {
                            Ok(w) => Some(w),
                            Err(e) => {
                                notices.push(format!("wilcoxon {m} {task} {shots}: {e}"));
                                None
                            }
                        }
                    } else {
                        None
                    };
                    let stars = wilcoxon.as_ref().map(|w| stars(w.p).to_string()).unwrap_or_default();
                    modality_gaps.push(ModalityGapRow { task, shots, model: m.clone(), from, to, mean_gap: b - a, per_structure, wilcoxon, stars });
                }
            }
        }
    } else {
        notices.push("modality gap needs two modalities".into());
    }
    if !cfg.analysis.wilcoxon {
        notices.push("wilcoxon tests disabled".into());
    }
    let mut stored = cfg.clone();
    stored.out = None;
    Ok(BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_hash: config_hash(&stored),
        models,
        pretrain,
        rows,
        cells,
        modality_gaps,
        cka,
        analysis: cfg.analysis.clone(),
        notices,
    })
}

/// Seed-averaged mean DSC per test geometry index.
fn volume_means(results: &[FinetuneResult], data: &Data, model: &str, task: SegTask, modality: Modality, shots: Shots) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.key.model == model && r.key.task == task && r.key.modality == modality && r.key.shots == shots) {
        for d in &r.test {
            if let Some(i) = data.index_of(&d.id) {
                let e = acc.entry(i).or_default();
                e.0 += d.mean;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect()
}
