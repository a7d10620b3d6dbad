//! Segmentation scores and paired significance testing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1} elements")]
    Shape(usize, usize),
    #[error("reference accuracy must be positive, got {0}")]
    Reference(f64),
    #[error("structure keys differ: {0:?}")]
    Keys(Vec<String>),
    #[error("paired samples have lengths {0} and {1}")]
    Unpaired(usize, usize),
    #[error("need at least {MIN_PAIRS} nonzero differences, got {0}")]
    TooFewPairs(usize),
    #[error("structures not covered by the grouping: {0:?}")]
    Uncovered(Vec<String>),
    #[error("grouping names unknown structures: {0:?}")]
    UnknownStructure(Vec<String>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub const MIN_PAIRS: usize = 5;
/// Largest sample size evaluated by the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(pred.len(), gt.len()));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

/// Dice of one class between two label maps.
pub fn dice_class(pred: &[u8], gt: &[u8], class: u8) -> Result<f64, MetricsError> {
    let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
    let g: Vec<bool> = gt.iter().map(|&l| l == class).collect();
    dice(&p, &g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub id: String,
    pub per_structure: BTreeMap<String, f64>,
    pub mean: f64,
    /// Structures absent from both prediction and ground truth (scored 1).
    pub undefined: usize,
}

/// Per-class Dice over the foreground classes `1..class_names.len()`.
pub fn dice_report(id: &str, pred: &[u8], gt: &[u8], class_names: &[String]) -> Result<DiceReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(pred.len(), gt.len()));
    }
    let mut per_structure = BTreeMap::new();
    let mut undefined = 0;
    for (c, name) in class_names.iter().enumerate().skip(1) {
        let c = c as u8;
        if !pred.contains(&c) && !gt.contains(&c) {
            undefined += 1;
        }
        per_structure.insert(name.clone(), dice_class(pred, gt, c)?);
    }
    let mean = mean(per_structure.values().copied());
    Ok(DiceReport { id: id.to_string(), per_structure, mean, undefined })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Structure-wise mean over several reports.
pub fn mean_report(reports: &[DiceReport]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.per_structure {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Relative difference from the reference accuracy, in percent.
pub fn performance_gap(acc_m: f64, acc_ref: f64) -> Result<f64, MetricsError> {
    if !acc_m.is_finite() || !acc_ref.is_finite() {
        return Err(MetricsError::NonFinite("accuracy"));
    }
    if acc_ref <= 0.0 {
        return Err(MetricsError::Reference(acc_ref));
    }
    Ok((100.0 * acc_m - 100.0 * acc_ref) / acc_ref)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub reference: String,
    pub shots: String,
    pub gaps: BTreeMap<String, f64>,
}

/// Gap of every model against the best one (ties broken by name order).
pub fn gap_report(shots: &str, accuracies: &BTreeMap<String, f64>) -> Result<GapReport, MetricsError> {
    let (reference, &best) = accuracies
        .iter()
        .fold(None, |best: Option<(&String, &f64)>, (k, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((k, v)),
        })
        .ok_or(MetricsError::Reference(f64::NAN))?;
    let gaps = accuracies.iter().map(|(k, &v)| Ok((k.clone(), performance_gap(v, best)?))).collect::<Result<_, _>>()?;
    Ok(GapReport { reference: reference.clone(), shots: shots.to_string(), gaps })
}

fn key_difference(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Vec<String> {
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    ka.symmetric_difference(&kb).map(|s| s.to_string()).collect()
}

/// Per-structure `B − A`.
pub fn modality_gap(dsc_a: &BTreeMap<String, f64>, dsc_b: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, MetricsError> {
    let diff = key_difference(dsc_a, dsc_b);
    if !diff.is_empty() {
        return Err(MetricsError::Keys(diff));
    }
    Ok(dsc_a.iter().map(|(k, a)| (k.clone(), dsc_b[k] - a)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p: f64,
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Counts of each achievable doubled rank sum over all `2^n` sign assignments.
fn signed_rank_counts(doubled: &[usize]) -> Vec<f64> {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Unpaired(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("paired sample"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult { p: 1.0, statistic: 0.0, n: 0, exact: true, degenerate: true });
    }
    if n < MIN_PAIRS {
        return Err(MetricsError::TooFewPairs(n));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = ranks.iter().zip(&d).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = signed_rank_counts(&doubled);
        let total: f64 = counts.iter().sum();
        let w2 = (2.0 * w).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum();
        let upper: f64 = counts[w2..].iter().sum();
        let p = (2.0 * lower.min(upper) / total).min(1.0);
        return Ok(WilcoxonResult { p, statistic: w, n, exact: true, degenerate: false });
    }
    let nf = n as f64;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let mu = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w - mu) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * normal.sf(z.abs())).min(1.0);
    Ok(WilcoxonResult { p, statistic: w, n, exact: false, degenerate: false })
}

/// Significance marker: `*`, `**`, `***` below 0.05, 0.01, 0.001.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Mean Dice per group of structures.
pub fn group_structures(
    report: &BTreeMap<String, f64>,
    grouping: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let covered: BTreeSet<&String> = grouping.values().flatten().collect();
    let uncovered: Vec<String> = report.keys().filter(|k| !covered.contains(k)).cloned().collect();
    if !uncovered.is_empty() {
        return Err(MetricsError::Uncovered(uncovered));
    }
    let unknown: Vec<String> = covered.iter().filter(|k| !report.contains_key(**k)).map(|k| k.to_string()).collect();
    if !unknown.is_empty() {
        return Err(MetricsError::UnknownStructure(unknown));
    }
    Ok(grouping.iter().map(|(g, members)| (g.clone(), mean(members.iter().map(|m| report[m])))).collect())
}

/// One row per report: id, every structure, mean, undefined count.
pub fn dice_reports_csv(reports: &[DiceReport]) -> String {
    let names: BTreeSet<&String> = reports.iter().flat_map(|r| r.per_structure.keys()).collect();
    let mut s = String::from("id");
    for n in &names {
        write!(s, ",{n}").unwrap();
    }
    s.push_str(",mean,undefined\n");
    for r in reports {
        s.push_str(&r.id);
        for n in &names {
            match r.per_structure.get(*n) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        writeln!(s, ",{},{}", r.mean, r.undefined).unwrap();
    }
    s
}

#[cfg(test)]
mod tests;
