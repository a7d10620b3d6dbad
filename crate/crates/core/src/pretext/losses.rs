//! Pretext losses as graph nodes. Each takes model outputs already placed on
//! the graph and returns a scalar.

use sslbench_autograd::{Graph, Tensor, Var};

use super::PretextError;
use crate::nn::MASKED_LOGIT;

fn check_len(g: &Graph, pred: Var, n: usize, what: &str) -> Result<(), PretextError> {
    let have = g.value(pred).numel();
    if have != n {
        return Err(PretextError::Shape(format!("{what}: prediction has {have} values, target {n}")));
    }
    Ok(())
}

/// Mean squared error over voxels whose flag is set.
pub fn loss_simmim(g: &mut Graph, pred: Var, target: &[f64], masked: &[bool]) -> Result<Var, PretextError> {
    check_len(g, pred, target.len(), "simmim")?;
    if masked.len() != target.len() {
        return Err(PretextError::Shape(format!("mask covers {} voxels, target {}", masked.len(), target.len())));
    }
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(PretextError::EmptyMask);
    }
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::from_vec(&shape, target.to_vec()));
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let w: Vec<f64> = masked.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
    let weighted = g.mul_const(sq, w.into());
    Ok(g.sum(weighted))
}

fn mse(g: &mut Graph, pred: Var, target: &[f64], what: &str) -> Result<Var, PretextError> {
    check_len(g, pred, target.len(), what)?;
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::from_vec(&shape, target.to_vec()));
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}

/// Mean squared error over all voxels; the input was masked upstream.
pub fn loss_inpaint(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var, PretextError> {
    mse(g, pred, target, "inpaint")
}

/// Mean squared error over all voxels of a clean-input reconstruction.
pub fn loss_recon(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var, PretextError> {
    mse(g, pred, target, "recon")
}

/// Mean cross-entropy of `logits` (`n × C`) against class labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, PretextError> {
    let shape = g.shape(logits).to_vec();
    let classes = *shape.last().expect("rank ≥ 1");
    let n = g.value(logits).numel() / classes;
    if labels.len() != n {
        return Err(PretextError::Shape(format!("{n} rows of logits, {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(PretextError::Label { label, classes });
    }
    let logp = g.log_softmax(logits);
    let idx: Vec<u32> = labels.iter().enumerate().map(|(i, &l)| (i * classes + l) as u32).collect();
    let picked = g.gather(logp, idx.into(), &[n]);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

pub fn loss_rotation(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, PretextError> {
    cross_entropy(g, logits, labels)
}

/// NT-Xent over `2N` rows; `pairing[i]` is the positive partner of row `i`.
pub fn loss_infonce(g: &mut Graph, embeddings: Var, pairing: &[usize], t: f64) -> Result<Var, PretextError> {
    if t <= 0.0 || t.is_nan() {
        return Err(PretextError::Temperature(t));
    }
    let shape = g.shape(embeddings).to_vec();
    let rows = shape[0];
    if rows < 2 {
        return Err(PretextError::NoPairs);
    }
    let d = g.value(embeddings).numel() / rows;
    if pairing.len() != rows || pairing.iter().enumerate().any(|(i, &j)| j >= rows || j == i || pairing[j] != i) {
        return Err(PretextError::Shape("pairing must be a fixed-point-free involution".into()));
    }
    let z = g.l2_normalize_rows(embeddings, 1e-12);
    let z3 = g.reshape(z, &[1, rows, d]);
    let sim = g.bmm(z3, z3, false, true);
    let sim = g.reshape(sim, &[rows, rows]);
    let sim = g.scale(sim, 1.0 / t);
    let mut diag = vec![0.0; rows * rows];
    for i in 0..rows {
        diag[i * rows + i] = MASKED_LOGIT;
    }
    let diag = g.constant(Tensor::from_vec(&[rows, rows], diag));
    let logits = g.add(sim, diag);
    let logp = g.log_softmax(logits);
    let idx: Vec<u32> = pairing.iter().enumerate().map(|(i, &j)| (i * rows + j) as u32).collect();
    let picked = g.gather(logp, idx.into(), &[rows]);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Row-wise softmax of `(x − center) / tau` over rows of width `k`.
pub fn softmax_rows(x: &[f64], center: &[f64], tau: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let z: Vec<f64> = row.iter().zip(center).map(|(v, c)| (v - c) / tau).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Cross-entropy between the centered, sharpened teacher distribution and the
/// student distribution, averaged over rows. No gradient reaches the teacher.
pub fn distill_ce(g: &mut Graph, teacher: Var, student: Var, center: &[f64], tau_t: f64, tau_s: f64) -> Result<Var, PretextError> {
    for tau in [tau_t, tau_s] {
        if tau <= 0.0 || tau.is_nan() {
            return Err(PretextError::Temperature(tau));
        }
    }
    let ts = g.shape(teacher).to_vec();
    let ss = g.shape(student).to_vec();
    if ts != ss || ts.len() != 2 || center.len() != ts[1] {
        return Err(PretextError::Shape(format!("teacher {ts:?}, student {ss:?}, center {}", center.len())));
    }
    let (n, k) = (ts[0], ts[1]);
    if n == 0 {
        return Err(PretextError::EmptyBatch);
    }
    let pt = softmax_rows(g.value(teacher).data(), center, tau_t, k);
    let pt = g.constant(Tensor::from_vec(&[n, k], pt));
    let s = g.scale(student, 1.0 / tau_s);
    let logp = g.log_softmax(s);
    let prod = g.mul(pt, logp);
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / n as f64))
}
