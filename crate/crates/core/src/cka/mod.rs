//! Linear-kernel centered kernel alignment with the unbiased HSIC estimator,
//! and layerwise similarity profiles between two encoders.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sslbench_autograd::Graph;

use crate::encoder::{self, EncoderConfig, EncoderError};
use crate::nn::{grid_volume, IndexCache};
use crate::params::{Bound, ParameterSet};
use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum CkaError {
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("non-finite feature entries")]
    NonFinite,
    #[error("sample counts differ: {0} vs {1}")]
    Misaligned(usize, usize),
    #[error("degenerate features: self-similarity {0}")]
    Degenerate(f64),
    #[error("tap {tap} out of range (model has {count} taps)")]
    Tap { tap: usize, count: usize },
    #[error("need {needed} samples for {k} batches of {batch_size}, got {n}")]
    Batches { n: usize, k: usize, batch_size: usize, needed: usize },
    #[error("{0}")]
    Encoder(#[from] EncoderError),
    #[error("plot: {0}")]
    Plot(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major `n × d` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * d, "feature size");
        Self { n, d, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self::new(rows.len(), self.d, data)
    }
}

/// Symmetric `n × n` kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Gram {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// `K = X Xᵀ`.
pub fn gram_linear(x: &Features) -> Result<Gram, CkaError> {
    if x.n < 2 {
        return Err(CkaError::TooFewSamples { n: x.n, min: 2 });
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(CkaError::NonFinite);
    }
    let n = x.n;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(Gram { n, data })
}

/// Unbiased HSIC estimator on diagonal-free kernels:
/// `[tr(K̃L̃) + 1ᵀK̃1·1ᵀL̃1/((n−1)(n−2)) − 2/(n−2)·1ᵀK̃L̃1] / (n(n−3))`.
pub fn hsic_unbiased(k: &Gram, l: &Gram) -> Result<f64, CkaError> {
    let n = k.n;
    if l.n != n {
        return Err(CkaError::Misaligned(n, l.n));
    }
    if n < 4 {
        return Err(CkaError::TooFewSamples { n, min: 4 });
    }
    let off = |g: &Gram, i: usize, j: usize| if i == j { 0.0 } else { g.at(i, j) };
    let mut trace = 0.0;
    let mut k_sum = 0.0;
    let mut l_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..n {
        let mut k_row = 0.0;
        let mut l_row = 0.0;
        for j in 0..n {
            let (kij, lij) = (off(k, i, j), off(l, i, j));
            trace += kij * lij;
            k_row += kij;
            l_row += lij;
        }
        k_sum += k_row;
        l_sum += l_row;
        kl_sum += k_row * l_row;
    }
    let nf = n as f64;
    let value = trace + k_sum * l_sum / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * kl_sum;
    Ok(value / (nf * (nf - 3.0)))
}

fn combine(xy: f64, xx: f64, yy: f64) -> Result<f64, CkaError> {
    let denom = xx * yy;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(CkaError::Degenerate(xx.min(yy)));
    }
    Ok(xy / denom.sqrt())
}

/// CKA of two feature sets over the same samples.
pub fn cka(x: &Features, y: &Features) -> Result<f64, CkaError> {
    if x.n != y.n {
        return Err(CkaError::Misaligned(x.n, y.n));
    }
    let k = gram_linear(x)?;
    let l = gram_linear(y)?;
    combine(hsic_unbiased(&k, &l)?, hsic_unbiased(&k, &k)?, hsic_unbiased(&l, &l)?)
}

/// Accumulates per-batch HSIC terms; the result does not depend on batch order.
#[derive(Clone, Debug, Default)]
pub struct MinibatchCka {
    xy: Vec<f64>,
    xx: Vec<f64>,
    yy: Vec<f64>,
}

fn ordered_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum::<f64>() / v.len() as f64
}

impl MinibatchCka {
    pub fn update(&mut self, x: &Features, y: &Features) -> Result<(), CkaError> {
        if x.n != y.n {
            return Err(CkaError::Misaligned(x.n, y.n));
        }
        let k = gram_linear(x)?;
        let l = gram_linear(y)?;
        self.xy.push(hsic_unbiased(&k, &l)?);
        self.xx.push(hsic_unbiased(&k, &k)?);
        self.yy.push(hsic_unbiased(&l, &l)?);
        Ok(())
    }

    pub fn batches(&self) -> usize {
        self.xy.len()
    }

    pub fn value(&self) -> Result<f64, CkaError> {
        if self.xy.is_empty() {
            return Err(CkaError::TooFewSamples { n: 0, min: 4 });
        }
        combine(ordered_mean(&self.xy), ordered_mean(&self.xx), ordered_mean(&self.yy))
    }
}

/// CKA from `k` contiguous batches of `batch_size` aligned samples.
pub fn minibatch_cka(x: &Features, y: &Features, k: usize, batch_size: usize) -> Result<f64, CkaError> {
    if x.n != y.n {
        return Err(CkaError::Misaligned(x.n, y.n));
    }
    if batch_size < 4 {
        return Err(CkaError::TooFewSamples { n: batch_size, min: 4 });
    }
    let needed = k * batch_size;
    if k == 0 || needed > x.n {
        return Err(CkaError::Batches { n: x.n, k, batch_size, needed });
    }
    let mut acc = MinibatchCka::default();
    for b in 0..k {
        let rows: Vec<usize> = (b * batch_size..(b + 1) * batch_size).collect();
        acc.update(&x.select(&rows), &y.select(&rows))?;
    }
    acc.value()
}

/// How layer features are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CkaScheme {
    Full,
    /// Samples shuffled once with `seed`, then cut into contiguous batches.
    Minibatch { batch_size: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub taps_a: Vec<usize>,
    pub taps_b: Vec<usize>,
    /// `values[i][j]` compares tap `taps_a[i]` of model a with `taps_b[j]` of model b.
    pub values: Vec<Vec<f64>>,
    pub probes: Vec<String>,
    pub scheme: CkaScheme,
    /// Sample order used for minibatching.
    pub order: Vec<usize>,
}

impl CkaMatrix {
    /// Same-tap similarities (the layerwise profile).
    pub fn diagonal(&self) -> Vec<f64> {
        self.taps_a
            .iter()
            .enumerate()
            .filter_map(|(i, t)| self.taps_b.iter().position(|u| u == t).map(|j| self.values[i][j]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tap_a");
        for t in &self.taps_b {
            write!(s, ",tap_b_{t}").unwrap();
        }
        s.push('\n');
        for (t, row) in self.taps_a.iter().zip(&self.values) {
            write!(s, "{t}").unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Heatmap with values clamped to `[0, 1]` for display.
    pub fn render_heatmap(&self, path: &Path, title: &str) -> Result<(), CkaError> {
        use plotters::prelude::*;
        let (rows, cols) = (self.taps_a.len(), self.taps_b.len());
        let root = SVGBackend::new(path, (120 + 32 * cols as u32, 100 + 32 * rows as u32)).into_drawing_area();
        let plot = |e: &dyn std::fmt::Display| CkaError::Plot(e.to_string());
        root.fill(&WHITE).map_err(|e| plot(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0..cols, 0..rows)
            .map_err(|e| plot(&e))?;
        let (ta, tb) = (self.taps_a.clone(), self.taps_b.clone());
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("model b tap")
            .y_desc("model a tap")
            .x_label_formatter(&|j| tb.get(*j).map(|t| t.to_string()).unwrap_or_default())
            .y_label_formatter(&|i| ta.get(*i).map(|t| t.to_string()).unwrap_or_default())
            .draw()
            .map_err(|e| plot(&e))?;
        chart
            .draw_series(self.values.iter().enumerate().flat_map(|(i, row)| {
                row.iter().enumerate().map(move |(j, v)| {
                    let c = v.clamp(0.0, 1.0);
                    let shade = (255.0 * (1.0 - c)) as u8;
                    Rectangle::new([(j, i), (j + 1, i + 1)], RGBColor(255, shade, shade).filled())
                })
            }))
            .map_err(|e| plot(&e))?;
        root.present().map_err(|e| plot(&e))?;
        Ok(())
    }
}

/// Every tap of `cfg`: the patch embedding followed by each block output.
pub fn default_taps(cfg: &EncoderConfig) -> Vec<usize> {
    (0..=cfg.num_blocks()).collect()
}

/// Token features of the requested taps, one matrix per tap with one row per
/// probe volume (every token's channels, flattened in grid order).
pub fn tap_features(
    cfg: &EncoderConfig,
    params: &ParameterSet,
    probes: &[&[f64]],
    taps: &[usize],
    chunk: usize,
) -> Result<Vec<Features>, CkaError> {
    let count = cfg.num_blocks() + 1;
    if let Some(&tap) = taps.iter().find(|&&t| t >= count) {
        return Err(CkaError::Tap { tap, count });
    }
    let cache = IndexCache::default();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
    let mut widths = vec![0; taps.len()];
    for group in probes.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, false);
        let x = g.constant(encoder::stack_volumes(group, cfg.input_shape));
        let out = encoder::encode(cfg, &p, &cache, &mut g, x, None)?;
        for (k, &t) in taps.iter().enumerate() {
            let tap = out.taps[t];
            widths[k] = grid_volume(tap.grid) * tap.channels;
            rows[k].extend_from_slice(g.value(tap.var).data());
        }
    }
    Ok(rows.into_iter().zip(widths).map(|(data, d)| Features::new(probes.len(), d, data)).collect())
}

fn compare(x: &Features, y: &Features, scheme: CkaScheme, order: &[usize]) -> Result<f64, CkaError> {
    match scheme {
        CkaScheme::Full => cka(x, y),
        CkaScheme::Minibatch { batch_size, .. } => {
            let k = x.n / batch_size.max(1);
            minibatch_cka(&x.select(order), &y.select(order), k, batch_size)
        }
    }
}

/// CKA between every requested tap of encoder `a` and of encoder `b` on the same probes.
pub fn layerwise_cka(
    cfg: &EncoderConfig,
    a: &ParameterSet,
    b: &ParameterSet,
    probes: &[(&str, &[f64])],
    taps: &[usize],
    scheme: CkaScheme,
) -> Result<CkaMatrix, CkaError> {
    let volumes: Vec<&[f64]> = probes.iter().map(|(_, v)| *v).collect();
    let fa = tap_features(cfg, a, &volumes, taps, 8)?;
    let fb = tap_features(cfg, b, &volumes, taps, 8)?;
    let mut order: Vec<usize> = (0..probes.len()).collect();
    if let CkaScheme::Minibatch { seed, .. } = scheme {
        order.shuffle(&mut substream(seed, "cka"));
    }
    let values = fa
        .iter()
        .map(|x| fb.iter().map(|y| compare(x, y, scheme, &order)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CkaMatrix {
        taps_a: taps.to_vec(),
        taps_b: taps.to_vec(),
        values,
        probes: probes.iter().map(|(id, _)| id.to_string()).collect(),
        scheme,
        order,
    })
}
