use sslbench_autograd::Graph;

use super::{crops::extract, segment, FinetuneError, Result, Segmentor};
use crate::encoder::stack_volumes;
use crate::nn::{grid_volume, Grid, IndexCache, Mode};
use crate::params::Bound;
use crate::phantom::{flat_index, LabelMap, Volume};

/// Windows evaluated per forward pass.
const WINDOW_BATCH: usize = 4;

fn check_overlap(overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(FinetuneError::Overlap(overlap));
    }
    Ok(())
}

/// Window starts along one axis: stride `⌊window·(1 − overlap)⌋` (at least 1),
/// with the last window moved back to end at the boundary.
pub fn window_starts(extent: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    check_overlap(overlap)?;
    if window == 0 || window > extent {
        return Err(FinetuneError::Crop { crop: [window; 3], volume: [extent; 3] });
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + window < extent).collect();
    starts.push(extent - window);
    Ok(starts)
}

pub fn tile_origins(shape: Grid, window: Grid, overlap: f64) -> Result<Vec<Grid>> {
    let axes = [0, 1, 2].map(|a| window_starts(shape[a], window[a], overlap));
    let [z, y, x] = axes;
    let (z, y, x) = (z?, y?, x?);
    let mut out = Vec::with_capacity(z.len() * y.len() * x.len());
    for &a in &z {
        for &b in &y {
            out.extend(x.iter().map(|&c| [a, b, c]));
        }
    }
    Ok(out)
}

fn padded_shape(shape: Grid, window: Grid) -> Grid {
    [0, 1, 2].map(|a| shape[a].max(window[a]))
}

/// How many windows cover each voxel of `shape`.
pub fn coverage_map(shape: Grid, window: Grid, overlap: f64) -> Result<Vec<u32>> {
    let padded = padded_shape(shape, window);
    let mut counts = vec![0u32; grid_volume(padded)];
    for o in tile_origins(padded, window, overlap)? {
        for z in 0..window[0] {
            for y in 0..window[1] {
                for x in 0..window[2] {
                    counts[flat_index(padded, o[0] + z, o[1] + y, o[2] + x)] += 1;
                }
            }
        }
    }
    Ok(extract(&counts, padded, [0; 3], shape))
}

/// Mirror index into `0..n` (edge voxel not repeated), for any `i`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Averages the logits of every window over a volume. Axes shorter than the
/// window are reflect-padded at the far end and cropped back afterwards.
/// `forward` maps a batch of windows to per-window `[voxels × classes]` logits.
pub fn sliding_window<F>(volume: &[f64], shape: Grid, window: Grid, overlap: f64, classes: usize, mut forward: F) -> Result<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    check_overlap(overlap)?;
    if volume.len() != grid_volume(shape) {
        return Err(FinetuneError::Shape(format!("{} voxels for shape {shape:?}", volume.len())));
    }
    let padded = padded_shape(shape, window);
    let source: Vec<f64> = if padded == shape {
        volume.to_vec()
    } else {
        let mut out = Vec::with_capacity(grid_volume(padded));
        for z in 0..padded[0] {
            for y in 0..padded[1] {
                for x in 0..padded[2] {
                    out.push(volume[flat_index(shape, reflect(z, shape[0]), reflect(y, shape[1]), reflect(x, shape[2]))]);
                }
            }
        }
        out
    };
    let origins = tile_origins(padded, window, overlap)?;
    let mut sums = vec![0.0; grid_volume(padded) * classes];
    let mut counts = vec![0u32; grid_volume(padded)];
    for group in origins.chunks(WINDOW_BATCH) {
        let crops: Vec<Vec<f64>> = group.iter().map(|&o| extract(&source, padded, o, window)).collect();
        let logits = forward(&crops)?;
        for (o, l) in group.iter().zip(&logits) {
            if l.len() != grid_volume(window) * classes {
                return Err(FinetuneError::Shape(format!("window logits {} vs {}", l.len(), grid_volume(window) * classes)));
            }
            let mut r = 0;
            for z in 0..window[0] {
                for y in 0..window[1] {
                    for x in 0..window[2] {
                        let v = flat_index(padded, o[0] + z, o[1] + y, o[2] + x);
                        counts[v] += 1;
                        for c in 0..classes {
                            sums[v * classes + c] += l[r * classes + c];
                        }
                        r += 1;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(grid_volume(shape) * classes);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let v = flat_index(padded, z, y, x);
                let n = counts[v] as f64;
                out.extend(sums[v * classes..(v + 1) * classes].iter().map(|s| s / n));
            }
        }
    }
    Ok(out)
}

/// Per-voxel argmax; ties go to the lower class.
pub fn argmax_labels(logits: &[f64], classes: usize) -> Vec<u8> {
    logits
        .chunks(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (c, v)| if *v > row[best] { c } else { best }) as u8)
        .collect()
}

/// Averaged window logits of a segmentor in evaluation mode.
pub fn predict_logits(seg: &Segmentor, cache: &IndexCache, volume: &[f64], shape: Grid, overlap: f64) -> Result<Vec<f64>> {
    let window = seg.cfg.encoder.input_shape;
    let classes = seg.cfg.num_classes;
    sliding_window(volume, shape, window, overlap, classes, |crops| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &seg.params, false);
        let refs: Vec<&[f64]> = crops.iter().map(|c| c.as_slice()).collect();
        let x = g.constant(stack_volumes(&refs, window));
        let logits = segment(&seg.cfg, &p, &seg.buffers, cache, &mut g, x, Mode::Eval, &mut Vec::new())?;
        Ok(g.value(logits).data().chunks(grid_volume(window) * classes).map(|c| c.to_vec()).collect())
    })
}

pub fn sliding_window_infer(seg: &Segmentor, cache: &IndexCache, v: &Volume, overlap: f64, class_names: Vec<String>) -> Result<LabelMap> {
    let logits = predict_logits(seg, cache, v.voxels(), v.shape(), overlap)?;
    let labels = argmax_labels(&logits, seg.cfg.num_classes);
    Ok(LabelMap::new(v.shape(), labels, class_names)?)
}
