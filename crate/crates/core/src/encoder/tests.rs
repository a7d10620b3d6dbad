use rand::Rng as _;
use sslbench_autograd::{Graph, Tensor};

use super::*;
use crate::rng::substream;

fn params_for(cfg: &EncoderConfig, seed: u64) -> ParameterSet {
    init_params(cfg, &mut substream(seed, "init"))
}

fn random_volumes(b: usize, shape: Grid, seed: u64) -> Tensor {
    let mut rng = substream(seed, "vol");
    let n = b * grid_volume(shape);
    Tensor::from_vec(&[b, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.random::<f64>()).collect())
}

fn run(cfg: &EncoderConfig, params: &ParameterSet, vols: &Tensor, mask: Option<&[bool]>) -> Vec<Tensor> {
    let cache = IndexCache::default();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let x = g.constant(vols.clone());
    let out = encode(cfg, &p, &cache, &mut g, x, mask).unwrap();
    out.stages.iter().map(|s| g.value(s.var).clone()).collect()
}

#[test]
fn desk_stage_extents() {
    let cfg = EncoderConfig::desk();
    cfg.validate().unwrap();
    let params = params_for(&cfg, 1);
    let vols = random_volumes(1, cfg.input_shape, 2);
    let cache = IndexCache::default();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params, false);
    let x = g.constant(vols);
    let out = encode(&cfg, &p, &cache, &mut g, x, None).unwrap();
    let grids: Vec<Grid> = out.stages.iter().map(|s| s.grid).collect();
    assert_eq!(grids, vec![[16; 3], [8; 3], [4; 3], [2; 3]]);
    for (s, t) in out.stages.iter().enumerate() {
        assert_eq!(g.shape(t.var), &[grid_volume(t.grid), 24 << s]);
        assert_eq!(t.channels, 24 << s);
    }
    assert_eq!(out.taps.len(), 1 + cfg.num_blocks());
}

#[test]
fn patch_embed_shapes_and_rejection() {
    let cfg = EncoderConfig::desk();
    let params = params_for(&cfg, 1);
    let cache = IndexCache::default();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params, false);
    let x = g.constant(Tensor::zeros(&[1, 32, 32, 32]));
    let t = patch_embed(&cfg, &p, &cache, &mut g, x).unwrap();
    assert_eq!(t.grid, [16; 3]);
    assert_eq!(g.shape(t.var), &[4096, 24]);
    // zero input leaves only the bias
    let bias = params.get("encoder.patch_embed.bias").unwrap().data();
    for row in g.value(t.var).data().chunks(24) {
        assert_eq!(row, bias);
    }
    let bad = EncoderConfig { patch_size: [3; 3], ..cfg.clone() };
    let err = patch_embed(&bad, &p, &cache, &mut g, x).unwrap_err();
    assert_eq!(err, EncoderError::Indivisible { axis: 'z', extent: 32, divisor: 3 });
    assert!(bad.validate().is_err());
}

#[test]
fn presets_validate() {
    for name in EncoderConfig::PRESETS {
        EncoderConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(EncoderConfig::preset("huge").is_err());
    let base = EncoderConfig::paper_base();
    assert_eq!(base.grid(3), [6; 3]);
    assert_eq!(base.effective_window(3), [3; 3]);
    assert_eq!(base.effective_window(0), [4; 3]);
    assert_eq!(EncoderConfig::desk().effective_window(3), [2; 3]);
    let odd = EncoderConfig { input_shape: [112, 32, 32], ..EncoderConfig::desk() };
    // stage-3 grid 7 only admits a window of 1
    assert!(matches!(odd.validate(), Err(EncoderError::Window { .. })));
    let heads = EncoderConfig { heads: [5, 2, 4, 4], ..EncoderConfig::desk() };
    assert!(matches!(heads.validate(), Err(EncoderError::Heads { stage: 0, .. })));
}

/// Closed-form parameter count, written out independently of the spec list.
fn count_by_formula(cfg: &EncoderConfig) -> usize {
    let p3: usize = cfg.patch_size.iter().product();
    let mut n = p3 * cfg.embed_dim + cfg.embed_dim + cfg.embed_dim;
    for s in 0..4 {
        let c = cfg.embed_dim << s;
        if s > 0 {
            let cp = c / 2;
            n += 2 * 8 * cp + 8 * cp * c;
        }
        let w = cfg.effective_window(s);
        let table = (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1);
        let hidden = cfg.mlp_ratio * c;
        let per_block = 2 * c + (c * 3 * c + 3 * c) + table * cfg.heads[s] + (c * c + c) + 2 * c + (c * hidden + hidden) + (hidden * c + c);
        n += cfg.depths[s] * per_block + 2 * c;
    }
    n
}

#[test]
fn parameter_count_matches_instantiated_arrays() {
    let cfg = EncoderConfig::desk();
    let params = params_for(&cfg, 3);
    assert_eq!(parameter_count(&cfg), params.total_count());
    assert_eq!(parameter_count(&cfg), count_by_formula(&cfg));
    for name in ["paper-base", "smit-s", "tiny"] {
        let c = EncoderConfig::preset(name).unwrap();
        assert_eq!(parameter_count(&c), count_by_formula(&c), "{name}");
    }
    let wide = EncoderConfig { embed_dim: 48, ..cfg.clone() };
    assert!(parameter_count(&wide) > parameter_count(&cfg));
}

#[test]
fn shape_mismatch_names_first_path() {
    let cfg = EncoderConfig::desk();
    let mut params = params_for(&cfg, 3);
    params.insert("encoder.stages.1.blocks.0.norm1.weight", Tensor::zeros(&[7]));
    params.insert("encoder.stages.2.blocks.0.norm1.weight", Tensor::zeros(&[7]));
    match check_params(&cfg, &params) {
        Err(ParamError::ShapeMismatch { path, .. }) => assert_eq!(path, "encoder.stages.1.blocks.0.norm1.weight"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn masking_replaces_tokens_and_hides_content() {
    let cfg = EncoderConfig::tiny();
    let params = params_for(&cfg, 5);
    let vols = random_volumes(1, cfg.input_shape, 6);
    let n = cfg.tokens(0);
    let all = vec![true; n];
    let none = vec![false; n];
    let a = run(&cfg, &params, &vols, Some(&all));
    let b = run(&cfg, &params, &vols, Some(&none));
    assert!(a[0].max_abs_diff(&b[0]).unwrap() > 1e-6);
    assert_eq!(b[0], run(&cfg, &params, &vols, None)[0]);

    // change voxels under masked patches only: outputs are bit-identical
    let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let mut altered = vols.clone();
    for (i, m) in mask.iter().enumerate() {
        if *m {
            altered.data_mut()[i] += 10.0;
        }
    }
    let x = run(&cfg, &params, &vols, Some(&mask));
    let y = run(&cfg, &params, &altered, Some(&mask));
    for (u, v) in x.iter().zip(&y) {
        assert_eq!(u, v);
    }
    let z = run(&cfg, &params, &altered, None);
    assert!(z[0].max_abs_diff(&x[0]).unwrap() > 0.0);
}

#[test]
fn window_attention_is_local() {
    // two windows of 2×2×2 side by side along z
    let (grid, win, c, heads) = ([4, 2, 2], [2, 2, 2], 4, 2);
    let cfg = EncoderConfig { embed_dim: c, heads: [heads, 2, 2, 2], window_size: win, ..EncoderConfig::tiny() };
    let params = params_for(&cfg, 7);
    let mut rng = substream(8, "x");
    let rows = grid_volume(grid);
    let x: Vec<f64> = (0..rows * c).map(|_| rng.random::<f64>() - 0.5).collect();
    // swap the two windows' token contents (rows 0..8 <-> 8..16)
    let half = 8 * c;
    let swapped: Vec<f64> = x[half..].iter().chain(&x[..half]).copied().collect();
    let eval = |data: Vec<f64>| {
        let cache = IndexCache::default();
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &params, false);
        let xv = g.constant(Tensor::from_vec(&[rows, c], data));
        let y = attention(&mut g, &p, &cache, "encoder.stages.0.blocks.0.attn", xv, 1, grid, win, [0; 3], heads);
        g.value(y).data().to_vec()
    };
    let y = eval(x);
    let ys = eval(swapped);
    for i in 0..half {
        assert!((y[i] - ys[half + i]).abs() < 1e-14);
        assert!((y[half + i] - ys[i]).abs() < 1e-14);
    }
}

#[test]
fn pooled_embedding_examples() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::full(&[2 * 8, 5], 1.75));
    let grid = TokenGrid { var: t, batch: 2, grid: [2; 3], channels: 5, stage: 3 };
    let v = pooled_embedding(&mut g, &[grid]);
    assert_eq!(g.shape(v), &[2, 5]);
    assert!(g.value(v).data().iter().all(|&x| (x - 1.75).abs() < 1e-15));

    let mut rng = substream(1, "p");
    let data: Vec<f64> = (0..8 * 3).map(|_| rng.random()).collect();
    let perm: Vec<f64> = data.chunks(3).rev().flatten().copied().collect();
    let a = g.constant(Tensor::from_vec(&[8, 3], data));
    let b = g.constant(Tensor::from_vec(&[8, 3], perm));
    let pa = pooled_embedding(&mut g, &[TokenGrid { var: a, batch: 1, grid: [2; 3], channels: 3, stage: 3 }]);
    let pb = pooled_embedding(&mut g, &[TokenGrid { var: b, batch: 1, grid: [2; 3], channels: 3, stage: 3 }]);
    assert!(g.value(pa).max_abs_diff(g.value(pb)).unwrap() < 1e-15);
}

#[test]
fn forward_is_deterministic() {
    let cfg = EncoderConfig::tiny();
    let params = params_for(&cfg, 9);
    let vols = random_volumes(2, cfg.input_shape, 10);
    let a = run(&cfg, &params, &vols, None);
    let b = run(&cfg, &params, &vols, None);
    for (x, y) in a.iter().zip(&b) {
        let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by);
    }
}

fn loss_of(cfg: &EncoderConfig, params: &ParameterSet, vols: &Tensor, mask: &[bool], weights: &[Vec<f64>]) -> f64 {
    let out = run(cfg, params, vols, Some(mask));
    out.iter().zip(weights).map(|(t, w)| t.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = EncoderConfig::tiny();
    let params = params_for(&cfg, 11);
    let vols = random_volumes(2, cfg.input_shape, 12);
    let n = 2 * cfg.tokens(0);
    let mask: Vec<bool> = (0..n).map(|i| i % 5 == 0).collect();
    let mut rng = substream(13, "w");
    let weights: Vec<Vec<f64>> = (0..4).map(|s| (0..2 * cfg.tokens(s) * cfg.width(s)).map(|_| rng.random::<f64>() - 0.5).collect()).collect();

    let cache = IndexCache::default();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params, true);
    let x = g.constant(vols.clone());
    let out = encode(&cfg, &p, &cache, &mut g, x, Some(&mask)).unwrap();
    let mut terms = Vec::new();
    for (s, w) in out.stages.iter().zip(&weights) {
        let prod = g.mul_const(s.var, w.clone().into());
        terms.push(g.sum(prod));
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = g.add(loss, *t);
    }
    let grads = p.gradients(&g, &g.backward(loss));

    let names: Vec<String> = params.names().cloned().collect();
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for k in 0..40 {
        let name = &names[(k * 7 + rng.random_range(0..names.len())) % names.len()];
        let numel = params.get(name).unwrap().numel();
        let i = rng.random_range(0..numel);
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[i] -= eps;
        let numeric = (loss_of(&cfg, &plus, &vols, &mask, &weights) - loss_of(&cfg, &minus, &vols, &mask, &weights)) / (2.0 * eps);
        let analytic = grads.get(name).unwrap().data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
        checked += 1;
    }
    assert!(checked >= 20);
    assert!(worst < 1e-4);
}
