//! Hierarchical shifted-window attention encoder over 3-D volumes.
//!
//! A volume batch `[B, D, H, W]` is cut into non-overlapping patches, linearly
//! embedded, and passed through four stages of windowed self-attention blocks.
//! Stages are joined by 2³ patch merging, which halves every spatial axis and
//! doubles the channel width. Every stage output is returned as a [`TokenGrid`].

use serde::{Deserialize, Serialize};
use sslbench_autograd::{Graph, Tensor, Var};

use crate::nn::{self, grid_volume, Grid, IndexCache, Init, ParamSpec};
use crate::params::{Bound, ParamError, ParameterSet};
use crate::rng::Rng;

pub const STAGES: usize = 4;
pub const PREFIX: &str = "encoder";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncoderError {
    #[error("input extent {extent} on axis {axis} is not divisible by {divisor}")]
    Indivisible { axis: char, extent: usize, divisor: usize },
    #[error("stage {stage} width {width} is not divisible by {heads} heads")]
    Heads { stage: usize, width: usize, heads: usize },
    #[error("stage {stage} grid {grid:?} admits no usable window for window size {window:?}")]
    Window { stage: usize, grid: Grid, window: Grid },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("mask has {found} entries, expected {expected}")]
    MaskLength { expected: usize, found: usize },
}

const AXES: [char; 3] = ['z', 'y', 'x'];

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub patch_size: Grid,
    pub window_size: Grid,
    pub embed_dim: usize,
    pub input_shape: Grid,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            depths: [1, 1, 2, 1],
            heads: [2, 2, 4, 4],
            patch_size: [2; 3],
            window_size: [4; 3],
            embed_dim: 24,
            input_shape: [32; 3],
            mlp_ratio: 4,
        }
    }

    pub fn paper_base() -> Self {
        Self { depths: [2, 2, 8, 2], heads: [4, 4, 8, 16], embed_dim: 48, input_shape: [96; 3], ..Self::desk() }
    }

    pub fn smit_s() -> Self {
        Self { depths: [2, 2, 18, 2], ..Self::paper_base() }
    }

    pub fn smit_p() -> Self {
        Self { depths: [2, 2, 40, 4], input_shape: [128; 3], ..Self::paper_base() }
    }

    /// Smallest useful configuration, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            depths: [2, 1, 1, 1],
            heads: [1, 1, 2, 2],
            patch_size: [1; 3],
            window_size: [2; 3],
            embed_dim: 4,
            input_shape: [8; 3],
            mlp_ratio: 2,
        }
    }

    pub const PRESETS: [&'static str; 5] = ["desk", "paper-base", "smit-s", "smit-p", "tiny"];

    pub fn preset(name: &str) -> Result<Self, EncoderError> {
        Ok(match name {
            "desk" => Self::desk(),
            "paper-base" => Self::paper_base(),
            "smit-s" => Self::smit_s(),
            "smit-p" => Self::smit_p(),
            "tiny" => Self::tiny(),
            _ => return Err(EncoderError::UnknownPreset(name.to_string())),
        })
    }

    /// Same architecture on a different input extent.
    pub fn with_input(&self, input_shape: Grid) -> Self {
        Self { input_shape, ..self.clone() }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn grid(&self, stage: usize) -> Grid {
        [0, 1, 2].map(|a| self.input_shape[a] / self.patch_size[a] >> stage)
    }

    pub fn tokens(&self, stage: usize) -> usize {
        grid_volume(self.grid(stage))
    }

    /// Window actually used at `stage`: per axis, the largest divisor of the
    /// grid extent not exceeding the configured window.
    pub fn effective_window(&self, stage: usize) -> Grid {
        let grid = self.grid(stage);
        [0, 1, 2].map(|a| (1..=self.window_size[a].min(grid[a])).rev().find(|w| grid[a] % w == 0).unwrap_or(1))
    }

    pub fn shift(&self, stage: usize, block: usize) -> Grid {
        let win = self.effective_window(stage);
        let grid = self.grid(stage);
        if block % 2 == 0 {
            return [0; 3];
        }
        [0, 1, 2].map(|a| if grid[a] > win[a] { win[a] / 2 } else { 0 })
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim == 0 {
            return Err(EncoderError::NonPositive("embed_dim"));
        }
        if self.mlp_ratio == 0 {
            return Err(EncoderError::NonPositive("mlp_ratio"));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(EncoderError::NonPositive("depths"));
        }
        if self.heads.iter().any(|&h| h == 0) {
            return Err(EncoderError::NonPositive("heads"));
        }
        if self.patch_size.iter().chain(&self.window_size).any(|&p| p == 0) {
            return Err(EncoderError::NonPositive("patch and window sizes"));
        }
        let reduction = 1 << (STAGES - 1);
        for a in 0..3 {
            let divisor = self.patch_size[a] * reduction;
            if self.input_shape[a] == 0 || self.input_shape[a] % divisor != 0 {
                return Err(EncoderError::Indivisible { axis: AXES[a], extent: self.input_shape[a], divisor });
            }
        }
        for s in 0..STAGES {
            if self.width(s) % self.heads[s] != 0 {
                return Err(EncoderError::Heads { stage: s, width: self.width(s), heads: self.heads[s] });
            }
            let grid = self.grid(s);
            let win = self.effective_window(s);
            for a in 0..3 {
                let wanted = self.window_size[a].min(grid[a]);
                if 2 * win[a] < wanted {
                    return Err(EncoderError::Window { stage: s, grid, window: self.window_size });
                }
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Every learnable array of the encoder.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let p3 = grid_volume(self.patch_size);
        let mut specs = nn::linear_specs(&format!("{PREFIX}.patch_embed"), p3, self.embed_dim, true);
        specs.push(ParamSpec::new(format!("{PREFIX}.mask_token"), &[self.embed_dim], Init::Normal(0.02)));
        for s in 0..STAGES {
            let c = self.width(s);
            let stage = format!("{PREFIX}.stages.{s}");
            if s > 0 {
                let cin = self.width(s - 1);
                specs.extend(nn::norm_specs(&format!("{stage}.merge.norm"), 8 * cin));
                specs.extend(nn::linear_specs(&format!("{stage}.merge.reduction"), 8 * cin, c, false));
            }
            let win = self.effective_window(s);
            let table = (0..3).map(|a| 2 * win[a] - 1).product::<usize>();
            for b in 0..self.depths[s] {
                let blk = format!("{stage}.blocks.{b}");
                specs.extend(nn::norm_specs(&format!("{blk}.norm1"), c));
                specs.extend(nn::linear_specs(&format!("{blk}.attn.qkv"), c, 3 * c, true));
                specs.push(ParamSpec::new(format!("{blk}.attn.rel_pos_bias"), &[table, self.heads[s]], Init::Normal(0.02)));
                specs.extend(nn::linear_specs(&format!("{blk}.attn.proj"), c, c, true));
                specs.extend(nn::norm_specs(&format!("{blk}.norm2"), c));
                specs.extend(nn::linear_specs(&format!("{blk}.mlp.fc1"), c, self.mlp_ratio * c, true));
                specs.extend(nn::linear_specs(&format!("{blk}.mlp.fc2"), self.mlp_ratio * c, c, true));
            }
            specs.extend(nn::norm_specs(&format!("{stage}.norm_out"), c));
        }
        specs
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        nn::specs_shapes(&self.param_specs())
    }
}

/// Exact number of learnable scalars.
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    cfg.param_specs().iter().map(ParamSpec::numel).sum()
}

pub fn init_params(cfg: &EncoderConfig, rng: &mut Rng) -> ParameterSet {
    nn::init_params(&cfg.param_specs(), rng)
}

/// Rejects parameter sets that do not match `cfg`, naming the first bad path.
pub fn check_params(cfg: &EncoderConfig, params: &ParameterSet) -> Result<(), ParamError> {
    params.check_shapes(&cfg.param_shapes())
}

/// Token rows `[batch · z · y · x, channels]` of one stage.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub var: Var,
    pub batch: usize,
    pub grid: Grid,
    pub channels: usize,
    pub stage: usize,
}

impl TokenGrid {
    pub fn rows(&self) -> usize {
        self.batch * grid_volume(self.grid)
    }
}

pub struct EncoderOutput {
    /// One layer-normalized grid per stage; the next stage merges the
    /// unnormalized residual stream.
    pub stages: Vec<TokenGrid>,
    /// Patch embedding (after masking) followed by every block output.
    pub taps: Vec<TokenGrid>,
}

impl EncoderOutput {
    pub fn last(&self) -> TokenGrid {
        *self.stages.last().expect("four stages")
    }
}

/// Flattened patches of a volume batch `[B, D, H, W]`, shape `[B·G, p³]`.
pub fn patchify(cfg: &EncoderConfig, cache: &IndexCache, g: &mut Graph, volumes: Var) -> Result<Var, EncoderError> {
    let shape = g.shape(volumes).to_vec();
    let b = shape[0];
    let spatial = [shape[1], shape[2], shape[3]];
    for a in 0..3 {
        if spatial[a] % cfg.patch_size[a] != 0 {
            return Err(EncoderError::Indivisible { axis: AXES[a], extent: spatial[a], divisor: cfg.patch_size[a] });
        }
    }
    let idx = cache.patch_embed(b, spatial, cfg.patch_size);
    let tokens = b * grid_volume(spatial) / grid_volume(cfg.patch_size);
    Ok(g.gather(volumes, idx, &[tokens, grid_volume(cfg.patch_size)]))
}

/// Linear patch projection: `[B, D, H, W]` → stage-0-resolution grid with `embed_dim` channels.
pub fn patch_embed(cfg: &EncoderConfig, p: &Bound, cache: &IndexCache, g: &mut Graph, volumes: Var) -> Result<TokenGrid, EncoderError> {
    let shape = g.shape(volumes).to_vec();
    let patches = patchify(cfg, cache, g, volumes)?;
    let var = nn::linear(g, p, &format!("{PREFIX}.patch_embed"), patches);
    let grid = [0, 1, 2].map(|a| shape[a + 1] / cfg.patch_size[a]);
    Ok(TokenGrid { var, batch: shape[0], grid, channels: cfg.embed_dim, stage: 0 })
}

/// Replaces rows flagged in `mask` (one flag per stage-0 token) with the learned mask token.
fn apply_mask(g: &mut Graph, p: &Bound, x: TokenGrid, mask: &[bool]) -> Var {
    let c = x.channels;
    let keep: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat(if m { 0.0 } else { 1.0 }).take(c)).collect();
    let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let token = p.get(&format!("{PREFIX}.mask_token"));
    let tiled: Vec<u32> = (0..mask.len()).flat_map(|_| 0..c as u32).collect();
    let tiled = g.gather(token, tiled.into(), &[mask.len(), c]);
    let kept = g.mul_const(x.var, keep.into());
    let filled = g.mul_const(tiled, fill.into());
    g.add(kept, filled)
}

#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    p: &Bound,
    cache: &IndexCache,
    name: &str,
    x: Var,
    b: usize,
    grid: Grid,
    win: Grid,
    shift: Grid,
    heads: usize,
) -> Var {
    let c = g.value(x).cols();
    let rows = g.value(x).rows();
    let t = grid_volume(win);
    let windows = rows / t;
    let dh = c / heads;
    let part = cache.window_partition(b, grid, win, shift, c);
    let xw = g.gather(x, part, &[rows, c]);
    let qkv = nn::linear(g, p, &format!("{name}.qkv"), xw);
    let split = |g: &mut Graph, which| {
        let idx = cache.split_heads(windows, t, heads, dh, which);
        g.gather(qkv, idx, &[windows * heads, t, dh])
    };
    let q = split(g, 0);
    let k = split(g, 1);
    let v = split(g, 2);
    let q = g.scale(q, (dh as f64).powf(-0.5));
    let logits = g.bmm(q, k, false, true);
    let table = p.get(&format!("{name}.rel_pos_bias"));
    let bias = g.gather(table, cache.relative_bias(win, heads), &[heads, t, t]);
    let mut logits = g.add_broadcast(logits, bias);
    if shift.iter().any(|&s| s > 0) {
        let mask = cache.shift_mask(grid, win, shift, heads);
        let mask = g.constant((*mask).clone());
        logits = g.add_broadcast(logits, mask);
    }
    let attn = g.softmax(logits);
    let out = g.bmm(attn, v, false, false);
    let merged = g.gather(out, cache.merge_heads(windows, t, heads, dh), &[rows, c]);
    let proj = nn::linear(g, p, &format!("{name}.proj"), merged);
    g.gather(proj, cache.window_reverse(b, grid, win, shift, c), &[rows, c])
}

fn block(g: &mut Graph, p: &Bound, cache: &IndexCache, cfg: &EncoderConfig, s: usize, blk: usize, x: TokenGrid) -> TokenGrid {
    let name = format!("{PREFIX}.stages.{s}.blocks.{blk}");
    let h = nn::layer_norm(g, p, &format!("{name}.norm1"), x.var);
    let h = attention(g, p, cache, &format!("{name}.attn"), h, x.batch, x.grid, cfg.effective_window(s), cfg.shift(s, blk), cfg.heads[s]);
    let y = g.add(x.var, h);
    let h = nn::layer_norm(g, p, &format!("{name}.norm2"), y);
    let h = nn::linear(g, p, &format!("{name}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = nn::linear(g, p, &format!("{name}.mlp.fc2"), h);
    TokenGrid { var: g.add(y, h), ..x }
}

fn merge(g: &mut Graph, p: &Bound, cache: &IndexCache, cfg: &EncoderConfig, s: usize, x: TokenGrid) -> TokenGrid {
    let name = format!("{PREFIX}.stages.{s}.merge");
    let grid = x.grid.map(|d| d / 2);
    let rows = x.batch * grid_volume(grid);
    let cat = g.gather(x.var, cache.patch_merge(x.batch, x.grid, x.channels), &[rows, 8 * x.channels]);
    let h = nn::layer_norm(g, p, &format!("{name}.norm"), cat);
    let var = nn::linear(g, p, &format!("{name}.reduction"), h);
    TokenGrid { var, batch: x.batch, grid, channels: cfg.width(s), stage: s }
}

/// Runs the encoder on a `[B, D, H, W]` batch. `mask` flags stage-0 tokens
/// (batch-major, then z, y, x) to be replaced by the mask token.
pub fn encode(
    cfg: &EncoderConfig,
    p: &Bound,
    cache: &IndexCache,
    g: &mut Graph,
    volumes: Var,
    mask: Option<&[bool]>,
) -> Result<EncoderOutput, EncoderError> {
    let shape = g.shape(volumes).to_vec();
    let b = shape[0];
    let spatial = [shape[1], shape[2], shape[3]];
    let run_cfg = cfg.with_input(spatial);
    if spatial != cfg.input_shape {
        run_cfg.validate()?;
        for s in 0..STAGES {
            if run_cfg.effective_window(s) != cfg.effective_window(s) {
                return Err(EncoderError::Window { stage: s, grid: run_cfg.grid(s), window: cfg.effective_window(s) });
            }
        }
    }
    let mut x = patch_embed(cfg, p, cache, g, volumes)?;
    if let Some(mask) = mask {
        if mask.len() != x.rows() {
            return Err(EncoderError::MaskLength { expected: x.rows(), found: mask.len() });
        }
        if mask.iter().any(|&m| m) {
            x.var = apply_mask(g, p, x, mask);
        }
    }
    let mut taps = vec![x];
    let mut stages = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        if s > 0 {
            x = merge(g, p, cache, &run_cfg, s, x);
        }
        for blk in 0..cfg.depths[s] {
            x = block(g, p, cache, &run_cfg, s, blk, x);
            taps.push(x);
        }
        let normed = nn::layer_norm(g, p, &format!("{PREFIX}.stages.{s}.norm_out"), x.var);
        stages.push(TokenGrid { var: normed, ..x });
    }
    debug_assert_eq!(b, x.batch);
    Ok(EncoderOutput { stages, taps })
}

/// Global average pool of the last-stage grid: `[B, C₃]`.
pub fn pooled_embedding(g: &mut Graph, features: &[TokenGrid]) -> Var {
    let last = features.last().expect("nonempty feature list");
    g.mean_groups(last.var, last.batch)
}

/// Stacks volumes into a `[B, D, H, W]` tensor.
pub fn stack_volumes(volumes: &[&[f64]], shape: Grid) -> Tensor {
    let mut data = Vec::with_capacity(volumes.len() * grid_volume(shape));
    for v in volumes {
        assert_eq!(v.len(), grid_volume(shape), "volume size");
        data.extend_from_slice(v);
    }
    Tensor::from_vec(&[volumes.len(), shape[0], shape[1], shape[2]], data)
}

#[cfg(test)]
mod tests;
