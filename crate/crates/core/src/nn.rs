//! Layer building blocks shared by the encoder, the pretext heads and the
//! segmentation decoder.
//!
//! Token grids are stored channels-last as `[batch, z, y, x, channels]` and
//! flattened to `rows × channels`. Spatial rearrangements (window partition,
//! cyclic shift, patch merging, im2col, pixel shuffle) are all expressed as
//! gathers over precomputed index tables, cached per shape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sslbench_autograd::{BatchStats, Graph, Tensor, Var, GATHER_ZERO};

use crate::params::{Bound, ParameterSet};
use crate::rng::Rng;

pub type Grid = [usize; 3];

pub fn grid_volume(g: Grid) -> usize {
    g[0] * g[1] * g[2]
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    XavierUniform { fan_in: usize, fan_out: usize },
    KaimingUniform { fan_in: usize },
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn specs_shapes(specs: &[ParamSpec]) -> Vec<(String, Vec<usize>)> {
    specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect()
}

/// Draws every spec in order from `rng`.
pub fn init_params(specs: &[ParamSpec], rng: &mut Rng) -> ParameterSet {
    let mut out = ParameterSet::new();
    for s in specs {
        let n = s.numel();
        let data: Vec<f64> = match s.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::KaimingUniform { fan_in } => {
                let a = (3.0 / fan_in as f64).sqrt() * 2f64.sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std > 0");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        out.insert(s.name.clone(), Tensor::from_vec(&s.shape, data));
    }
    out
}

pub fn linear_specs(name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], Init::XavierUniform { fan_in, fan_out })];
    if bias {
        v.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Zeros));
    }
    v
}

pub fn norm_specs(name: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.weight"), &[width], Init::Ones),
        ParamSpec::new(format!("{name}.bias"), &[width], Init::Zeros),
    ]
}

pub fn conv_specs(name: &str, kernel: usize, cin: usize, cout: usize) -> Vec<ParamSpec> {
    let fan_in = kernel.pow(3) * cin;
    vec![
        ParamSpec::new(format!("{name}.weight"), &[fan_in, cout], Init::KaimingUniform { fan_in }),
        ParamSpec::new(format!("{name}.bias"), &[cout], Init::Zeros),
    ]
}

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.get(&format!("{name}.weight"));
    let y = g.matmul(x, w);
    match p.try_get(&format!("{name}.bias")) {
        Some(b) => g.add_broadcast(y, b),
        None => y,
    }
}

pub fn layer_norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    g.layer_norm(x, w, b, LN_EPS)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum IndexKey {
    Window { b: usize, grid: Grid, win: Grid, shift: Grid, c: usize },
    Unwindow { b: usize, grid: Grid, win: Grid, shift: Grid, c: usize },
    SplitHeads { windows: usize, t: usize, heads: usize, dh: usize, which: usize },
    MergeHeads { windows: usize, t: usize, heads: usize, dh: usize },
    RelBias { win: Grid, heads: usize },
    Merge { b: usize, grid: Grid, c: usize },
    PatchEmbed { b: usize, shape: Grid, patch: Grid },
    Im2col { b: usize, grid: Grid, c: usize, k: usize },
    Shuffle { b: usize, grid: Grid, c: usize },
}

/// Memoized gather tables.
#[derive(Default)]
pub struct IndexCache {
    map: RefCell<HashMap<IndexKey, Rc<[u32]>>>,
    consts: RefCell<HashMap<(Grid, Grid, Grid, usize), Rc<Tensor>>>,
}

impl IndexCache {
    fn get(&self, key: IndexKey, build: impl FnOnce() -> Vec<u32>) -> Rc<[u32]> {
        if let Some(v) = self.map.borrow().get(&key) {
            return v.clone();
        }
        let v: Rc<[u32]> = build().into();
        self.map.borrow_mut().insert(key, v.clone());
        v
    }

    fn window_rows(b: usize, grid: Grid, win: Grid, shift: Grid) -> Vec<usize> {
        let nw = [grid[0] / win[0], grid[1] / win[1], grid[2] / win[2]];
        let mut rows = Vec::with_capacity(b * grid_volume(grid));
        for bi in 0..b {
            for wz in 0..nw[0] {
                for wy in 0..nw[1] {
                    for wx in 0..nw[2] {
                        for iz in 0..win[0] {
                            for iy in 0..win[1] {
                                for ix in 0..win[2] {
                                    let z = (wz * win[0] + iz + shift[0]) % grid[0];
                                    let y = (wy * win[1] + iy + shift[1]) % grid[1];
                                    let x = (wx * win[2] + ix + shift[2]) % grid[2];
                                    rows.push(((bi * grid[0] + z) * grid[1] + y) * grid[2] + x);
                                }
                            }
                        }
                    }
                }
            }
        }
        rows
    }

    fn expand(rows: impl IntoIterator<Item = usize>, c: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for r in rows {
            out.extend((0..c).map(|ch| (r * c + ch) as u32));
        }
        out
    }

    /// Grid order → window order (after a cyclic shift of `-shift`).
    pub fn window_partition(&self, b: usize, grid: Grid, win: Grid, shift: Grid, c: usize) -> Rc<[u32]> {
        self.get(IndexKey::Window { b, grid, win, shift, c }, || {
            Self::expand(Self::window_rows(b, grid, win, shift), c)
        })
    }

    /// Inverse of [`Self::window_partition`].
    pub fn window_reverse(&self, b: usize, grid: Grid, win: Grid, shift: Grid, c: usize) -> Rc<[u32]> {
        self.get(IndexKey::Unwindow { b, grid, win, shift, c }, || {
            let rows = Self::window_rows(b, grid, win, shift);
            let mut inv = vec![0usize; rows.len()];
            for (i, r) in rows.iter().enumerate() {
                inv[*r] = i;
            }
            Self::expand(inv, c)
        })
    }

    /// `[windows*t, 3*heads*dh]` → `[windows*heads, t, dh]` for q (0), k (1) or v (2).
    pub fn split_heads(&self, windows: usize, t: usize, heads: usize, dh: usize, which: usize) -> Rc<[u32]> {
        self.get(IndexKey::SplitHeads { windows, t, heads, dh, which }, || {
            let c = heads * dh;
            let mut out = Vec::with_capacity(windows * t * c);
            for n in 0..windows {
                for h in 0..heads {
                    for ti in 0..t {
                        for d in 0..dh {
                            out.push(((n * t + ti) * 3 * c + which * c + h * dh + d) as u32);
                        }
                    }
                }
            }
            out
        })
    }

    /// `[windows*heads, t, dh]` → `[windows*t, heads*dh]`.
    pub fn merge_heads(&self, windows: usize, t: usize, heads: usize, dh: usize) -> Rc<[u32]> {
        self.get(IndexKey::MergeHeads { windows, t, heads, dh }, || {
            let mut out = Vec::with_capacity(windows * t * heads * dh);
            for n in 0..windows {
                for ti in 0..t {
                    for h in 0..heads {
                        for d in 0..dh {
                            out.push((((n * heads + h) * t + ti) * dh + d) as u32);
                        }
                    }
                }
            }
            out
        })
    }

    /// Relative-position table `[(2w-1)^3, heads]` → bias `[heads, t, t]`.
    pub fn relative_bias(&self, win: Grid, heads: usize) -> Rc<[u32]> {
        self.get(IndexKey::RelBias { win, heads }, || {
            let coords: Vec<[usize; 3]> = (0..win[0])
                .flat_map(|z| (0..win[1]).flat_map(move |y| (0..win[2]).map(move |x| [z, y, x])))
                .collect();
            let t = coords.len();
            let span = [2 * win[0] - 1, 2 * win[1] - 1, 2 * win[2] - 1];
            let mut out = Vec::with_capacity(heads * t * t);
            for h in 0..heads {
                for ci in &coords {
                    for cj in &coords {
                        let r = [0, 1, 2].map(|a| ci[a] + win[a] - 1 - cj[a]);
                        let rel = (r[0] * span[1] + r[1]) * span[2] + r[2];
                        out.push((rel * heads + h) as u32);
                    }
                }
            }
            out
        })
    }

    /// Additive attention mask `[windows, heads, t, t]` separating regions that the
    /// cyclic shift brought together.
    pub fn shift_mask(&self, grid: Grid, win: Grid, shift: Grid, heads: usize) -> Rc<Tensor> {
        let key = (grid, win, shift, heads);
        if let Some(m) = self.consts.borrow().get(&key) {
            return m.clone();
        }
        let region = |p: usize, a: usize| -> usize {
            if shift[a] == 0 || p < grid[a] - win[a] {
                0
            } else if p < grid[a] - shift[a] {
                1
            } else {
                2
            }
        };
        let nw = [grid[0] / win[0], grid[1] / win[1], grid[2] / win[2]];
        let t = grid_volume(win);
        let mut data = Vec::with_capacity(grid_volume(nw) * heads * t * t);
        for wz in 0..nw[0] {
            for wy in 0..nw[1] {
                for wx in 0..nw[2] {
                    let labels: Vec<usize> = (0..t)
                        .map(|i| {
                            let (iz, iy, ix) = (i / (win[1] * win[2]), (i / win[2]) % win[1], i % win[2]);
                            region(wz * win[0] + iz, 0) * 9 + region(wy * win[1] + iy, 1) * 3 + region(wx * win[2] + ix, 2)
                        })
                        .collect();
                    for _ in 0..heads {
                        for li in &labels {
                            for lj in &labels {
                                data.push(if li == lj { 0.0 } else { MASKED_LOGIT });
                            }
                        }
                    }
                }
            }
        }
        let m = Rc::new(Tensor::from_vec(&[grid_volume(nw), heads, t, t], data));
        self.consts.borrow_mut().insert(key, m.clone());
        m
    }

    /// `[b, grid, c]` → `[b, grid/2, 8c]`, neighbours ordered (dz, dy, dx).
    pub fn patch_merge(&self, b: usize, grid: Grid, c: usize) -> Rc<[u32]> {
        self.get(IndexKey::Merge { b, grid, c }, || {
            let half = [grid[0] / 2, grid[1] / 2, grid[2] / 2];
            let mut out = Vec::with_capacity(b * grid_volume(grid) * c);
            for bi in 0..b {
                for z in 0..half[0] {
                    for y in 0..half[1] {
                        for x in 0..half[2] {
                            for k in 0..8 {
                                let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
                                let row = ((bi * grid[0] + 2 * z + dz) * grid[1] + 2 * y + dy) * grid[2] + 2 * x + dx;
                                out.extend((0..c).map(|ch| (row * c + ch) as u32));
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// Voxels `[b, shape]` → patch rows `[b, shape/patch, patch volume]`.
    pub fn patch_embed(&self, b: usize, shape: Grid, patch: Grid) -> Rc<[u32]> {
        self.get(IndexKey::PatchEmbed { b, shape, patch }, || {
            let g = [shape[0] / patch[0], shape[1] / patch[1], shape[2] / patch[2]];
            let mut out = Vec::with_capacity(b * grid_volume(shape));
            for bi in 0..b {
                for gz in 0..g[0] {
                    for gy in 0..g[1] {
                        for gx in 0..g[2] {
                            for pz in 0..patch[0] {
                                for py in 0..patch[1] {
                                    for px in 0..patch[2] {
                                        let z = gz * patch[0] + pz;
                                        let y = gy * patch[1] + py;
                                        let x = gx * patch[2] + px;
                                        out.push((((bi * shape[0] + z) * shape[1] + y) * shape[2] + x) as u32);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// Zero-padded `k³` neighbourhoods: `[b, grid, c]` → `[b, grid, k³·c]`.
    pub fn im2col(&self, b: usize, grid: Grid, c: usize, k: usize) -> Rc<[u32]> {
        self.get(IndexKey::Im2col { b, grid, c, k }, || {
            let pad = (k / 2) as isize;
            let mut out = Vec::with_capacity(b * grid_volume(grid) * k * k * k * c);
            let dims = grid.map(|d| d as isize);
            for bi in 0..b {
                for z in 0..dims[0] {
                    for y in 0..dims[1] {
                        for x in 0..dims[2] {
                            for kz in 0..k as isize {
                                for ky in 0..k as isize {
                                    for kx in 0..k as isize {
                                        let (zz, yy, xx) = (z + kz - pad, y + ky - pad, x + kx - pad);
                                        let inside = (0..dims[0]).contains(&zz) && (0..dims[1]).contains(&yy) && (0..dims[2]).contains(&xx);
                                        if inside {
                                            let row = ((bi as isize * dims[0] + zz) * dims[1] + yy) * dims[2] + xx;
                                            out.extend((0..c).map(|ch| (row as usize * c + ch) as u32));
                                        } else {
                                            out.extend(std::iter::repeat(GATHER_ZERO).take(c));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// `[b, grid, 8c]` → `[b, 2·grid, c]`, the inverse layout of [`Self::patch_merge`].
    pub fn pixel_shuffle(&self, b: usize, grid: Grid, c: usize) -> Rc<[u32]> {
        self.get(IndexKey::Shuffle { b, grid, c }, || {
            let up = [grid[0] * 2, grid[1] * 2, grid[2] * 2];
            let mut out = Vec::with_capacity(b * grid_volume(up) * c);
            for bi in 0..b {
                for z in 0..up[0] {
                    for y in 0..up[1] {
                        for x in 0..up[2] {
                            let row = ((bi * grid[0] + z / 2) * grid[1] + y / 2) * grid[2] + x / 2;
                            let k = ((z % 2) << 2) | ((y % 2) << 1) | (x % 2);
                            out.extend((0..c).map(|ch| (row * 8 * c + k * c + ch) as u32));
                        }
                    }
                }
            }
            out
        })
    }
}

/// Selects whole rows of a `[rows, c]` tensor (not cached: row sets vary per step).
pub fn select_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Var {
    let c = g.value(x).cols();
    let idx: Vec<u32> = rows.iter().flat_map(|&r| (0..c).map(move |ch| (r * c + ch) as u32)).collect();
    g.gather(x, idx.into(), &[rows.len(), c])
}

/// Logit added to attention pairs that must not interact.
pub const MASKED_LOGIT: f64 = -1e9;

/// Batch-norm running statistics update; the running variance uses the unbiased
/// batch variance.
pub fn update_running_stats(buffers: &mut ParameterSet, name: &str, stats: &BatchStats) {
    let n = stats.count as f64;
    let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
    if let Some(m) = buffers.get_mut(&format!("{name}.running_mean")) {
        for (r, s) in m.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
        }
    }
    if let Some(v) = buffers.get_mut(&format!("{name}.running_var")) {
        for (r, s) in v.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * unbias;
        }
    }
}

pub fn bn_buffer_specs(name: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.running_mean"), &[width], Init::Zeros),
        ParamSpec::new(format!("{name}.running_var"), &[width], Init::Ones),
    ]
}

/// Whether batch norm normalizes with batch statistics (and reports them) or with
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution (zero padding, stride 1) followed by batch norm and LeakyReLU.
/// Appends the batch statistics to `stats` in training mode.
#[allow(clippy::too_many_arguments)]
pub fn conv_bn_act(
    g: &mut Graph,
    p: &Bound,
    buffers: &ParameterSet,
    cache: &IndexCache,
    name: &str,
    x: Var,
    b: usize,
    grid: Grid,
    kernel: usize,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Var {
    let cin = g.value(x).cols();
    let cols = if kernel == 1 {
        x
    } else {
        let idx = cache.im2col(b, grid, cin, kernel);
        let rows = b * grid_volume(grid);
        g.gather(x, idx, &[rows, kernel.pow(3) * cin])
    };
    let y = linear(g, p, &format!("{name}.conv"), cols);
    let gamma = p.get(&format!("{name}.bn.weight"));
    let beta = p.get(&format!("{name}.bn.bias"));
    let bn_name = format!("{name}.bn");
    let normed = match mode {
        Mode::Train => {
            let (out, s) = g.batch_norm_train(y, gamma, beta, BN_EPS);
            stats.push((bn_name, s));
            out
        }
        Mode::Eval => {
            let mean = buffers.get(&format!("{bn_name}.running_mean")).expect("running mean").data().to_vec();
            let var = buffers.get(&format!("{bn_name}.running_var")).expect("running var").data().to_vec();
            g.batch_norm_eval(y, gamma, beta, &mean, &var, BN_EPS)
        }
    };
    g.leaky_relu(normed, LEAKY_SLOPE)
}

pub fn conv_bn_act_specs(name: &str, kernel: usize, cin: usize, cout: usize) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
    let mut params = conv_specs(&format!("{name}.conv"), kernel, cin, cout);
    params.extend(norm_specs(&format!("{name}.bn"), cout));
    (params, bn_buffer_specs(&format!("{name}.bn"), cout))
}

/// Stride-2 transposed convolution with a 2³ kernel: per-token linear map to eight
/// children, then a pixel shuffle. Output `[b, 2·grid, cout]`.
pub fn upsample2(g: &mut Graph, p: &Bound, cache: &IndexCache, name: &str, x: Var, b: usize, grid: Grid) -> Var {
    let w = p.get(&format!("{name}.weight"));
    let cout = g.shape(w)[1] / 8;
    let y = g.matmul(x, w);
    let idx = cache.pixel_shuffle(b, grid, cout);
    let rows = b * grid_volume(grid) * 8;
    let up = g.gather(y, idx, &[rows, cout]);
    let bias = p.get(&format!("{name}.bias"));
    g.add_broadcast(up, bias)
}

pub fn upsample2_specs(name: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.weight"), &[cin, 8 * cout], Init::XavierUniform { fan_in: cin, fan_out: cout }),
        ParamSpec::new(format!("{name}.bias"), &[cout], Init::Zeros),
    ]
}
