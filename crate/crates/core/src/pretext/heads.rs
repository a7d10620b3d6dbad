//! Method-specific heads attached to the encoder during pretraining.

use sslbench_autograd::{Graph, Var};

use super::{DistillConfig, Method, MethodConfig};
use crate::encoder::{EncoderConfig, TokenGrid, STAGES};
use crate::nn::{self, IndexCache, ParamSpec};
use crate::params::Bound;

pub const PIXEL_DECODER: &str = "pixel_decoder";
pub const GLOBAL_HEAD: &str = "global_head";
pub const PATCH_HEAD: &str = "patch_head";
pub const CONTRAST_HEAD: &str = "contrast_head";
pub const ROTATION_HEAD: &str = "rotation_head";

/// Number of 2× upsamplings from the last stage back to voxels.
pub fn decoder_steps(cfg: &EncoderConfig) -> usize {
    let p = cfg.patch_size[0];
    assert!(cfg.patch_size.iter().all(|&q| q == p) && p.is_power_of_two(), "pixel decoder needs a cubic power-of-two patch");
    p.trailing_zeros() as usize + STAGES - 1
}

fn decoder_width(cfg: &EncoderConfig, step: usize) -> usize {
    (cfg.width(STAGES - 1) >> (step + 1)).max(8)
}

pub fn pixel_decoder_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = cfg.width(STAGES - 1);
    for i in 0..decoder_steps(cfg) {
        let cout = decoder_width(cfg, i);
        specs.extend(nn::upsample2_specs(&format!("{PIXEL_DECODER}.up{i}"), cin, cout));
        cin = cout;
    }
    specs.extend(nn::linear_specs(&format!("{PIXEL_DECODER}.out"), cin, 1, true));
    specs
}

/// Last-stage tokens → one value per voxel, `[B·D·H·W, 1]` in volume order.
pub fn pixel_decoder(g: &mut Graph, p: &Bound, cache: &IndexCache, cfg: &EncoderConfig, last: TokenGrid) -> Var {
    let mut x = last.var;
    let mut grid = last.grid;
    for i in 0..decoder_steps(cfg) {
        x = nn::upsample2(g, p, cache, &format!("{PIXEL_DECODER}.up{i}"), x, last.batch, grid);
        x = g.gelu(x);
        grid = grid.map(|d| d * 2);
    }
    nn::linear(g, p, &format!("{PIXEL_DECODER}.out"), x)
}

/// MLP with an L2-normalized bottleneck and, if `out` is given, a final
/// bias-free projection to `out` logits.
pub fn projection_specs(name: &str, input: usize, hidden: usize, bottleneck: usize, out: Option<usize>) -> Vec<ParamSpec> {
    let mut specs = nn::linear_specs(&format!("{name}.fc1"), input, hidden, true);
    specs.extend(nn::linear_specs(&format!("{name}.fc2"), hidden, hidden, true));
    specs.extend(nn::linear_specs(&format!("{name}.fc3"), hidden, bottleneck, true));
    if let Some(k) = out {
        specs.extend(nn::linear_specs(&format!("{name}.last"), bottleneck, k, false));
    }
    specs
}

pub fn projection(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let h = nn::linear(g, p, &format!("{name}.fc1"), x);
    let h = g.gelu(h);
    let h = nn::linear(g, p, &format!("{name}.fc2"), h);
    let h = g.gelu(h);
    let h = nn::linear(g, p, &format!("{name}.fc3"), h);
    let z = g.l2_normalize_rows(h, 1e-12);
    if p.try_get(&format!("{name}.last.weight")).is_some() {
        nn::linear(g, p, &format!("{name}.last"), z)
    } else {
        z
    }
}

/// Heads used by `method`, in a fixed order.
pub fn head_specs(method: &MethodConfig, enc: &EncoderConfig, distill: &DistillConfig) -> Vec<ParamSpec> {
    let c_last = enc.width(STAGES - 1);
    let hidden = 4 * enc.embed_dim;
    let k = distill.head_output_dim;
    let bn = distill.bottleneck_dim;
    let global = || projection_specs(GLOBAL_HEAD, c_last, hidden, bn, Some(k));
    let patch = || projection_specs(PATCH_HEAD, enc.embed_dim, hidden, bn, Some(k));
    let contrast = || projection_specs(CONTRAST_HEAD, c_last, hidden, bn, None);
    let rotation = || nn::linear_specs(ROTATION_HEAD, c_last, method.rotation_classes, true);
    match method.method {
        Method::Simmim | Method::Inpaint | Method::Recon => pixel_decoder_specs(enc),
        Method::Contrastive => contrast(),
        Method::Rotation => rotation(),
        Method::Dino => global(),
        Method::Ibot => [global(), patch()].concat(),
        Method::Smit => [pixel_decoder_specs(enc), global(), patch()].concat(),
        Method::SwinunetrMulti => [rotation(), pixel_decoder_specs(enc), contrast()].concat(),
    }
}
