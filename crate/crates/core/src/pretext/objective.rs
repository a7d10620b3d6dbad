//! Batches and per-method loss assembly.

use std::collections::BTreeMap;

use rand::Rng as _;
use sslbench_autograd::{Graph, Tensor, Var};

use super::augment::{make_view_pair, mask_voxels, rotate_axial};
use super::heads::{self, CONTRAST_HEAD, GLOBAL_HEAD, PATCH_HEAD, ROTATION_HEAD};
use super::losses;
use super::{sample_mask, DistillConfig, MaskSpec, Method, MethodConfig, PretextError};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::nn::{self, Grid, IndexCache};
use crate::params::Bound;
use crate::rng::Rng;

pub const GLOBAL_CENTER: &str = "global";
pub const PATCH_CENTER: &str = "patch";

/// One pretraining batch. Every field is filled regardless of method so that
/// batches depend only on the sampling stream.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub shape: Grid,
    pub view1: Vec<Vec<f64>>,
    pub view2: Vec<Vec<f64>>,
    pub mask1: Vec<MaskSpec>,
    pub mask2: Vec<MaskSpec>,
    pub rot1: Vec<usize>,
    pub rot2: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A source volume: id, voxels, extent.
pub type Source<'a> = (&'a str, &'a [f64], Grid);

pub fn build_batch(method: &MethodConfig, enc: &EncoderConfig, sources: &[Source<'_>], rng: &mut Rng) -> Result<Batch, PretextError> {
    if sources.is_empty() {
        return Err(PretextError::EmptyBatch);
    }
    let crop = enc.input_shape;
    let grid = enc.grid(0);
    let mut b = Batch {
        ids: Vec::new(),
        shape: crop,
        view1: Vec::new(),
        view2: Vec::new(),
        mask1: Vec::new(),
        mask2: Vec::new(),
        rot1: Vec::new(),
        rot2: Vec::new(),
    };
    for &(id, data, shape) in sources {
        if (0..3).any(|a| shape[a] < crop[a]) {
            return Err(PretextError::Shape(format!("volume {id} {shape:?} smaller than crop {crop:?}")));
        }
        let pair = make_view_pair(id, data, shape, crop, rng);
        b.ids.push(id.to_string());
        b.view1.push(pair.view1);
        b.view2.push(pair.view2);
        b.mask1.push(sample_mask(grid, method.mask_ratio, rng)?);
        b.mask2.push(sample_mask(grid, method.mask_ratio, rng)?);
        b.rot1.push(rng.random_range(0..method.rotation_classes));
        b.rot2.push(rng.random_range(0..method.rotation_classes));
    }
    Ok(b)
}

pub struct LossOutput {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
    /// Teacher logits per center, for the center update.
    pub teacher_logits: BTreeMap<&'static str, Tensor>,
}

/// Everything a loss evaluation reads besides parameters.
pub struct Context<'a> {
    pub method: &'a MethodConfig,
    pub encoder: &'a EncoderConfig,
    pub distill: &'a DistillConfig,
    pub cache: &'a IndexCache,
    pub centers: &'a BTreeMap<String, Vec<f64>>,
    pub tau_t: f64,
}

fn stack(g: &mut Graph, views: &[&Vec<f64>], shape: Grid) -> Var {
    let refs: Vec<&[f64]> = views.iter().map(|v| v.as_slice()).collect();
    g.constant(encoder::stack_volumes(&refs, shape))
}

fn concat_flags(masks: &[MaskSpec]) -> Vec<bool> {
    masks.iter().flat_map(MaskSpec::flags).collect()
}

fn concat_voxel_flags(masks: &[MaskSpec], patch: Grid) -> Vec<bool> {
    masks.iter().flat_map(|m| m.voxel_flags(patch)).collect()
}

fn masked_rows(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

fn encode(ctx: &Context<'_>, g: &mut Graph, p: &Bound, input: Var, mask: Option<&[bool]>) -> Result<EncoderOutput, PretextError> {
    Ok(encoder::encode(ctx.encoder, p, ctx.cache, g, input, mask)?)
}

fn center<'c>(ctx: &'c Context<'_>, name: &str) -> &'c [f64] {
    ctx.centers.get(name).map(Vec::as_slice).expect("center initialized")
}

/// Teacher global logits on view 1 and patch logits on the unmasked view 2.
fn teacher_targets(ctx: &Context<'_>, g: &mut Graph, teacher: &Bound, batch: &Batch, patch_rows: Option<&[usize]>) -> Result<(Var, Option<Var>), PretextError> {
    let b = batch.len();
    let v1: Vec<&Vec<f64>> = batch.view1.iter().collect();
    let x1 = stack(g, &v1, batch.shape);
    let out1 = encode(ctx, g, teacher, x1, None)?;
    let pooled = encoder::pooled_embedding(g, &out1.stages);
    let global = heads::projection(g, teacher, GLOBAL_HEAD, pooled);
    let patch = match patch_rows {
        Some(rows) => {
            let v2: Vec<&Vec<f64>> = batch.view2.iter().collect();
            let x2 = stack(g, &v2, batch.shape);
            let out2 = encode(ctx, g, teacher, x2, None)?;
            let tokens = nn::select_rows(g, out2.stages[0].var, rows);
            Some(heads::projection(g, teacher, PATCH_HEAD, tokens))
        }
        None => None,
    };
    debug_assert_eq!(g.shape(global)[0], b);
    Ok((global, patch))
}

/// Builds the loss of `ctx.method` for one batch.
pub fn method_loss(ctx: &Context<'_>, g: &mut Graph, student: &Bound, teacher: Option<&Bound>, batch: &Batch) -> Result<LossOutput, PretextError> {
    let cfg = ctx.method;
    let enc = ctx.encoder;
    let shape = batch.shape;
    let patch = enc.patch_size;
    let v1: Vec<&Vec<f64>> = batch.view1.iter().collect();
    let v2: Vec<&Vec<f64>> = batch.view2.iter().collect();
    let target2: Vec<f64> = batch.view2.concat();
    let mut teacher_logits = BTreeMap::new();
    let need_teacher = || teacher.ok_or_else(|| PretextError::Shape("distillation needs a teacher".into()));

    let (total, parts) = match cfg.method {
        Method::Simmim => {
            let flags = concat_flags(&batch.mask2);
            let x = stack(g, &v2, shape);
            let out = encode(ctx, g, student, x, Some(&flags))?;
            let pred = heads::pixel_decoder(g, student, ctx.cache, enc, out.last());
            let l = losses::loss_simmim(g, pred, &target2, &concat_voxel_flags(&batch.mask2, patch))?;
            (l, vec![("mim", l)])
        }
        Method::Inpaint => {
            let vflags = concat_voxel_flags(&batch.mask2, patch);
            let masked: Vec<Vec<f64>> = batch.view2.iter().zip(vflags.chunks(target2.len() / batch.len())).map(|(v, f)| mask_voxels(v, f)).collect();
            let x = stack(g, &masked.iter().collect::<Vec<_>>(), shape);
            let out = encode(ctx, g, student, x, None)?;
            let pred = heads::pixel_decoder(g, student, ctx.cache, enc, out.last());
            let l = losses::loss_inpaint(g, pred, &target2)?;
            (l, vec![("inpaint", l)])
        }
        Method::Recon => {
            let x = stack(g, &v2, shape);
            let out = encode(ctx, g, student, x, None)?;
            let pred = heads::pixel_decoder(g, student, ctx.cache, enc, out.last());
            let l = losses::loss_recon(g, pred, &target2)?;
            (l, vec![("recon", l)])
        }
        Method::Contrastive => {
            let both: Vec<&Vec<f64>> = v1.iter().chain(&v2).copied().collect();
            let x = stack(g, &both, shape);
            let out = encode(ctx, g, student, x, None)?;
            let pooled = encoder::pooled_embedding(g, &out.stages);
            let emb = heads::projection(g, student, CONTRAST_HEAD, pooled);
            let l = losses::loss_infonce(g, emb, &pair_halves(batch.len()), cfg.temperature)?;
            (l, vec![("contrast", l)])
        }
        Method::Rotation => {
            let rotated: Vec<Vec<f64>> = batch.view2.iter().zip(&batch.rot2).map(|(v, &k)| rotate_axial(v, shape, k).0).collect();
            let x = stack(g, &rotated.iter().collect::<Vec<_>>(), shape);
            let out = encode(ctx, g, student, x, None)?;
            let pooled = encoder::pooled_embedding(g, &out.stages);
            let logits = nn::linear(g, student, ROTATION_HEAD, pooled);
            let l = losses::loss_rotation(g, logits, &batch.rot2)?;
            (l, vec![("rotation", l)])
        }
        Method::Dino => {
            let teacher = need_teacher()?;
            let (tg, _) = teacher_targets(ctx, g, teacher, batch, None)?;
            let x = stack(g, &v2, shape);
            let out = encode(ctx, g, student, x, None)?;
            let pooled = encoder::pooled_embedding(g, &out.stages);
            let sg = heads::projection(g, student, GLOBAL_HEAD, pooled);
            let l = losses::distill_ce(g, tg, sg, center(ctx, GLOBAL_CENTER), ctx.tau_t, ctx.distill.tau_s)?;
            teacher_logits.insert(GLOBAL_CENTER, g.value(tg).clone());
            (l, vec![("global", l)])
        }
        Method::Ibot | Method::Smit => {
            let teacher = need_teacher()?;
            let flags = concat_flags(&batch.mask2);
            let rows = masked_rows(&flags);
            if rows.is_empty() {
                return Err(PretextError::EmptyMask);
            }
            let (tg, tp) = teacher_targets(ctx, g, teacher, batch, Some(&rows))?;
            let tp = tp.expect("patch targets requested");
            let x = stack(g, &v2, shape);
            let out = encode(ctx, g, student, x, Some(&flags))?;
            let pooled = encoder::pooled_embedding(g, &out.stages);
            let sg = heads::projection(g, student, GLOBAL_HEAD, pooled);
            let tokens = nn::select_rows(g, out.stages[0].var, &rows);
            let sp = heads::projection(g, student, PATCH_HEAD, tokens);
            let global = losses::distill_ce(g, tg, sg, center(ctx, GLOBAL_CENTER), ctx.tau_t, ctx.distill.tau_s)?;
            let patch_l = losses::distill_ce(g, tp, sp, center(ctx, PATCH_CENTER), ctx.tau_t, ctx.distill.tau_s)?;
            teacher_logits.insert(GLOBAL_CENTER, g.value(tg).clone());
            teacher_logits.insert(PATCH_CENTER, g.value(tp).clone());
            if cfg.method == Method::Ibot {
                let a = g.scale(global, cfg.lambda_g);
                let b = g.scale(patch_l, cfg.lambda_p);
                (g.add(a, b), vec![("global", global), ("patch", patch_l)])
            } else {
                let pred = heads::pixel_decoder(g, student, ctx.cache, enc, out.last());
                let mip = losses::loss_simmim(g, pred, &target2, &concat_voxel_flags(&batch.mask2, patch))?;
                let a = g.scale(patch_l, cfg.lambda_mpd);
                let b = g.scale(global, cfg.lambda_itd);
                let t = g.add(mip, a);
                (g.add(t, b), vec![("mip", mip), ("mpd", patch_l), ("gtd", global)])
            }
        }
        Method::SwinunetrMulti => {
            let b = batch.len();
            let n = target2.len() / b;
            let mut inputs = Vec::with_capacity(2 * b);
            let mut targets = Vec::with_capacity(2 * b * n);
            let mut labels = Vec::with_capacity(2 * b);
            for (views, masks, rots) in [(&batch.view1, &batch.mask1, &batch.rot1), (&batch.view2, &batch.mask2, &batch.rot2)] {
                for ((v, m), &k) in views.iter().zip(masks).zip(rots) {
                    let (rotated, _) = rotate_axial(v, shape, k);
                    inputs.push(mask_voxels(&rotated, &m.voxel_flags(patch)));
                    targets.extend_from_slice(&rotated);
                    labels.push(k);
                }
            }
            let x = stack(g, &inputs.iter().collect::<Vec<_>>(), shape);
            let out = encode(ctx, g, student, x, None)?;
            let pooled = encoder::pooled_embedding(g, &out.stages);
            let logits = nn::linear(g, student, ROTATION_HEAD, pooled);
            let rot = losses::loss_rotation(g, logits, &labels)?;
            let pred = heads::pixel_decoder(g, student, ctx.cache, enc, out.last());
            let inp = losses::loss_inpaint(g, pred, &targets)?;
            let emb = heads::projection(g, student, CONTRAST_HEAD, pooled);
            let con = losses::loss_infonce(g, emb, &pair_halves(b), cfg.temperature)?;
            let total = weighted_sum(g, &[(rot, cfg.w_rot), (inp, cfg.w_inpaint), (con, cfg.w_contrast)]);
            (total, vec![("rotation", rot), ("inpaint", inp), ("contrast", con)])
        }
    };
    Ok(LossOutput { total, parts, teacher_logits })
}

/// `Σ wᵢ·xᵢ`, accumulated left to right.
pub fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let mut acc = g.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, w);
        acc = g.add(acc, s);
    }
    acc
}

/// Pairs row `i` with row `i + n` in a `2n`-row batch.
pub fn pair_halves(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}
