use std::collections::BTreeMap;

use rand::Rng as _;
use sslbench_autograd::{Graph, Tensor};

use super::heads::head_specs;
use super::losses::*;
use super::objective::{build_batch, method_loss, Batch, Context, GLOBAL_CENTER, PATCH_CENTER};
use super::train::{pretrain_step, TrainState};
use super::*;
use crate::encoder::{self, EncoderConfig};
use crate::gradcheck;
use crate::nn::{self, IndexCache};
use crate::params::Bound;
use crate::phantom::{Modality, Volume, DEFAULT_SPACING};
use crate::rng::substream;

#[test]
fn mask_examples() {
    let mut rng = substream(1, "mask");
    let m = sample_mask([4, 4, 4], 0.75, &mut rng).unwrap();
    assert_eq!(m.len(), 48);
    let mut sorted = m.masked_indices.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), 48);
    assert!(m.masked_indices.iter().all(|&i| i < 64));
    assert!(matches!(sample_mask([2, 2, 2], 0.1, &mut rng), Err(PretextError::DegenerateMask { .. })));
    assert!(sample_mask([4, 4, 4], 1.0, &mut rng).is_err());
    assert!(sample_mask([4, 4, 4], 0.0, &mut rng).is_err());
}

#[test]
fn mask_is_uniform() {
    let mut rng = substream(2, "mask");
    let mut counts = [0usize; 64];
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_mask([4, 4, 4], 0.75, &mut rng).unwrap().masked_indices {
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.75).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn voxel_flags_follow_patches() {
    let m = MaskSpec { masked_indices: vec![1], ratio: 0.5, grid_shape: [1, 1, 2] };
    assert_eq!(m.voxel_flags([1, 1, 2]), vec![false, false, true, true]);
}

macro_rules! scalar {
    ($g:ident, $e:expr) => {{
        let v = $e;
        $g.value(v).item()
    }};
}

#[test]
fn simmim_examples() {
    let mut g = Graph::new();
    let pred = g.constant(Tensor::from_vec(&[4], vec![3.0, 0.0, 7.0, 1.0]));
    let l = loss_simmim(&mut g, pred, &[1.0, 5.0, 0.0, 1.0], &[true, false, false, false]).unwrap();
    assert_eq!(scalar!(g, l), 4.0);
    // unmasked voxels do not matter
    let l2 = loss_simmim(&mut g, pred, &[1.0, -9.0, 4.0, 2.0], &[true, false, false, false]).unwrap();
    assert_eq!(scalar!(g, l2), 4.0);
    let same = loss_simmim(&mut g, pred, &[3.0, 0.0, 7.0, 1.0], &[true, true, false, true]).unwrap();
    assert_eq!(scalar!(g, same), 0.0);
    assert!(matches!(loss_simmim(&mut g, pred, &[0.0; 4], &[false; 4]), Err(PretextError::EmptyMask)));
}

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[10]));
    assert_eq!(scalar!(g, loss_inpaint(&mut g, zero, &[1.0; 10]).unwrap()), 1.0);
    assert_eq!(scalar!(g, loss_recon(&mut g, zero, &[0.0; 10]).unwrap()), 0.0);
    let x = g.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
    let t = [0.0, 0.0, 0.0];
    let base = scalar!(g, loss_recon(&mut g, x, &t).unwrap());
    let x3 = g.constant(Tensor::from_vec(&[3], vec![1.5, -3.0, 6.0]));
    let scaled = scalar!(g, loss_recon(&mut g, x3, &t).unwrap());
    assert!((scaled - 9.0 * base).abs() < 1e-12);
    assert!(loss_inpaint(&mut g, x, &[0.0; 4]).is_err());
}

#[test]
fn infonce_examples() {
    let mut g = Graph::new();
    let pair = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.3, 0.9, 0.1]));
    assert!(scalar!(g, loss_infonce(&mut g, pair, &[1, 0], 0.5).unwrap()).abs() < 1e-12);
    let equal = g.constant(Tensor::from_vec(&[4, 2], vec![1.0, 1.0, 2.0, 2.0, 0.5, 0.5, 3.0, 3.0]));
    let l = scalar!(g, loss_infonce(&mut g, equal, &[2, 3, 0, 1], 0.1).unwrap());
    assert!((l - 3f64.ln()).abs() < 1e-10, "{l}");
    assert!(loss_infonce(&mut g, equal, &[2, 3, 0, 1], 0.0).is_err());
    assert!(loss_infonce(&mut g, equal, &[1, 0, 3, 3], 0.1).is_err());
    // raising the positive similarity lowers the loss
    let embed = |c: f64| vec![1.0, 0.0, c, (1.0 - c * c).sqrt(), 0.0, 1.0, -1.0, 0.0];
    let a = g.constant(Tensor::from_vec(&[4, 2], embed(0.2)));
    let b = g.constant(Tensor::from_vec(&[4, 2], embed(0.6)));
    let la = scalar!(g, loss_infonce(&mut g, a, &[1, 0, 3, 2], 0.5).unwrap());
    let lb = scalar!(g, loss_infonce(&mut g, b, &[1, 0, 3, 2], 0.5).unwrap());
    assert!(lb < la);
}

#[test]
fn rotation_loss_examples() {
    let mut g = Graph::new();
    let onehot = g.constant(Tensor::from_vec(&[2, 4], vec![800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 800.0, 0.0]));
    assert!(scalar!(g, loss_rotation(&mut g, onehot, &[0, 2]).unwrap()).abs() < 1e-12);
    let uniform = g.constant(Tensor::zeros(&[3, 4]));
    let l = scalar!(g, loss_rotation(&mut g, uniform, &[0, 1, 3]).unwrap());
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let x = g.constant(Tensor::from_vec(&[1, 4], vec![0.3, -1.0, 2.0, 0.1]));
    let xs = g.constant(Tensor::from_vec(&[1, 4], vec![5.3, 4.0, 7.0, 5.1]));
    let a = scalar!(g, loss_rotation(&mut g, x, &[1]).unwrap());
    let b = scalar!(g, loss_rotation(&mut g, xs, &[1]).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(matches!(loss_rotation(&mut g, x, &[4]), Err(PretextError::Label { label: 4, classes: 4 })));
}

#[test]
fn rotation_is_lossless() {
    let data: Vec<f64> = (0..8 * 8 * 8).map(|i| i as f64).collect();
    let v = Volume::new("r", Modality::A, [8, 8, 8], DEFAULT_SPACING, data).unwrap();
    assert_eq!(apply_rotation(&v, 0), v);
    let mut r = v.clone();
    for _ in 0..4 {
        r = apply_rotation(&r, 1);
    }
    assert_eq!(r, v);
    assert_eq!(apply_rotation(&apply_rotation(&v, 3), 1), v);
    assert_eq!(apply_rotation(&apply_rotation(&v, 2), 2), v);
    assert_ne!(apply_rotation(&v, 1), v);
    // z slices are preserved as sets
    let r1 = apply_rotation(&v, 1);
    let mut a: Vec<f64> = v.voxels()[..64].to_vec();
    let mut b: Vec<f64> = r1.voxels()[..64].to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn distill_examples() {
    let mut g = Graph::new();
    let k = 8;
    let mut sharp = vec![0.0; 2 * k];
    sharp[3] = 50.0;
    sharp[k + 6] = 50.0;
    let t = g.constant(Tensor::from_vec(&[2, k], sharp.clone()));
    let s = g.constant(Tensor::from_vec(&[2, k], sharp));
    let l = scalar!(g, distill_ce(&mut g, t, s, &[0.0; 8], 0.1, 0.1).unwrap());
    assert!(l < 1e-12, "{l}");

    // uniform teacher: loss is ln K for a uniform student and larger otherwise
    let zeros = g.constant(Tensor::zeros(&[1, k]));
    let uni = scalar!(g, distill_ce(&mut g, zeros, zeros, &[0.0; 8], 0.07, 0.1).unwrap());
    assert!((uni - (k as f64).ln()).abs() < 1e-12);
    let mut rng = substream(3, "d");
    for _ in 0..20 {
        let s = g.constant(Tensor::from_vec(&[1, k], (0..k).map(|_| rng.random::<f64>()).collect()));
        assert!(scalar!(g, distill_ce(&mut g, zeros, s, &[0.0; 8], 0.07, 0.1).unwrap()) >= uni - 1e-12);
    }

    // per-row shifts of either side
    let tv: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
    let sv: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
    let shift = |v: &[f64], c: [f64; 2]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x + c[i / k]).collect() };
    let t0 = g.constant(Tensor::from_vec(&[2, k], tv.clone()));
    let s0 = g.constant(Tensor::from_vec(&[2, k], sv.clone()));
    let t1 = g.constant(Tensor::from_vec(&[2, k], shift(&tv, [3.0, -2.0])));
    let s1 = g.constant(Tensor::from_vec(&[2, k], shift(&sv, [-1.5, 7.0])));
    let center: Vec<f64> = (0..k).map(|i| 0.01 * i as f64).collect();
    let a = scalar!(g, distill_ce(&mut g, t0, s0, &center, 0.04, 0.1).unwrap());
    let b = scalar!(g, distill_ce(&mut g, t1, s1, &center, 0.04, 0.1).unwrap());
    assert!((a - b).abs() < 1e-10);
    assert!(distill_ce(&mut g, t0, s0, &[0.0; 3], 0.04, 0.1).is_err());
}

#[test]
fn ema_examples() {
    let mut t = crate::params::ParameterSet::new();
    t.insert("w", Tensor::full(&[3], 2.0));
    let mut s = crate::params::ParameterSet::new();
    s.insert("w", Tensor::full(&[3], 4.0));
    let mut a = t.clone();
    ema_update(&mut a, &s, 0.5).unwrap();
    assert_eq!(a.get("w").unwrap().data(), &[3.0; 3]);
    let mut b = t.clone();
    ema_update(&mut b, &s, 0.0).unwrap();
    assert_eq!(b, s);
    let mut c = t.clone();
    ema_update(&mut c, &s, 1.0).unwrap();
    assert_eq!(c, t);
    assert!(ema_update(&mut c, &s, 1.5).is_err());
    let mut bad = crate::params::ParameterSet::new();
    bad.insert("w", Tensor::zeros(&[2]));
    assert!(ema_update(&mut c, &bad, 0.5).is_err());
}

#[test]
fn center_examples() {
    let logits = [1.0, 2.0, 3.0, 5.0];
    assert_eq!(update_center(&[9.0, 9.0], &logits, 2, 0.0).unwrap(), vec![2.0, 3.5]);
    assert_eq!(update_center(&[0.0, 0.0], &[0.0; 4], 2, 0.7).unwrap(), vec![0.0, 0.0]);
    let mut c = vec![0.0, 10.0];
    for step in 1..=50 {
        c = update_center(&c, &[4.0, 4.0, 4.0, 4.0], 2, 0.9).unwrap();
        let expected_gap = 0.9f64.powi(step);
        assert!(((4.0 - c[0]) - 4.0 * expected_gap).abs() < 1e-9);
        assert!(((c[1] - 4.0) - 6.0 * expected_gap).abs() < 1e-9);
    }
    assert!(update_center(&[0.0], &[], 1, 0.5).is_err());
    assert!(update_center(&[0.0], &[1.0], 1, 1.0).is_err());
}

#[test]
fn teacher_temperature_schedule() {
    let d = DistillConfig::default();
    assert_eq!(d.tau_t(0.0), 0.04);
    assert_eq!(d.tau_t(15.0), 0.04 + (0.07 - 0.04) * 15.0 / 30.0);
    assert_eq!(d.tau_t(30.0), 0.07);
    assert_eq!(d.tau_t(400.0), 0.07);
    assert!((d.tau_t(15.0) - 0.055).abs() < 1e-15);
}

#[test]
fn method_names_roundtrip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("mae".parse::<Method>().is_err());
}

pub(crate) struct Rig {
    pub method: MethodConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub student: crate::params::ParameterSet,
    pub teacher: crate::params::ParameterSet,
    pub centers: BTreeMap<String, Vec<f64>>,
    pub batch: Batch,
}

pub(crate) fn rig(method: Method, seed: u64) -> Rig {
    let encoder = EncoderConfig::tiny();
    let method = MethodConfig::for_method(method);
    let distill = DistillConfig { head_output_dim: 16, bottleneck_dim: 8, ..DistillConfig::default() };
    let mut rng = substream(seed, "init");
    let mut student = encoder::init_params(&encoder, &mut rng);
    student.extend(nn::init_params(&head_specs(&method, &encoder, &distill), &mut rng));
    for (_, t) in student.iter_mut().filter(|(_, t)| t.shape().len() == 1) {
        t.data_mut().iter_mut().for_each(|v| *v += 0.2 * (rng.random::<f64>() - 0.5));
    }
    let mut teacher = student.clone();
    for (_, t) in teacher.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.random::<f64>());
    }
    let centers = [GLOBAL_CENTER, PATCH_CENTER].iter().map(|c| (c.to_string(), (0..16).map(|i| 0.01 * i as f64).collect())).collect();
    let vols: Vec<Vec<f64>> = (0..2).map(|_| (0..512).map(|_| rng.random::<f64>()).collect()).collect();
    let sources: Vec<(&str, &[f64], [usize; 3])> = vols.iter().map(|v| ("v", v.as_slice(), [8, 8, 8])).collect();
    let batch = build_batch(&method, &encoder, &sources, &mut rng).unwrap();
    Rig { method, encoder, distill, student, teacher, centers, batch }
}

impl Rig {
    pub fn parts(&self) -> (f64, Vec<(&'static str, f64)>) {
        let cache = IndexCache::default();
        let mut g = Graph::new();
        let s = Bound::new(&mut g, &self.student, false);
        let t = Bound::new(&mut g, &self.teacher, false);
        let ctx = Context { method: &self.method, encoder: &self.encoder, distill: &self.distill, cache: &cache, centers: &self.centers, tau_t: 0.05 };
        let out = method_loss(&ctx, &mut g, &s, Some(&t), &self.batch).unwrap();
        (g.value(out.total).item(), out.parts.iter().map(|(n, v)| (*n, g.value(*v).item())).collect())
    }
}

#[test]
fn every_method_gradient_matches_finite_differences() {
    for (i, m) in Method::ALL.into_iter().enumerate() {
        let r = rig(m, 20 + i as u64);
        let cache = IndexCache::default();
        let teacher = r.teacher.clone();
        let mut rng = substream(40 + i as u64, "gc");
        let res = gradcheck::check(&r.student, 10, 1e-5, 1e-4, &mut rng, |g, s| {
            let t = Bound::new(g, &teacher, false);
            let ctx = Context { method: &r.method, encoder: &r.encoder, distill: &r.distill, cache: &cache, centers: &r.centers, tau_t: 0.05 };
            method_loss(&ctx, g, s, Some(&t), &r.batch).unwrap().total
        });
        assert!(res.passed(1e-4) && res.checked >= 10, "{m}: {:?}", res);
    }
}

#[test]
fn weighted_totals_match_parts() {
    let r = rig(Method::Smit, 1);
    let (total, parts) = r.parts();
    let p: BTreeMap<_, _> = parts.into_iter().collect();
    assert!((total - (p["mip"] + 0.1 * p["mpd"] + 0.1 * p["gtd"])).abs() < 1e-12);

    let mut r = rig(Method::Smit, 1);
    r.method.lambda_mpd = 0.0;
    r.method.lambda_itd = 0.0;
    let (total, parts) = r.parts();
    assert_eq!(total, parts[0].1);

    let mut r = rig(Method::Ibot, 2);
    let (total, parts) = r.parts();
    assert!((total - (parts[0].1 + parts[1].1)).abs() < 1e-12);
    r.method.lambda_g = 2.0;
    let (doubled, parts2) = r.parts();
    assert_eq!(parts, parts2);
    assert!((doubled - total - parts[0].1).abs() < 1e-12);
    r.method.lambda_g = 1.0;
    r.method.lambda_p = 0.0;
    assert_eq!(r.parts().0, parts[0].1);

    let mut r = rig(Method::SwinunetrMulti, 3);
    let (total, parts) = r.parts();
    assert!((total - parts.iter().map(|p| p.1).sum::<f64>()).abs() < 1e-12);
    r.method.w_rot = 0.5;
    r.method.w_contrast = 2.0;
    let (total, parts) = r.parts();
    assert!((total - (0.5 * parts[0].1 + parts[1].1 + 2.0 * parts[2].1)).abs() < 1e-12);
}

#[test]
fn swinunetr_without_contrast_matches_reduced_build() {
    let mut r = rig(Method::SwinunetrMulti, 4);
    r.method.w_contrast = 0.0;
    let cache = IndexCache::default();
    let grads_of = |reduced: bool| {
        let mut g = Graph::new();
        let s = Bound::new(&mut g, &r.student, true);
        let ctx = Context { method: &r.method, encoder: &r.encoder, distill: &r.distill, cache: &cache, centers: &r.centers, tau_t: 0.05 };
        let out = method_loss(&ctx, &mut g, &s, None, &r.batch).unwrap();
        let loss = if reduced { g.add(out.parts[0].1, out.parts[1].1) } else { out.total };
        s.gradients(&g, &g.backward(loss))
    };
    let full = grads_of(false);
    let reduced = grads_of(true);
    for (name, a) in full.iter() {
        let b = reduced.get(name).unwrap();
        assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{name}");
    }
}

#[test]
fn teacher_receives_no_gradient() {
    for m in [Method::Dino, Method::Ibot, Method::Smit] {
        let r = rig(m, 5);
        let cache = IndexCache::default();
        let mut g = Graph::new();
        let s = Bound::new(&mut g, &r.student, true);
        let t = Bound::new(&mut g, &r.teacher, true);
        let ctx = Context { method: &r.method, encoder: &r.encoder, distill: &r.distill, cache: &cache, centers: &r.centers, tau_t: 0.05 };
        let out = method_loss(&ctx, &mut g, &s, Some(&t), &r.batch).unwrap();
        let grads = g.backward(out.total);
        let tg = t.gradients(&g, &grads);
        assert!(tg.iter().all(|(_, v)| v.data().iter().all(|&x| x == 0.0)), "{m}");
        let sg = s.gradients(&g, &grads);
        assert!(sg.iter().any(|(_, v)| v.data().iter().any(|&x| x != 0.0)));
    }
}

#[test]
fn simmim_ignores_unmasked_voxels_but_inpaint_does_not() {
    let mut rng = substream(6, "p");
    let n = 256;
    let pred: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let target: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let flags: Vec<bool> = (0..n).map(|i| i % 4 != 0).collect();
    let mut pred2 = pred.clone();
    let mut target2 = target.clone();
    for i in (0..n).step_by(4) {
        pred2[i] += rng.random::<f64>();
        target2[i] -= rng.random::<f64>();
    }
    let mut g = Graph::new();
    let p1 = g.constant(Tensor::from_vec(&[n], pred));
    let p2 = g.constant(Tensor::from_vec(&[n], pred2));
    let a = scalar!(g, loss_simmim(&mut g, p1, &target, &flags).unwrap());
    let b = scalar!(g, loss_simmim(&mut g, p2, &target2, &flags).unwrap());
    assert_eq!(a, b);
    let a = scalar!(g, loss_inpaint(&mut g, p1, &target).unwrap());
    let b = scalar!(g, loss_inpaint(&mut g, p2, &target2).unwrap());
    assert_ne!(a, b);
    let a = scalar!(g, loss_recon(&mut g, p1, &target).unwrap());
    let b = scalar!(g, loss_recon(&mut g, p2, &target2).unwrap());
    assert_ne!(a, b);
}

fn step_cfg(method: Method) -> train::PretrainConfig {
    train::PretrainConfig {
        method: MethodConfig::for_method(method),
        encoder: EncoderConfig::tiny(),
        distill: DistillConfig { head_output_dim: 16, bottleneck_dim: 8, ..DistillConfig::default() },
        optim: Default::default(),
        steps: 2,
        batch_size: 2,
        warmup_steps: 1,
        seed: 7,
    }
}

#[test]
fn pretrain_step_is_deterministic_and_decoupled() {
    let cfg = step_cfg(Method::Dino);
    let r = rig(Method::Dino, 8);
    let cache = IndexCache::default();
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let ra = pretrain_step(&cfg, &mut a, &cache, &r.batch, 0, 1e-3, 0.04).unwrap();
    let rb = pretrain_step(&cfg, &mut b, &cache, &r.batch, 0, 1e-3, 0.04).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.student, b.student);

    let mut z = TrainState::new(&cfg).unwrap();
    let before = z.student.clone();
    let teacher_before = z.teacher.clone().unwrap();
    // make the teacher differ so the EMA visibly moves it
    for (_, t) in z.teacher.as_mut().unwrap().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    pretrain_step(&cfg, &mut z, &cache, &r.batch, 0, 0.0, 0.04).unwrap();
    assert_eq!(z.student, before);
    let t = z.teacher.as_ref().unwrap();
    let name = "encoder.patch_embed.bias";
    let moved = t.get(name).unwrap().data()[0];
    let expected = 0.99 * (teacher_before.get(name).unwrap().data()[0] + 1.0) + 0.01 * before.get(name).unwrap().data()[0];
    assert!((moved - expected).abs() < 1e-12);
    assert_ne!(z.centers[GLOBAL_CENTER], vec![0.0; 16]);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let cfg = step_cfg(Method::Recon);
    let mut r = rig(Method::Recon, 9);
    r.batch.view2[0][0] = f64::NAN;
    let cache = IndexCache::default();
    let mut s = TrainState::new(&cfg).unwrap();
    match pretrain_step(&cfg, &mut s, &cache, &r.batch, 3, 1e-3, 0.04) {
        Err(PretextError::NonFinite { step, batch, parts }) => {
            assert_eq!(step, 3);
            assert_eq!(batch.len(), 2);
            assert!(parts.contains("recon="));
        }
        other => panic!("{:?}", other.map(|r| r.total)),
    }
}

