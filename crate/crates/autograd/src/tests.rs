use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares tape gradients of every input against central differences.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(&inputs);
    let grads = g.backward(out);
    let eps = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.numel());
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "input {k} elem {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }
}

/// Reduces an arbitrary tensor to a scalar with distinct weights so every element matters.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).numel();
    let w: Rc<[f64]> = (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect();
    let y = g.mul_const(x, w);
    g.sum(y)
}

#[test]
fn elementwise_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[0]);
        let c = g.sub(b, v[1]);
        let d = g.add_broadcast(c, v[2]);
        let e = g.mul_broadcast(d, v[2]);
        let f = g.scale(e, 0.7);
        let h = g.add_scalar(f, 0.2);
        let i = g.gelu(h);
        let j = g.leaky_relu(i, 0.01);
        weighted_sum(g, j)
    });
}

#[test]
fn division_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check(vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |g, v| {
        let d = g.mul(v[1], v[1]);
        let d = g.add_scalar(d, 0.5);
        let q = g.div(v[0], d);
        weighted_sum(g, q)
    });
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)], |g, v| {
        let y = g.matmul(v[0], v[1]);
        weighted_sum(g, y)
    });
}

#[test]
fn bmm_gradients_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(vec![random(&a_shape, &mut rng), random(&b_shape, &mut rng)], |g, v| {
            let y = g.bmm(v[0], v[1], ta, tb);
            assert_eq!(g.shape(y), &[2, 3, 5]);
            weighted_sum(g, y)
        });
    }
}

#[test]
fn bmm_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.bmm(va, vb, false, true);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + j * 4 + k]).sum();
                let got = g.value(c).data()[bi * 15 + i * 5 + j];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(vec![random(&[5, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        weighted_sum(g, y)
    });
    check(vec![random(&[5, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)], |g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5);
        weighted_sum(g, y)
    });
    let mean = vec![0.1; 6];
    let var = vec![0.5; 6];
    check(vec![random(&[5, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)], |g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5);
        weighted_sum(g, y)
    });
}

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(vec![random(&[4, 5], &mut rng)], |g, v| {
        let y = g.softmax(v[0]);
        weighted_sum(g, y)
    });
    check(vec![random(&[4, 5], &mut rng)], |g, v| {
        let y = g.log_softmax(v[0]);
        weighted_sum(g, y)
    });
    check(vec![random(&[4, 5], &mut rng)], |g, v| {
        let y = g.l2_normalize_rows(v[0], 1e-12);
        weighted_sum(g, y)
    });
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(vec![random(&[6, 2], &mut rng), random(&[6, 3], &mut rng)], |g, v| {
        let c = g.concat(&[v[0], v[1]]);
        let idx: Rc<[u32]> = vec![0, 5, 5, GATHER_ZERO, 29, 13, 2, 2].into();
        let gathered = g.gather(c, idx, &[2, 4]);
        let m = g.mean_groups(c, 3);
        let r = g.reshape(m, &[15]);
        let s1 = weighted_sum(g, gathered);
        let s2 = weighted_sum(g, r);
        g.add(s1, s2)
    });
}

#[test]
fn detach_and_constants_receive_no_gradient() {
    let mut g = Graph::new();
    let p = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
    let d = g.detach(p);
    let y = g.mul(p, c);
    let z = g.mul(y, d);
    let s = g.sum(z);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    // d/dp (p * c * stop(p)) = c * p
    assert_eq!(grads.get(p).unwrap(), &[3.0, 8.0]);
}

#[test]
fn reshape_rejects_wrong_element_count() {
    assert!(Tensor::zeros(&[2, 3]).reshaped(&[4]).is_err());
    assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
}
