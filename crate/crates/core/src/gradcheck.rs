//! Central finite-difference checks of graph gradients.

use rand::Rng as _;
use sslbench_autograd::{Graph, Var};

use crate::params::{Bound, ParameterSet};
use crate::rng::Rng;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.worst < tol
    }
}

/// Compares backprop gradients of `loss` against central differences on
/// `samples` randomly chosen scalars of `params`.
pub fn check<F>(params: &ParameterSet, samples: usize, eps: f64, tol: f64, rng: &mut Rng, loss: F) -> GradCheck
where
    F: Fn(&mut Graph, &Bound) -> Var,
{
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, true);
    let l = loss(&mut g, &bound);
    let grads = bound.gradients(&g, &g.backward(l));
    let eval = |p: &ParameterSet| {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, p, false);
        let l = loss(&mut g, &b);
        g.value(l).item()
    };
    let names: Vec<&String> = params.names().collect();
    let mut out = GradCheck::default();
    for _ in 0..samples {
        let name = names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..params.get(name).expect("listed").numel());
        let mut plus = params.clone();
        plus.get_mut(name).expect("listed").data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(name).expect("listed").data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let analytic = grads.get(name).expect("listed").data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        out.worst = out.worst.max(rel);
        out.checked += 1;
        if !(rel < tol) {
            out.failures.push(format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}"));
        }
    }
    out
}
