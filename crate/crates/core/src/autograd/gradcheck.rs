//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Location of the worst element as `(name, index)`.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks gradients of a scalar function with respect to its tensor inputs.
pub fn check_input_gradients(
    inputs: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(&inputs[i].shape));
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + step;
            let plus = eval(&work);
            work[i].data[j] = orig - step;
            let minus = eval(&work);
            work[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input{i}"), j, analytic.data[j], numeric, GRAD_FLOOR);
        }
    }
    report
}

/// Checks gradients of a scalar loss with respect to stored parameters.
///
/// At most `per_param` evenly spaced elements of each trainable tensor are
/// perturbed.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    step: f64,
    per_param: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let mut analytic = store.clone();
    analytic.zero_grads();
    grads.accumulate_into(&g, &mut analytic);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let out = f(&mut g, s);
        g.value(out).data[0]
    };
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        if !store.trainable(id) {
            continue;
        }
        let n = store.value(id).len();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param.max(1)) {
            let orig = work.value(id).data[j];
            work.value_mut(id).data[j] = orig + step;
            let plus = eval(&work);
            work.value_mut(id).data[j] = orig - step;
            let minus = eval(&work);
            work.value_mut(id).data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(store.name(id), j, analytic.grad(id).data[j], numeric, GRAD_FLOOR);
        }
    }
    report
}
