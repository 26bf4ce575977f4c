//! Central finite-difference gradient checking.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Largest entries of the analytic gradient are compared against
/// `(f(x + h) - f(x - h)) / 2h`; the relative error uses a denominator
/// floored at this value so entries that are zero on both sides compare as
/// absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.gradients(loss)?;

    let mut report = GradCheckReport::empty();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            report.record((i, j), analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, at: (usize, usize), a: f64, numeric: f64) {
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (a - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = at;
            self.analytic = a;
            self.numeric = numeric;
        }
    }
}

/// Evenly spaced element indices, at most `max` of them.
fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Gradient check over graph inputs and the parameters of `store`.
///
/// Tensor index `i < inputs.len()` in the report refers to an input; larger
/// indices count through the store's parameters in name order. At most
/// `max_per_tensor` elements of each tensor are perturbed.
pub fn check_store_gradients<F, E>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    max_per_tensor: usize,
    f: F,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> std::result::Result<Var, E>,
    E: From<NnError>,
{
    let eval = |st: &ParamStore, xs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, st, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &work, &vars)?;
    let grads = g.gradients(loss)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    g.backward(loss, &mut work)?;

    let mut report = GradCheckReport::empty();
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in sample_indices(xs[i].numel(), max_per_tensor) {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let fp = eval(store, &xs)?;
            xs[i].data_mut()[j] = orig - h;
            let fm = eval(store, &xs)?;
            xs[i].data_mut()[j] = orig;
            report.record((i, j), input_grads[i].data()[j], (fp - fm) / (2.0 * h));
        }
    }

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut perturbed = store.clone();
    for (k, name) in names.iter().enumerate() {
        let analytic = work.grad(name)?.clone();
        for j in sample_indices(analytic.numel(), max_per_tensor) {
            let orig = perturbed.get(name)?.data()[j];
            perturbed.get_mut(name)?.data_mut()[j] = orig + h;
            let fp = eval(&perturbed, inputs)?;
            perturbed.get_mut(name)?.data_mut()[j] = orig - h;
            let fm = eval(&perturbed, inputs)?;
            perturbed.get_mut(name)?.data_mut()[j] = orig;
            report.record((inputs.len() + k, j), analytic.data()[j], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}
