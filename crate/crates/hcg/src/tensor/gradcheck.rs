//! Central-difference gradient oracle.
//!
//! The analytic gradient from [`Graph::backward`] is compared against
//! (f(x+eps) - f(x-eps)) / 2eps for every element of every tracked
//! parameter. Runs at f64 only; the finite-difference tolerance is not
//! reachable at f32.

use super::{Graph, ParamStore, Result, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Denominator floor keeps near-zero gradients from inflating the ratio.
const REL_FLOOR: f64 = 1e-3;

/// `build` must construct the scalar loss from graph leaves registered via
/// [`Graph::param`], and must be deterministic so repeated evaluation is
/// meaningful.
pub fn grad_check<F>(store: &ParamStore, eps: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph<f64>) -> Result<TensorId>,
{
    let mut graph = Graph::<f64>::new();
    let loss = build(store, &mut graph)?;
    let grads = graph.backward(loss)?;

    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    let leaves: Vec<(String, TensorId)> = graph.param_leaves().to_vec();
    for (name, id) in &leaves {
        let n = store.get(name).unwrap().values.len();
        let analytic: Vec<f64> = match grads.get(*id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        for j in 0..n {
            let mut probe = store.clone();
            let base = probe.get(name).unwrap().values[j];
            probe.get_mut(name).unwrap().values[j] = base + eps;
            let up = eval(&probe, &mut build)?;
            probe.get_mut(name).unwrap().values[j] = base - eps;
            let down = eval(&probe, &mut build)?;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph<f64>) -> Result<TensorId>,
{
    let mut graph = Graph::<f64>::new();
    let loss = build(store, &mut graph)?;
    Ok(graph.scalar(loss))
}
