//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates. Each error is
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` where the
    /// floor is `1e-3 ×` the largest analytic magnitude.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on coordinates probed per parameter; evenly strided.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, max_coords_per_param: usize::MAX }
    }
}

/// Compares the reverse-mode gradient of `loss` at `params` with central
/// differences.
pub fn grad_check<F>(loss: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), checked: 0, passed: true };
    for (pi, p) in params.iter().enumerate() {
        let stride = p.len().div_ceil(opts.max_coords_per_param.max(1)).max(1);
        for ei in (0..p.len()).step_by(stride) {
            let x0 = p.data()[ei];
            work[pi].data_mut()[ei] = x0 + opts.step;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = x0 - opts.step;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
