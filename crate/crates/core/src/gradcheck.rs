//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::autograd::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error per coordinate.
pub const REL_TOL: f64 = 1e-4;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            1.0 - self.failures as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the gradient of the scalar built by `build` with respect to each
/// of `inputs` against central differences, on up to `max_coords` coordinates per input.
pub fn check<F>(inputs: &[Tensor], max_coords: usize, seed: u64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport { checked: 0, failures: 0, max_rel_err: 0.0 };
    let mut rng = rng::stream(seed, "gradcheck", 0);
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        for j in coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[j], numeric);
            report.checked += 1;
            if err > REL_TOL {
                report.failures += 1;
            }
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    report
}
