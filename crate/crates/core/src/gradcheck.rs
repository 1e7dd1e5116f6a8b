//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `loss` against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every coordinate of every parameter.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// `loss` must be deterministic: pin every rng stream and use eval mode.
pub fn gradient_check<F>(params: &ParamSet, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = loss(&mut g, &bound)?;
    let mut grads = g.backward(out)?;
    let analytic = bound.collect(&g, &mut grads);

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let v = loss(&mut g, &b)?;
        Ok(g.value(v).data()[0])
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name)?.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
