//! Central finite-difference checks of reverse-mode gradients.

use crate::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    /// Per-parameter `(name, analytic L2 norm, numeric L2 norm)`.
    pub norms: Vec<(String, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the reverse-mode gradient of `loss_fn` against central
/// differences on every (or every strided) coordinate of every parameter.
///
/// `loss_fn` must be deterministic: it is re-run twice per coordinate.
/// Errors raised by `loss_fn` are passed through unchanged.
pub fn gradient_check<F, E>(
    store: &ParamStore,
    loss_fn: F,
    options: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
    E: From<crate::Error>,
{
    let grads = {
        let mut g = Graph::new(store);
        let root = loss_fn(&mut g)?;
        g.backward(root)?
    };

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(s);
        let root = loss_fn(&mut g)?;
        Ok(g.value(root).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        passed: true,
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        norms: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = grads.get_or_zeros(id, store);
        let n = analytic.len();
        let stride = match options.max_coords_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let (mut a_norm, mut n_norm) = (0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + options.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - options.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.data()[i];
            a_norm += a * a;
            n_norm += numeric * numeric;
            let rel = relative_error(a, numeric, options.abs_floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordError {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report
            .norms
            .push((store.name(id).to_string(), a_norm.sqrt(), n_norm.sqrt()));
    }
    report.passed = report.max_rel_error < options.tolerance;
    Ok(report)
}
