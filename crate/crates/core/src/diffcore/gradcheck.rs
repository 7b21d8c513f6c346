//! Central finite-difference gradient checking.

use super::{DiffError, Graph, NodeId, ParamStore};

/// Default perturbation for [`grad_check`].
pub const DEFAULT_H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-4, f64::max(analytic.abs(), numeric.abs()))
}

/// Compares the analytic gradient of the scalar loss built by `build`
/// against central differences `(f(x+h) - f(x-h)) / 2h` for every
/// coordinate of every parameter, and reports the worst relative error.
///
/// `build` must construct the same computation whenever it is called; it
/// runs once for the analytic pass and twice per coordinate after that.
pub fn grad_check<F>(
    store: &mut ParamStore,
    h: f64,
    build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, DiffError>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };

    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for index in 0..store.len() {
        let name = store.param_at(index).name.clone();
        let n = store.param_at(index).value.numel();
        for coord in 0..n {
            let orig = store.param_at(index).value.data()[coord];
            store.params_mut()[index].value.data_mut()[coord] = orig + h;
            let f_plus = eval(store)?;
            store.params_mut()[index].value.data_mut()[coord] = orig - h;
            let f_minus = eval(store)?;
            store.params_mut()[index].value.data_mut()[coord] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads.get(index).map_or(0.0, |g| g[coord]);
            let err = rel_err(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord { param: name.clone(), coord, analytic, numeric });
            }
        }
    }
    Ok(report)
}
