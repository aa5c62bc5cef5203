use super::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};

/// Finite-difference settings. A coordinate passes when
/// `|analytic - numeric| <= abs_floor` or the relative error is below `tol`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    /// Input position (or parameter index) and flat coordinate.
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, cfg: &GradCheckConfig, input: usize, coord: usize, a: f64, n: f64) {
        self.checked += 1;
        let err = (a - n).abs();
        if err <= cfg.abs_floor {
            return;
        }
        let rel = err / a.abs().max(n.abs());
        self.max_rel_error = self.max_rel_error.max(rel);
        if rel > cfg.tol {
            self.failures.push(GradFailure {
                input,
                coord,
                analytic: a,
                numeric: n,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.failures.extend(other.failures);
    }
}

fn scalar(g: &Graph, out: Var) -> Result<f64, DiffError> {
    g.value(out)
        .item()
        .ok_or_else(|| DiffError::NonScalar(g.shape(out).to_vec()))
}

/// Compares the backward pass of `f` against central differences on every
/// coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + cfg.eps;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - cfg.eps;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            report.record(&cfg, i, k, analytic[k], (up - down) / (2.0 * cfg.eps));
        }
    }
    Ok(report)
}

/// Same check over the entries of a parameter store. `f` builds the scalar
/// output from a graph bound to the (possibly perturbed) store. `only`
/// restricts the check to a subset of parameters.
pub fn grad_check_params<F>(
    store: &ParamStore,
    only: Option<&[ParamId]>,
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph) -> Result<Var, DiffError>,
{
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        scalar(&g, out)
    };

    let (grads, ids) = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        scalar(&g, out)?;
        let ids: Vec<ParamId> = only.map_or_else(|| store.ids().collect(), <[ParamId]>::to_vec);
        (g.backward(out)?.into_params(), ids)
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in ids {
        let len = store.get(id).len();
        for k in 0..len {
            let x0 = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x0 + cfg.eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0 - cfg.eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0;
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            report.record(&cfg, id.0, k, analytic, (up - down) / (2.0 * cfg.eps));
        }
    }
    Ok(report)
}
