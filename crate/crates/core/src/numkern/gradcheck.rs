use super::{Graph, NumError, ParamStore, Prng, Tensor, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error floor: gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h) - f(x - h)) / 2h` for every input coordinate, or
/// a seeded subsample of `max_coords` coordinates per input.
///
/// `f` receives a fresh graph and the input vars, and must return a scalar.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumError>,
{
    grad_check_with_params(&ParamStore::new(), f, inputs, eps, max_coords, seed)
}

/// Like [`grad_check`], additionally differentiating every tensor in `store`.
/// `f` reads parameters through [`Graph::param`].
pub fn grad_check_with_params<F>(
    store: &ParamStore<f64>,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumError>,
{
    let eval = |st: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64, NumError> {
        let mut g = Graph::with_params(st);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = Prng::new(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coords_checked: 0 };
    let mut record = |a: f64, numeric: f64| {
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.coords_checked += 1;
    };
    let mut pick = |n: usize| match max_coords {
        Some(k) if k < n => {
            let mut c = rng.sample_distinct(n, k);
            c.sort_unstable();
            c
        }
        _ => (0..n).collect::<Vec<_>>(),
    };

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for c in pick(inputs[which].len()) {
            let orig = probe[which].data()[c];
            probe[which].data_mut()[c] = orig + eps;
            let plus = eval(store, &probe)?;
            probe[which].data_mut()[c] = orig - eps;
            let minus = eval(store, &probe)?;
            probe[which].data_mut()[c] = orig;
            record(analytic.data()[c], (plus - minus) / (2.0 * eps));
        }
    }

    let mut st = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for c in pick(n) {
            let orig = st.value(id).data()[c];
            st.get_mut(id).value.data_mut()[c] = orig + eps;
            let plus = eval(&st, inputs)?;
            st.get_mut(id).value.data_mut()[c] = orig - eps;
            let minus = eval(&st, inputs)?;
            st.get_mut(id).value.data_mut()[c] = orig;
            record(analytic.data()[c], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
