use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Relative step: h = eps * max(1, |theta|).
    pub eps: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Times the step is shrunk by 10 when a probe crosses a kink before
    /// the coordinate is skipped.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-3, max_coords_per_tensor: None, kink_retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because every probe straddled a kink.
    pub rejected: usize,
    /// Parameter name and flat index of the largest error.
    pub worst: Option<(String, usize)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_check(true);
    let out = f(&mut tape, store)?;
    Ok((tape.value(out).item()?, tape.kink_signature()))
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every parameter in `store`.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {}", opts.eps)));
    }
    let mut tape = Tape::new().with_finite_check(true);
    let out = f(&mut tape, store)?;
    let mut grads = tape.backward(out)?;
    grads.fill_missing(store);
    let base_sig = tape.kink_signature();
    drop(tape);

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, rejected: 0, worst: None };
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let analytic = grads.get(name).expect("filled").clone();
        let n = analytic.len();
        let stride = match opts.max_coords_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let theta = store.get(name).expect("present").data()[i];
            let mut h = opts.eps * theta.abs().max(1.0);
            let mut numeric = None;
            for _ in 0..=opts.kink_retries {
                work.get_mut(name).unwrap().data_mut()[i] = theta + h;
                let (fp, sp) = evaluate(&f, &work)?;
                work.get_mut(name).unwrap().data_mut()[i] = theta - h;
                let (fm, sm) = evaluate(&f, &work)?;
                work.get_mut(name).unwrap().data_mut()[i] = theta;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.rejected += 1;
                continue;
            };
            let e = rel_err(analytic.data()[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over an unnamed list; parameters are registered as
/// `p000`, `p001`, ... and passed to `f` in order.
pub fn grad_check_list<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, p) in params.iter().enumerate() {
        store.insert(format!("p{i:03}"), p.clone());
    }
    let opts = GradCheckOptions { eps, ..Default::default() };
    grad_check(
        |tape, store| {
            let vars = store.names().map(|n| tape.param_from(store, n)).collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        &store,
        &opts,
    )
}
