use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares reverse-mode gradients of `f` against central differences on
/// `samples` parameter entries drawn uniformly over all scalars in `store`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// `f` must bind the store it is given (see [`ParamStore::bind`]) and return
/// a scalar.
pub fn grad_check<T, F>(
    f: F,
    store: &ParamStore<T>,
    eps: T,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let entries: Vec<(&str, usize)> = store
        .iter()
        .map(|p| (p.name.as_str(), p.tensor.numel()))
        .collect();
    let total: usize = entries.iter().map(|e| e.1).sum();
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        Ok(t.value(v).data()[0].as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for _ in 0..samples.min(total) {
        let mut flat = rng.random_range(0..total);
        let (name, idx) = entries
            .iter()
            .find_map(|&(n, len)| {
                if flat < len {
                    Some((n, flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("index within total");
        let orig = store.tensor(name)?.data()[idx];
        work.tensor_mut(name).expect("present").data_mut()[idx] = orig + eps;
        let plus = eval(&work)?;
        work.tensor_mut(name).expect("present").data_mut()[idx] = orig - eps;
        let minus = eval(&work)?;
        work.tensor_mut(name).expect("present").data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps.as_f64());
        let analytic = grads[name].data()[idx].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel.max(report.max_rel_err);
            report.worst = Some((name.to_owned(), idx));
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
