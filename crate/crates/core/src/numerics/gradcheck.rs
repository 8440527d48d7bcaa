use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::param::{Gradients, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub entries_per_param: usize,
    /// Seed for choosing which entries of large tensors are checked.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            entries_per_param: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients from `f` against central differences.
///
/// `f` returns the scalar loss and its gradient buffer at the given
/// parameters. It is evaluated twice up front; differing losses mean the
/// function is not deterministic and the check is refused. Every parameter
/// value is restored before returning.
pub fn grad_check<F>(params: &mut ParamSet, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    let (first, analytic) = f(params)?;
    let (second, _) = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    analytic.check_aligned(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.value(id).len();
        let entries: Vec<usize> = if n <= opts.entries_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.entries_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = (0.0f64, 0usize);
        for &k in &entries {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + opts.eps;
            let plus = f(params).map(|r| r.0);
            params.value_mut(id).data_mut()[k] = orig - opts.eps;
            let minus = f(params).map(|r| r.0);
            params.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(numeric, analytic.get(id)[k]);
            if err > worst.0 || err.is_nan() {
                worst = (err, k);
            }
        }
        checks.push(ParamCheck {
            name: params.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= opts.tol,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: checks.iter().all(|c| c.passed),
        params: checks,
        max_rel_error,
    })
}
