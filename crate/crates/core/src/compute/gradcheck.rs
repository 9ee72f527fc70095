//! Central finite-difference checks of analytic gradients.
//!
//! Only forward passes are used to build the numeric estimate, so the check is
//! independent of every backward rule it verifies.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
    /// `(parameter name, index, analytic, numeric)` for failing coordinates.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl FdReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

/// Relative error with an absolute floor so vanishing gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backprop gradients of the scalar built by `loss` with central
/// differences at `samples` coordinates drawn uniformly from parameters whose
/// name passes `filter`.
pub fn check_gradients<R: Rng>(
    store: &ParamStore,
    loss: impl Fn(&mut Graph<'_>) -> Result<Var>,
    filter: impl Fn(&str) -> bool,
    samples: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> Result<FdReport> {
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?.into_params()
    };
    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = pool.iter().map(|(_, n)| n).sum();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = FdReport {
        checked: 0,
        passed: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let mut probe = store.clone();
    for _ in 0..samples.min(total) {
        let mut flat = rng.random_range(0..total);
        let (id, idx) = pool
            .iter()
            .find_map(|&(id, n)| {
                if flat < n {
                    Some((id, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("index inside pool");
        let orig = probe.value(id).data()[idx];
        probe.value_mut(id).data_mut()[idx] = orig + step;
        let up = eval(&probe)?;
        probe.value_mut(id).data_mut()[idx] = orig - step;
        let down = eval(&probe)?;
        probe.value_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel <= tol {
            report.passed += 1;
        } else {
            report
                .failures
                .push((store.get(id).name.clone(), idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Adds Gaussian noise to every parameter so zero-initialized layers stop
/// masking gradients of the layers beneath them.
pub fn jitter<R: Rng>(store: &mut ParamStore, std: f64, rng: &mut R) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}
