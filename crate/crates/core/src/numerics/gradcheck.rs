//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Entries checked per parameter; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_param: None,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of the scalar built by `loss` against central
/// differences for every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store, true);
        let l = loss(&mut g)?;
        g.backward(l)?.into_param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let picks: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{}[{i}]", store.name(id));
            }
        }
    }
    Ok(report)
}
