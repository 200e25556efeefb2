//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per parameter (sampled deterministically).
    pub max_entries: Option<usize>,
    /// Denominator floor of the relative deviation.
    pub floor: f64,
    pub seed: u64,
    /// When sampling, draw from entries with a nonzero analytic gradient first.
    pub prefer_nonzero: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, max_entries: None, floor: 1e-8, seed: 0, prefer_nonzero: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamDeviation {
    pub name: String,
    pub checked: usize,
    pub max_abs_grad: f64,
    pub max_abs_numeric: f64,
    pub max_abs_diff: f64,
    /// `max |analytic - numeric| / max(max|analytic|, max|numeric|, floor)`.
    pub max_rel_dev: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamDeviation>,
}

impl GradCheckReport {
    pub fn max_deviation(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_dev).fold(0.0, f64::max)
    }

    /// Largest absolute discrepancy over all parameters divided by the largest
    /// gradient magnitude over all parameters.
    pub fn scaled_deviation(&self) -> f64 {
        let diff = self.per_param.iter().map(|p| p.max_abs_diff).fold(0.0, f64::max);
        let scale = self.per_param.iter().map(|p| p.max_abs_grad.max(p.max_abs_numeric)).fold(0.0, f64::max);
        if diff == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    pub fn passes(&self, rtol: f64) -> bool {
        self.max_deviation() < rtol
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let v = f(&mut g)?;
    let out = g.value(v);
    if out.len() != 1 {
        return Err(Error::contract("grad_check function must return a scalar"));
    }
    Ok(out.item())
}

/// Compares the analytic gradient of `f` with central differences for every
/// parameter in `ids`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let analytic: Vec<f64> = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let nonzero: Vec<usize> = (0..n).filter(|&j| analytic[j] != 0.0).collect();
                let mut e = if opts.prefer_nonzero && !nonzero.is_empty() {
                    let k = m.min(nonzero.len());
                    sample(&mut rng, nonzero.len(), k).into_iter().map(|i| nonzero[i]).collect()
                } else {
                    sample(&mut rng, n, m).into_vec()
                };
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut max_a = 0.0_f64;
        let mut max_n = 0.0_f64;
        let mut max_diff = 0.0_f64;
        for &j in &entries {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + opts.step;
            let fp = evaluate(store, &f);
            store.value_mut(id).data_mut()[j] = orig - opts.step;
            let fm = evaluate(store, &f);
            store.value_mut(id).data_mut()[j] = orig;
            let (fp, fm) = (fp?, fm?);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite value perturbing {}[{j}]",
                    store.get(id).name
                )));
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            max_a = max_a.max(analytic[j].abs());
            max_n = max_n.max(numeric.abs());
            max_diff = max_diff.max((analytic[j] - numeric).abs());
        }
        per_param.push(ParamDeviation {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_abs_grad: max_a,
            max_abs_numeric: max_n,
            max_abs_diff: max_diff,
            max_rel_dev: max_diff / max_a.max(max_n).max(opts.floor),
        });
    }
    Ok(GradCheckReport { per_param })
}
