use std::collections::BTreeMap;

use super::config::AdamConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adaptive-moment optimiser with bias correction. State is keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    /// One update of every trainable parameter whose group is not frozen, with
    /// the learning rate given per group.
    pub fn update(&mut self, store: &mut ParamStore, lr: &dyn Fn(&str) -> f64, frozen: &[String]) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (_, p) in store.iter_mut() {
            if !p.requires_grad || frozen.iter().any(|g| *g == p.group) {
                continue;
            }
            let n = p.value.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            if st.m.len() != n {
                return Err(Error::State(format!("optimiser state of {} has {} entries, parameter has {n}", p.name, st.m.len())));
            }
            let rate = lr(&p.group);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                value[i] -= rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
