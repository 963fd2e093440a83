use std::collections::{BTreeMap, HashMap};

use crate::error::{bail, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Adam with bias correction. Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let kind = match store.get(name) {
                Some(p) => p.kind,
                None => bail!(Contract, "gradient for unknown parameter {name}"),
            };
            if kind != ParamKind::Trainable {
                continue;
            }
            let value = store.tensor_mut(name)?;
            if value.shape() != g.shape() {
                bail!(Shape, "gradient shape mismatch for {name}");
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = T::lit(w.f64() - update);
            }
        }
        Ok(())
    }
}
