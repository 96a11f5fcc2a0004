//! Decoupled-weight-decay adaptive-moment optimizer.

use crate::error::Result;
use crate::nn::graph::GradMap;
use crate::nn::params::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Per-parameter first/second moment estimates.
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub moments: BTreeMap<String, MomentPair>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Decay is skipped for biases, norm gains/shifts, positional tables and
    /// the codebook; those parameters are regularized by their own losses.
    fn decays(name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        !matches!(
            leaf,
            "b" | "beta" | "gamma" | "pos" | "codebook" | "tokens" | "anchor"
        )
    }

    /// Apply one update from averaged gradients. Parameters without a
    /// gradient entry are left untouched. Iteration order is the store's
    /// sorted name order, so updates are deterministic.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, value) in store.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let entry = self.moments.entry(name.to_string()).or_insert_with(|| {
                MomentPair {
                    m: Array2::zeros(value.dim()),
                    v: Array2::zeros(value.dim()),
                }
            });
            entry.m.zip_mut_with(grad, |m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            entry.v.zip_mut_with(grad, |v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let decay = if Self::decays(name) {
                self.weight_decay
            } else {
                0.0
            };
            ndarray::Zip::from(&mut *value)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn quadratic_converges_to_zero() {
        let mut store = ParamStore::new(3);
        store.register("w", 2, 2, Init::Normal(1.0)).unwrap();
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let mut grads = GradMap::new();
            grads.insert("w".into(), store.get("w").unwrap().clone());
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("w").unwrap().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut store = ParamStore::new(9);
            store.register("a.w", 3, 3, Init::ScaledNormal).unwrap();
            store.register("a.b", 1, 3, Init::Zeros).unwrap();
            let mut opt = AdamW::new(1e-2, 1e-2);
            for i in 0..10 {
                let mut grads = GradMap::new();
                grads.insert("a.w".into(), store.get("a.w").unwrap() * (i as f64 * 0.1 - 0.4));
                grads.insert("a.b".into(), Array2::from_elem((1, 3), 0.3));
                opt.step(&mut store, &grads).unwrap();
            }
            (
                store.get("a.w").unwrap().clone(),
                store.get("a.b").unwrap().clone(),
            )
        };
        assert_eq!(run(), run());
    }
}
