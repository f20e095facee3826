//! Adam and the flat-then-linear learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter dtype.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g: Vec<f64> = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let mut w: Vec<f64> = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1()?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if st.m.len() != g.len() {
                return Err(Error::Shape(format!(
                    "optimizer state for `{name}` has the wrong size"
                )));
            }
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for i in 0..g.len() {
                let gi = g[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
            let updated = Tensor::from_vec(w, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&updated)?;
        }
        Ok(())
    }

    /// Optimizer state as named tensors (`m.<param>`, `v.<param>`) plus the step count.
    pub fn export(&self) -> Result<(BTreeMap<String, Tensor>, u64)> {
        let mut out = BTreeMap::new();
        for (name, st) in &self.state {
            let n = st.m.len();
            out.insert(
                format!("m.{name}"),
                Tensor::from_vec(st.m.clone(), n, &candle_core::Device::Cpu)?,
            );
            out.insert(
                format!("v.{name}"),
                Tensor::from_vec(st.v.clone(), n, &candle_core::Device::Cpu)?,
            );
        }
        Ok((out, self.step))
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        let mut state: BTreeMap<String, Moments> = BTreeMap::new();
        for (key, t) in tensors {
            let values: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if let Some(name) = key.strip_prefix("m.") {
                state.entry(name.to_string()).or_default().m = values;
            } else if let Some(name) = key.strip_prefix("v.") {
                state.entry(name.to_string()).or_default().v = values;
            } else {
                return Err(Error::Checkpoint(format!(
                    "unexpected optimizer entry `{key}`"
                )));
            }
        }
        if state.values().any(|s| s.m.len() != s.v.len()) {
            return Err(Error::Checkpoint(
                "optimizer moments disagree in size".into(),
            ));
        }
        self.state = state;
        self.step = step;
        Ok(())
    }
}

/// Constant learning rate for `epochs_flat` epochs, then linear decay reaching
/// zero at epoch `epochs_flat + epochs_decay`. Epochs are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
}

impl LrSchedule {
    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.epochs_flat || self.epochs_decay == 0 {
            return self.base_lr;
        }
        let k = (epoch - self.epochs_flat).min(self.epochs_decay);
        self.base_lr * (1.0 - k as f64 / self.epochs_decay as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base_lr: 5e-6,
            epochs_flat: 50,
            epochs_decay: 100,
        };
        assert_eq!(s.lr_at_epoch(1), 5e-6);
        assert_eq!(s.lr_at_epoch(50), 5e-6);
        assert_eq!(s.lr_at_epoch(51), 5e-6 * (1.0 - 1.0 / 100.0));
        assert_eq!(s.lr_at_epoch(100), 5e-6 * 0.5);
        assert_eq!(s.lr_at_epoch(150), 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.uniform("w", 4, 1.0)?;
        let target = Tensor::new(&[0.5f64, -0.25, 1.0, 2.0], &Device::Cpu)?;
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let loss = (&w - &target)?.sqr()?.sum_all()?;
            let grads = loss.backward()?;
            opt.step(&store, &grads, 1e-2)?;
        }
        let err: f64 = (&w - &target)?.abs()?.max_all()?.to_scalar()?;
        assert!(err < 1e-3, "{err}");
        assert_eq!(opt.steps_taken(), 2000);
        Ok(())
    }

    #[test]
    fn first_step_moves_by_lr() -> Result<()> {
        // with bias correction the first step has magnitude ~lr per coordinate
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.zeros("w", 1)?;
        let loss = (&w * 3.0)?.sum_all()?;
        let grads = loss.backward()?;
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&store, &grads, 0.1)?;
        let v: Vec<f64> = w.to_vec1()?;
        assert!((v[0] + 0.1).abs() < 1e-6);
        let (state, step) = opt.export()?;
        let mut other = Adam::new(AdamConfig::default());
        other.import(&state, step)?;
        assert_eq!(other.steps_taken(), 1);
        Ok(())
    }
}
