//! Bias-corrected Adam over a parameter store. Each distinct storage is
//! updated exactly once per step; parameters without a gradient this step
//! are left untouched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Precision;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct StepReport {
    /// Distinct storages written this step.
    pub updated: usize,
    /// Storage ids touched, for the one-update-per-storage invariant.
    pub touched_ids: Vec<u64>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState::new(0.9, 0.997, 1e-8)
    }
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One in-place update. `grads` maps parameter names to gradient
    /// buffers of matching length; any non-finite gradient aborts with a
    /// diagnostic naming the parameter.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        prec: Precision,
        global_step: u64,
    ) -> Result<StepReport> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: global_step,
                    detail: format!("non-finite gradient in {name}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut report = StepReport::default();
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(
                g.len(),
                param.values.len(),
                "gradient length mismatch for {name}: {} vs {}",
                g.len(),
                param.values.len()
            );
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((slot, &gi), (mi, vi)) in param
                .values
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = prec.quantize(self.beta1 * *mi + (1.0 - self.beta1) * gi);
                *vi = prec.quantize(self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *slot = prec.quantize(*slot - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            report.updated += 1;
            report.touched_ids.push(param.storage_id);
        }
        Ok(report)
    }

    /// Optimizer-state sidecar bytes: magic, step counter, then per
    /// parameter the first and second moment payloads in f32.
    pub fn to_sidecar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"SYMO1");
        out.extend_from_slice(&self.step.to_le_bytes());
        for (name, m) in &self.first {
            let v = &self.second[name];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for &x in m {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }
}
