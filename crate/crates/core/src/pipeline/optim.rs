//! Diagonal Adam over the full parameter set.

use crate::error::{CoreError, Result};
use crate::model::ModelParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment state shares the parameter layout, so moments pair
/// with tensors by the stable parameter names.
pub struct Adam {
    cfg: AdamConfig,
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        Adam { cfg, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let g_named = grads.named_tensors();
        let p_named = params.named_tensors_mut();
        let m_named = self.m.named_tensors_mut();
        let v_named = self.v.named_tensors_mut();
        if g_named.len() != p_named.len() {
            return Err(CoreError::InvalidArgument(
                "gradient layout does not match parameter layout".into(),
            ));
        }
        for (((p, g), m), v) in p_named.into_iter().zip(g_named).zip(m_named).zip(v_named) {
            debug_assert_eq!(p.0, g.0);
            let (p, g, m, v) = (p.1, g.1, m.1, v.1);
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                md[i] = self.cfg.beta1 * md[i] + (1.0 - self.cfg.beta1) * gd[i];
                vd[i] = self.cfg.beta2 * vd[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
