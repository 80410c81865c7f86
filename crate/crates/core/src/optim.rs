//! AdamW over the model's single-precision parameter arrays.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::Param;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(LabError::InvalidArgument("optimizer settings out of range".into()))
        }
    }
}

pub struct AdamW {
    cfg: OptimizerConfig,
    lr: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, lr: f64, params: &[&mut Param]) -> Result<Self> {
        cfg.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(LabError::InvalidArgument(format!("learning rate {lr}")));
        }
        Ok(AdamW {
            cfg,
            lr,
            t: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update; `grads[i]` is `None` for frozen parameters, which are left untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<Matrix>]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(LabError::DimensionMismatch(format!(
                "{} params, {} grads, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        let mut sq = 0.0;
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.data.len() != p.len() {
                    return Err(LabError::DimensionMismatch(format!("gradient for {}", p.name)));
                }
                sq += g.data.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(LabError::NonFinite("gradient norm".into()));
        }
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in p.data.iter_mut().enumerate() {
                let gk = g.data[k] * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
                let wk = *w as f64;
                *w = (wk - self.lr * (update + self.cfg.weight_decay * wk)) as f32;
            }
        }
        Ok(norm)
    }
}
