//! Plain Adam with bias correction, one moment pair per parameter.

use serde::{Deserialize, Serialize};

use crate::tensor::{Param, Result, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Steps of linear learning-rate warm-up from 0; 0 disables.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0 }
    }
}

/// Per-parameter first/second moment buffers plus a shared step counter.
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[&Param]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState { cfg, step: 0, m, v }
    }

    /// One update over all parameters. Grads must align with the parameter
    /// order used at construction. A NaN/Inf gradient aborts the whole step.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[&[f32]]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "grad count mismatch");
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {} has {} elements, grad has {}", p.name, p.numel(), g.len()),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("adam gradients"));
            }
        }
        self.step += 1;
        let t = self.step;
        let c = &self.cfg;
        let mut lr = c.learning_rate;
        if c.warmup_steps > 0 && t <= c.warmup_steps {
            lr *= t as f32 / c.warmup_steps as f32;
        }
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(val: f32) -> Param {
        Param::new("p", vec![1], vec![val])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = one_param(0.5);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[&[0.0]]).unwrap();
        assert_eq!(p.data[0], 0.5);
    }

    #[test]
    fn first_step_magnitude_matches_formula() {
        // g=1, lr=0.1: bias correction makes the first update ≈ −lr.
        let mut p = one_param(0.0);
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p.data[0] + 0.1).abs() < 1e-4, "got {}", p.data[0]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = one_param(0.0);
        let cfg = AdamConfig { learning_rate: 0.01, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        for _ in 0..50 {
            st.step(&mut [&mut p], &[&[2.5]]).unwrap();
        }
        // Steady-state Adam step is −lr·sign(g).
        assert!(p.data[0] < -0.3 && p.data[0] > -0.6, "got {}", p.data[0]);
        assert_eq!(st.step, 50);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = one_param(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let err = st.step(&mut [&mut p], &[&[f32::NAN]]);
        assert!(err.is_err());
        assert_eq!(p.data[0], 1.0);
        assert_eq!(st.step, 0);
    }
}
