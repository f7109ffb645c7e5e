use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::NnetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Nadam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_rho() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Rmsprop, learning_rate, rho: 0.9, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn nadam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Nadam, ..Self::rmsprop(learning_rate) }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.rho)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnetError::InvalidSchedule(format!("bad optimizer config {self:?}")))
        }
    }
}

/// Optimizer moments, one buffer per parameter tensor. Created lazily (zeros)
/// on the first step.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// Current learning rate (may be decayed during training).
    pub learning_rate: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, learning_rate: config.learning_rate, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) -> Result<(), NnetError> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(NnetError::ShapeMismatch {
                expected: params.iter().map(Vec::len).collect(),
                got: grads.iter().map(Vec::len).collect(),
            });
        }
        if self.second.is_empty() {
            self.second = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            if self.config.kind == OptimizerKind::Nadam {
                self.first = self.second.clone();
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        let c = &self.config;
        match c.kind {
            OptimizerKind::Rmsprop => {
                let rho = T::from_f64_lossy(c.rho);
                let one_minus = T::from_f64_lossy(1.0 - c.rho);
                let lr = T::from_f64_lossy(lr);
                let eps = T::from_f64_lossy(c.epsilon);
                for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    for ((pv, &gv), sv) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *sv = rho * *sv + one_minus * gv * gv;
                        *pv = *pv - lr * gv / (sv.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Nadam => {
                let t = self.step as i32;
                let (b1, b2) = (c.beta1, c.beta2);
                // Nesterov look-ahead: bias-corrected momentum for step t+1 plus
                // the bias-corrected current gradient.
                let m_coef = T::from_f64_lossy(b1 / (1.0 - b1.powi(t + 1)));
                let g_coef = T::from_f64_lossy((1.0 - b1) / (1.0 - b1.powi(t)));
                let v_corr = T::from_f64_lossy(1.0 / (1.0 - b2.powi(t)));
                let (tb1, tb1c) = (T::from_f64_lossy(b1), T::from_f64_lossy(1.0 - b1));
                let (tb2, tb2c) = (T::from_f64_lossy(b2), T::from_f64_lossy(1.0 - b2));
                let lr = T::from_f64_lossy(lr);
                let eps = T::from_f64_lossy(c.epsilon);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = tb1 * *mv + tb1c * gv;
                        *vv = tb2 * *vv + tb2c * gv * gv;
                        let m_hat = m_coef * *mv + g_coef * gv;
                        let v_hat = *vv * v_corr;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_first_step() {
        let mut st = OptimizerState::<f64>::new(OptimizerConfig::rmsprop(0.001));
        let mut p = vec![vec![0.0]];
        st.step(&mut p, &[vec![1.0]]).unwrap();
        let expected = -0.001 / (0.1f64.sqrt() + 1e-8);
        assert!((p[0][0] - expected).abs() < 1e-15);
        assert!((p[0][0] + 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        for cfg in [OptimizerConfig::rmsprop(0.01), OptimizerConfig::nadam(0.01)] {
            let mut st = OptimizerState::<f32>::new(cfg);
            let mut p = vec![vec![1.5f32, -2.0]];
            st.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
            assert_eq!(p[0], vec![1.5, -2.0]);
        }
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut st = OptimizerState::<f32>::new(OptimizerConfig::nadam(0.01));
        let mut p = vec![vec![0.0f32; 3]];
        assert!(st.step(&mut p, &[vec![0.0; 2]]).is_err());
    }
}
