//! Adam over a flat parameter vector with per-segment learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. `segments` lists `(length, lr)` blocks covering `params` in order.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], segments: &[(usize, f64)]) -> Result<()> {
        let covered: usize = segments.iter().map(|s| s.0).sum();
        if params.len() != self.len() || grads.len() != self.len() || covered != self.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![params.len(), grads.len(), covered],
                rhs: vec![self.len()],
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut i = 0;
        for &(len, lr) in segments {
            for j in i..i + len {
                let g = grads[j];
                self.m[j] = beta1 * self.m[j] + (1.0 - beta1) * g;
                self.v[j] = beta2 * self.v[j] + (1.0 - beta2) * g * g;
                let m_hat = self.m[j] / bc1;
                let v_hat = self.v[j] / bc2;
                params[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += len;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut opt = Adam::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -5.0, 0.0], &[(2, 0.1), (1, 0.5)]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g, &[(2, 0.05)]).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut opt = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![0.0; 2];
        assert!(opt.step(&mut p, &[0.0], &[(2, 0.1)]).is_err());
        assert!(opt.step(&mut p, &[0.0, 0.0], &[(1, 0.1)]).is_err());
        assert!(matches!(
            opt.step(&mut p, &[f64::NAN, 0.0], &[(2, 0.1)]),
            Err(Error::Numeric(_))
        ));
        assert!(AdamConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
