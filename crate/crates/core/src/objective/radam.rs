//! Rectified Adam.
//!
//! Moments follow Adam. The variance of the adaptive step is only trusted
//! once the length of the approximated simple moving average,
//! `ρ_t = ρ_∞ − 2tβ₂ᵗ/(1−β₂ᵗ)` with `ρ_∞ = 2/(1−β₂) − 1`, exceeds 4; before
//! that the update is plain bias-corrected momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("{prefix}lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(format!("{prefix}beta1"), "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) || self.beta2 == 0.0 {
            return Err(Error::config(format!("{prefix}beta2"), "must be in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{prefix}eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                format!("{prefix}weight_decay"),
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RAdam {
    pub config: RAdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, params: &[Tensor]) -> Self {
        RAdam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `ρ_t` for step `t ≥ 1`.
    pub fn sma_length(&self, t: u64) -> f64 {
        let b2 = self.config.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t as f64);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Param(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first[i].len() {
                return Err(Error::Shape {
                    op: "radam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in tensor {i}"
                )));
            }
        }

        self.step += 1;
        let t = self.step;
        let RAdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powf(t as f64);
        let bias2 = 1.0 - beta2.powf(t as f64);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho = self.sma_length(t);
        let rect = if rho > 4.0 {
            Some(
                ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt(),
            )
        } else {
            None
        };

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if weight_decay > 0.0 {
                    *theta -= lr * weight_decay * *theta;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                match rect {
                    Some(r) => {
                        let adaptive = bias2.sqrt() / (v[j].sqrt() + eps);
                        *theta -= lr * r * m_hat * adaptive;
                    }
                    None => *theta -= lr * m_hat,
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
    fn first_step_is_plain_gradient() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::vector(vec![0.3, -0.1, 2.0])];
        let mut opt = RAdam::new(
            RAdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            &p,
        );
        assert!(opt.sma_length(1) <= 4.0);
        assert!((opt.sma_length(1) - 1.0).abs() < 1e-9);
        opt.step(&mut p, &g).unwrap();
        let want = [1.0 - 0.003, -2.0 + 0.001, 0.5 - 0.02];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let start = Tensor::vector(vec![1.0, -3.0]);
        let mut p = vec![start.clone()];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = RAdam::new(RAdamConfig::default(), &p);
        for _ in 0..100 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p[0], start);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut opt = RAdam::new(RAdamConfig::default(), &p);
        let err = opt
            .step(&mut p, &[Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn rectification_kicks_in_after_a_few_steps() {
        let opt = RAdam::new(RAdamConfig::default(), &[]);
        let first = (1..100).find(|&t| opt.sma_length(t) > 4.0).unwrap();
        assert_eq!(first, 5);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.7, -0.2])];
            let mut opt = RAdam::new(RAdamConfig::default(), &p);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), 0.1 * k as f64]);
                opt.step(&mut p, &[g]).unwrap();
            }
            p[0].clone()
        };
        assert_eq!(run(), run());
    }
}
