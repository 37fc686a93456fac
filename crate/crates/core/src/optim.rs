//! AdamW with decoupled weight decay and polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. `grads[i]` belongs to the i-th parameter of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(Error::MissingGrad(params.name(i).to_string())),
                Some(g) if g.len() != params.tensor(i).len() => {
                    return Err(Error::ShapeMismatch {
                        op: "adamw",
                        lhs: params.tensor(i).shape().to_vec(),
                        rhs: vec![g.len()],
                    })
                }
                _ => {}
            }
        }
        if self.config.lr < 0.0 {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let g = g.unwrap();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let w = params.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                w[j] -= lr * weight_decay * w[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("poly_lr: max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!(
            "poly_lr: iter {iter} exceeds max_iter {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("w", Tensor::scalar(w));
        p
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(cfg(0.1, 0.0), &p);
        opt.step(&mut p, &[Some(&[1.0])]).unwrap();
        assert!((p.tensor(0).item() - 0.9).abs() < 1e-3);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.37);
        let mut opt = OptimizerState::new(cfg(0.1, 0.0), &p);
        opt.step(&mut p, &[Some(&[0.0])]).unwrap();
        assert_eq!(p.tensor(0).item(), 0.37);
    }

    #[test]
    fn pure_decay() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(cfg(0.1, 0.1), &p);
        opt.step(&mut p, &[Some(&[0.0])]).unwrap();
        assert!((p.tensor(0).item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(cfg(0.1, 0.0), &p);
        let err = opt.step(&mut p, &[None]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn deterministic_steps() {
        let run = || {
            let mut p = single(0.5);
            let mut opt = OptimizerState::new(cfg(0.01, 0.01), &p);
            for k in 0..10 {
                let g = [(k as f64).sin()];
                opt.step(&mut p, &[Some(&g)]).unwrap();
            }
            p.tensor(0).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.3, 0.9).unwrap(), 0.3);
        assert_eq!(poly_lr(100, 100, 0.3, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 1.0, 0.9).unwrap() - 0.5359).abs() < 1e-4);
        assert!(poly_lr(0, 0, 1.0, 0.9).is_err());
    }
}
