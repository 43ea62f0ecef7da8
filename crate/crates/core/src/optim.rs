//! SGD with momentum, coupled weight decay and an optional cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Anneal the learning rate to zero along a half cosine over the run.
    pub cosine: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if !self.cosine || total_steps == 0 {
            return self.learning_rate;
        }
        let t = step as f64 / total_steps as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    spec: OptimizerSpec,
    velocity: Vec<f64>,
    step: usize,
    total_steps: usize,
}

impl Sgd {
    pub fn new(spec: OptimizerSpec, param_count: usize, total_steps: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            velocity: vec![0.0; param_count],
            step: 0,
            total_steps,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.spec.lr_at(self.step, self.total_steps)
    }

    /// Applies one update in place and advances the schedule.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grad.len()
            )));
        }
        let lr = self.current_lr();
        let (mu, wd) = (self.spec.momentum, self.spec.weight_decay);
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_anneals_to_zero() {
        let spec = OptimizerSpec::default();
        assert_eq!(spec.lr_at(0, 100), 0.01);
        assert!((spec.lr_at(50, 100) - 0.005).abs() < 1e-15);
        assert!(spec.lr_at(100, 100).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_step() {
        let spec = OptimizerSpec {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            cosine: false,
        };
        let mut opt = Sgd::new(spec, 2, 10).unwrap();
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[1.0, -1.0]).unwrap();
        assert_eq!(p, vec![0.9, 2.1]);
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = OptimizerSpec::default();
        spec.learning_rate = 0.0;
        assert!(Sgd::new(spec, 1, 1).is_err());
    }
}
