use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Plain SGD with inverse-time decay per communication round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied per round: `lr / (1 + decay·round)`.
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            decay: 0.01,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!(
                "decay must be nonnegative, got {}",
                self.decay
            )));
        }
        Ok(())
    }

    pub fn rate_at(&self, round: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay * round as f64)
    }
}

/// `p ← p − lr_t·grad(p)` for every parameter, then clears the grad slots.
pub fn sgd_step(params: &mut ParamStore, config: &SgdConfig, round: usize) -> Result<()> {
    config.validate()?;
    let lr = config.rate_at(round);
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.take_grad() {
            t.data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(p, g)| *p -= lr * g);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers follow the store's flat order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let n = params.num_scalars();
        Ok(Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        })
    }

    /// Applies one update from the accumulated grads, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.num_scalars() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimiser state holds {} scalars, store has {}",
                self.m.len(),
                params.num_scalars()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let c1 = 1.0 - c.beta1.powi(self.steps);
        let c2 = 1.0 - c.beta2.powi(self.steps);
        let mut offset = 0;
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            if let Some(g) = t.take_grad() {
                let m = &mut self.m[offset..offset + n];
                let v = &mut self.v[offset..offset + n];
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    *p -= c.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + c.epsilon);
                }
            }
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = single(3.5);
        s.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        sgd_step(&mut s, &SgdConfig::default(), 0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 3.5);
    }

    #[test]
    fn unit_gradient_step() {
        let mut s = single(1.0);
        s.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        sgd_step(&mut s, &SgdConfig::default(), 0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.99);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn inverse_time_decay_sequence() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.rate_at(0), 0.01);
        assert_eq!(cfg.rate_at(1), 0.01 / 1.01);
        assert_eq!(cfg.rate_at(2), 0.01 / 1.02);
    }

    #[test]
    fn adam_first_step_moves_by_the_rate() {
        let mut s = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        s.get_mut("w").unwrap().accumulate_grad(&[250.0]).unwrap();
        adam.step(&mut s).unwrap();
        // Bias correction makes the first step lr·sign(g), up to epsilon.
        assert!((s.get("w").unwrap().item() - (1.0 - 1e-3)).abs() < 1e-12);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut s = single(3.0);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s).unwrap();
        for _ in 0..2000 {
            let w = s.get("w").unwrap().item();
            s.get_mut("w").unwrap().accumulate_grad(&[2.0 * (w - 0.5)]).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert!((s.get("w").unwrap().item() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let cfg = SgdConfig {
            learning_rate: 0.0,
            decay: 0.0,
        };
        assert!(matches!(
            sgd_step(&mut single(1.0), &cfg, 0),
            Err(Error::Config(_))
        ));
    }
}
