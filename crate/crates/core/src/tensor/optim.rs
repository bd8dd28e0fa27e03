use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `p -= lr · weight_decay · p` on every step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected Adam update of `param`; `step` is 1-based.
    pub fn apply(
        &mut self,
        param: &mut Tensor,
        grad: &Tensor,
        step: u64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if param.shape() != grad.shape() || self.m.len() != param.numel() {
            return Err(Error::dim(format!(
                "adam: param {:?}, grad {:?}, state {}",
                param.shape(),
                grad.shape(),
                self.m.len()
            )));
        }
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        }
        Ok(())
    }
}

/// Adam over a set of named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every `(name, param, grad)` triple.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        self.step += 1;
        for (name, param, grad) in updates {
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::zeros(param.numel()));
            state.apply(param, grad, self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            lr: 0.01,
            ..Default::default()
        };
        let mut p = Tensor::vector(vec![2.0, -1.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::zeros(2);
        st.apply(&mut p, &g, 1, &cfg).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((p.data()[1] + 1.0 * (1.0 - 0.001)).abs() < 1e-15);

        let cfg0 = AdamConfig::default();
        let mut q = Tensor::vector(vec![3.0]);
        AdamState::zeros(1)
            .apply(&mut q, &Tensor::zeros(&[1]), 1, &cfg0)
            .unwrap();
        assert_eq!(q.data(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let cfg = AdamConfig {
            lr: 0.001,
            ..Default::default()
        };
        let mut p = Tensor::scalar(0.5);
        AdamState::zeros(1)
            .apply(&mut p, &Tensor::scalar(1.0), 1, &cfg)
            .unwrap();
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default());
            let mut p = Tensor::vector(vec![0.3, -0.7, 1.1]);
            for k in 0..20 {
                let g = Tensor::vector(vec![0.1 * k as f64, -0.2, (k as f64).sin()]);
                adam.step([("w", &mut p, &g)]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0]);
        assert!(AdamState::zeros(2)
            .apply(&mut p, &g, 1, &AdamConfig::default())
            .is_err());
    }
}
