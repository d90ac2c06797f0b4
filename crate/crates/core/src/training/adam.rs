use std::collections::BTreeMap;

use crate::config::OptimConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Gradients, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&OptimConfig> for AdamConfig {
    fn from(o: &OptimConfig) -> Self {
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers are created lazily, one per
/// parameter that has received a gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`. Names absent from
    /// `grads` are left untouched; their moments do not decay.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let n = params.get(name)?.len();
            if g.len() != n {
                return shape_err(format!("gradient for {name} has {} elements, parameter has {n}", g.len()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (name, g) in grads.iter() {
            let mom = self.moments.entry(name.to_owned()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let p = params.get_mut(name)?;
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form: applies one Adam update in place.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tape, Tensor};

    fn setup(values: Vec<f64>) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::row(values).unwrap()).unwrap();
        p
    }

    /// Gradient of `Σ c·w` is the constant vector `c`.
    fn linear_grads(p: &ParameterSet, c: &[f64]) -> Gradients {
        let mut tape = Tape::new();
        let w = tape.param(p, "w").unwrap();
        let k = tape.constant(Tensor::row(c.to_vec()).unwrap());
        let m = tape.mul(w, k).unwrap();
        let l = tape.sum(m).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = setup(vec![1.0, -2.0]);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default());
        let g = linear_grads(&p, &[0.0, 0.0]);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.values_equal(&before));
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn constant_gradient_moves_lr_per_step() {
        let mut p = setup(vec![0.0, 0.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let g = linear_grads(&p, &[3.0, -0.25]);
        let mut prev = p.get("w").unwrap().data().to_vec();
        for step in 1..=2000 {
            opt.step(&mut p, &g).unwrap();
            let now = p.get("w").unwrap().data().to_vec();
            let deltas: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| a - b).collect();
            // With bias correction the step is exactly lr·g/(|g| + eps') from the start.
            if step > 10 {
                assert!((deltas[0] + 5e-4).abs() < 1e-9, "{deltas:?}");
                assert!((deltas[1] - 5e-4).abs() < 1e-9, "{deltas:?}");
            }
            prev = now;
        }
        assert_eq!(opt.step_count(), 2000);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p_small = setup(vec![0.0]);
        let mut p_big = setup(vec![0.0, 0.0]);
        let g = linear_grads(&p_small, &[1.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        assert!(opt.step(&mut p_big, &g).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
