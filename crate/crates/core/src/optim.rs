//! Adam with elementwise gradient clipping.

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
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
        let unit = 0.0..1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !unit.contains(&self.beta1) || !unit.contains(&self.beta2) {
            return Err(Error::Config(format!(
                "adam needs lr >= 0 and betas in [0, 1), got lr={} beta1={} beta2={}",
                self.lr, self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Clamps every value into `[-clip, clip]`.
pub fn clip_values(values: &mut [f64], clip: f64) {
    values.iter_mut().for_each(|g| *g = g.clamp(-clip, clip));
}

/// Clamps the accumulated gradient of every trainable parameter.
pub fn clip_gradients(store: &mut ParamStore, clip: f64) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        clip_values(p.grad.data_mut(), clip);
    }
}

/// Fails on the first trainable parameter holding a NaN or infinite gradient.
pub fn check_finite_grads(store: &ParamStore) -> Result<()> {
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at element {i}", p.name)));
        }
    }
    Ok(())
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_finite_grads(store)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        store.iter_mut().for_each(|p| p.grad.data_mut().iter_mut().for_each(|x| *x = g));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(&[0.5, -2.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s);
        set_grad(&mut s, 1.0);
        adam.step(&mut s).unwrap();
        let expect = 0.01 / (1.0 + 1e-8);
        let w = s.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - (0.5 - expect)).abs() < 1e-15);
        assert!((w[1] - (-2.0 - expect)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(&[1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn momentum_state_matters() {
        let mut a = store_with(&[0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &a);
        set_grad(&mut a, 1.0);
        adam.step(&mut a).unwrap();
        set_grad(&mut a, 0.3);
        adam.step(&mut a).unwrap();

        let mut b = store_with(&[0.0]);
        let mut once = Adam::new(
            AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            &b,
        );
        set_grad(&mut b, 1.0);
        once.step(&mut b).unwrap();
        assert_ne!(a.iter().next().unwrap().value.data(), b.iter().next().unwrap().value.data());
    }

    #[test]
    fn clipping() {
        let mut g = [0.5, -0.005, -5.0, 0.01];
        clip_values(&mut g, 0.01);
        assert_eq!(g, [0.01, -0.005, -0.01, 0.01]);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        s.add_buffer("running", Tensor::vector(vec![3.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_grad(&mut s, 1.0);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store_with(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        s.iter_mut().next().unwrap().grad.data_mut()[1] = f64::NAN;
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("gradient of w at element 1"));
    }
}
