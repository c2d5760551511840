//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ − lr·λ·θ
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Scalar};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment buffers, parallel to the store's parameters.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Restores a saved optimizer state.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let fits = |m: &Vec<Vec<T>>| m.len() == self.first.len() && m.iter().zip(&self.first).all(|(a, b)| a.len() == b.len());
        if !fits(&first) || !fits(&second) {
            return Err(Error::Dimension("optimizer state does not match parameter layout".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update from the accumulated gradients, which are then zeroed.
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let eps = T::from_f64(c.eps);
        let one = T::one();

        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store(1.0);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        s.get_mut("w").unwrap().grad[0] = 2.5;
        opt.step(&mut s).unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        let expect = 1.0 - 1e-3 * 2.5 / (2.5 + 1e-8);
        assert!((s.get("w").unwrap().value.data()[0] - expect).abs() < 1e-15);
        assert_eq!(s.get("w").unwrap().grad, vec![0.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let mut s = store(2.0);
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert!((s.get("w").unwrap().value.data()[0] - 2.0 * (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_parameter() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        s.get_mut("w").unwrap().grad[0] = f64::NAN;
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
