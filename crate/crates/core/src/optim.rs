//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, p) in params.iter() {
                s.insert(name.clone(), Tensor::zeros(p.shape()))
                    .expect("names are unique");
            }
            s
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One optimizer step. Every parameter must have a gradient of matching shape.
pub fn adam_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        g.expect_same_shape(p, "adam_update")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (cfg.lr, cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let m = state.m.get_mut(name).expect("state mirrors params").data_mut();
        let v = state.v.get_mut(name).expect("state mirrors params").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = m.f64() / bc1;
            let vhat = v.f64() / bc2;
            *p -= T::of(lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_null_step() {
        let mut p = scalar_store(0.7);
        let mut st = AdamState::new(&p);
        let g: IndexMap<_, _> = [("p".to_string(), Tensor::scalar(0.0))].into();
        adam_update(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.7);
        assert_eq!(st.m.get("p").unwrap().data()[0], 0.0);
        assert_eq!(st.v.get("p").unwrap().data()[0], 0.0);
    }

    #[test]
    fn first_step_matches_hand_recursion() {
        // m̂ = 1, v̂ = 1, so Δ = -lr / (1 + eps).
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        let g: IndexMap<_, _> = [("p".to_string(), Tensor::scalar(1.0))].into();
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        adam_update(&mut p, &g, &mut st, &cfg).unwrap();
        let delta = p.get("p").unwrap().data()[0];
        assert!((delta - -9.999999900000003e-4).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        let err = adam_update(&mut p, &IndexMap::new(), &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "p"));
    }
}
