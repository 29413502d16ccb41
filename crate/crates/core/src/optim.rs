//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
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
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("adam_eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of completed steps.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One Adam update. Gradients are checked for finiteness before any
/// parameter is touched.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.names.iter().zip(&params.tensors).zip(grads) {
        p.check_same_shape(g)?;
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ModelParams {
        ModelParams { names: vec!["w".into()], tensors: vec![Tensor::from_vec(vec![v])] }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(0.7);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[1])], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.tensors[0].data(), &[0.7]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::from_vec(vec![1.0])], &mut s, &cfg).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.tensors[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::from_vec(vec![f64::NAN])], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(p.tensors[0].data(), &[1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn moments_shape_match_parameters() {
        let spec = crate::model::ModelSpec::default();
        let p = spec.init(0).unwrap();
        let s = AdamState::new(&p);
        for ((t, m), v) in p.tensors.iter().zip(&s.m).zip(&s.v) {
            assert_eq!(t.shape(), m.shape());
            assert_eq!(t.shape(), v.shape());
        }
    }
}
