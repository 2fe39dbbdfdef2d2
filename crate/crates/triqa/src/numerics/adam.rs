//! Adam optimizer with bias correction.

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from accumulated gradients. Trainable parameters
    /// without a gradient entry are left untouched (their gradient is zero,
    /// and moment decay without signal is not wanted for masked paths).
    /// A non-finite gradient aborts the step naming the offending parameter.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NanGrad(name.clone()));
            }
            let p = params.get(name)?;
            if !p.trainable {
                return Err(Error::Config(format!(
                    "gradient supplied for non-trainable parameter {name}"
                )));
            }
            if p.tensor.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.tensor.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = S::from_f64c(self.beta1);
        let b2 = S::from_f64c(self.beta2);
        let one = S::one();
        let corr1 = S::from_f64c(1.0 - self.beta1.powi(t));
        let corr2 = S::from_f64c(1.0 - self.beta2.powi(t));
        let lr = S::from_f64c(self.lr);
        let eps = S::from_f64c(self.eps);

        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (&self.m[name], &self.v[name]);
            params.update(name, |p| {
                for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    let mhat = mi / corr1;
                    let vhat = vi / corr2;
                    *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(value), true).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_lr_toward_minus_gradient() {
        // With bias correction, mhat = g and vhat = g^2 after one step, so
        // the update is lr * g / (|g| + eps) = lr * sign(g) (up to eps).
        let mut ps = scalar_param(0.0);
        let mut adam = AdamState::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(3.0));
        adam.step(&mut ps, &grads).unwrap();
        let p = ps.tensor("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-8, "p = {p}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut ps = scalar_param(0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..600 {
            let p = ps.tensor("p").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(2.0 * (p - 5.0)));
            adam.step(&mut ps, &grads).unwrap();
        }
        let p = ps.tensor("p").unwrap().data()[0];
        assert!((p - 5.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn nan_gradient_is_rejected_by_name() {
        let mut ps = scalar_param(0.0);
        let mut adam = AdamState::new(0.001);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(f64::NAN));
        let err = adam.step(&mut ps, &grads).unwrap_err();
        assert!(err.to_string().contains('p'), "got: {err}");
        // state must not have advanced
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut ps = scalar_param(1.0);
            let mut adam = AdamState::new(0.01);
            for i in 0..10 {
                let mut grads = BTreeMap::new();
                grads.insert("p".to_string(), Tensor::scalar(0.5 + i as f64 * 0.1));
                adam.step(&mut ps, &grads).unwrap();
            }
            ps.tensor("p").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let mut ps = scalar_param(1.25);
        let mut other = ParamSet::<f64>::new();
        other.insert("q", Tensor::scalar(2.0), true).unwrap();
        let mut adam = AdamState::new(0.1);
        let grads = BTreeMap::new();
        adam.step(&mut ps, &grads).unwrap();
        assert_eq!(ps.tensor("p").unwrap().data()[0], 1.25);
        drop(other);
    }

    #[test]
    fn gradient_for_frozen_parameter_is_an_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("running_mean", Tensor::scalar(0.0), false).unwrap();
        let mut adam = AdamState::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("running_mean".to_string(), Tensor::scalar(1.0));
        assert!(adam.step(&mut ps, &grads).is_err());
    }
}
