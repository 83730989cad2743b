//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        // betas/epsilon are not stated anywhere upstream; standard defaults.
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    /// One Adam step over named parameters. Parameters with no gradient entry
    /// are left untouched (their moments are not advanced either).
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &HashMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, param) in params.iter_mut() {
            let grad = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if grad.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient shape {:?} vs parameter {:?} for {name}",
                    grad.shape(),
                    param.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::OptimizerDivergence(format!(
                    "non-finite gradient for {name}"
                )));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
            }
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
            }
            let m = &self.first[name.as_str()];
            let v = &self.second[name.as_str()];
            for ((p, mv), vv) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (Tensor, AdamState) {
        (Tensor::new(vec![1], vec![v]).unwrap(), AdamState::new())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, mut st) = one_param(1.5);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[1]));
        st.step(&mut [("w".to_string(), &mut p)], &grads, 0.1).unwrap();
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn zero_lr_leaves_params_but_moments_advance() {
        let (mut p, mut st) = one_param(1.5);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![2.0]).unwrap());
        st.step(&mut [("w".to_string(), &mut p)], &grads, 0.0).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert!(st.first["w"].data()[0] != 0.0);
        assert!(st.second["w"].data()[0] != 0.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        // hand-rolled scalar Adam with constant gradient 1.0
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut theta = 0.5_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mhat / (vhat.sqrt() + eps);
        }

        let (mut p, mut st) = one_param(0.5);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
        st.step(&mut [("w".to_string(), &mut p)], &grads, lr).unwrap();
        st.step(&mut [("w".to_string(), &mut p)], &grads, lr).unwrap();
        assert!((p.data()[0] - theta).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let (mut p, mut st) = one_param(0.0);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let err = st
            .step(&mut [("w".to_string(), &mut p)], &grads, 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::OptimizerDivergence(_)));
    }
}
