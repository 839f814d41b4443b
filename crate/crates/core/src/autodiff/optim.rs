//! Adaptive moment estimation (Adam) over named parameter tensors.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moments: Vec<Vec<T>>,
    pub second_moments: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    /// Applies one update to every parameter and zeroes the gradients.
    ///
    /// `params` must be passed in the same order on every call; moment buffers
    /// are allocated lazily on the first step.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            match p.grad() {
                None => return Err(Error::MissingGradient(name.to_string())),
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::NumericFailure("optimizer_step gradient"))
                }
                _ => {}
            }
        }
        if self.first_moments.is_empty() {
            self.first_moments = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            self.second_moments = self.first_moments.clone();
        }
        if self.first_moments.len() != params.len()
            || self.first_moments.iter().zip(&params).any(|(m, (_, p))| m.len() != p.len())
        {
            return Err(invalid("optimizer state does not match the parameter list"));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.learning_rate), T::of(c.epsilon));

        for (k, (_, p)) in params.into_iter().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let m = &mut self.first_moments[k];
            let v = &mut self.second_moments[k];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
