use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Learnable tensor with its gradient accumulator and ADAM moments.
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step_count: self.step_count,
        }
    }
}

/// ADAM with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update to every param and zeroes the gradients.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step<T: Real>(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of param `{}`", bad.name)));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let Param {
                value, grad, m, v, ..
            } = &mut **p;
            for (((x, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m1 = b1 * m.as_f64() + (1.0 - b1) * g;
                let v1 = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::lit(m1);
                *v = T::lit(v1);
                let update = self.learning_rate * (m1 / c1) / ((v1 / c2).sqrt() + self.epsilon);
                *x = T::lit(x.as_f64() - update);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// One ADAM step with the default moment coefficients.
pub fn adam_step<T: Real>(params: &mut [&mut Param<T>], learning_rate: f64) -> Result<()> {
    Adam::new(learning_rate).step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param<f64> {
        Param::new("w", Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    /// Scalar ADAM written out independently of the tensor code.
    fn reference_adam(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (0.0, 0.0, 0.0);
        let mut out = vec![];
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = scalar(0.0);
        p.grad.data_mut()[0] = 1.0;
        adam_step(&mut [&mut p], 0.1).unwrap();
        let want = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.value.data()[0] - want).abs() < 1e-15);
        assert_eq!(p.step_count, 1);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn second_step_matches_reference() {
        let mut p = scalar(0.0);
        let want = reference_adam(&[1.0, 1.0], 0.1);
        for w in want {
            p.grad.data_mut()[0] = 1.0;
            adam_step(&mut [&mut p], 0.1).unwrap();
            assert!((p.value.data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_noop_on_value() {
        let mut p = scalar(0.7);
        adam_step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut p = scalar(0.0);
        p.grad.data_mut()[0] = f64::NAN;
        let err = adam_step(&mut [&mut p], 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.step_count, 0);
    }
}
