//! Central finite-difference verification of analytic gradients.

use super::adam::Param;
use super::layers::Layer;
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// A scalar function of one tensor with an analytic gradient.
pub trait Objective<T: Real> {
    fn value(&mut self, x: &Tensor<T>) -> Result<f64>;
    fn gradient(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// `|a - b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Disagreement between an analytic gradient tensor and its finite-difference
/// estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    /// Largest [`relative_error`] over the entries.
    pub elementwise: f64,
    /// Largest `|a_i - n_i|` divided by the largest `|a_j|, |n_j|` of the
    /// tensor. Unlike `elementwise`, it stays meaningful for entries far
    /// below the tensor's scale, which central differences cannot resolve
    /// to a fixed relative precision in single precision.
    pub scaled: f64,
}

impl GradError {
    pub fn of(analytic: &[f64], numeric: &[f64]) -> Self {
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let mut e = GradError::default();
        for (a, n) in analytic.iter().zip(numeric) {
            e.elementwise = e.elementwise.max(relative_error(*a, *n));
            e.scaled = e.scaled.max((a - n).abs() / scale);
        }
        e
    }

    pub fn max(self, other: GradError) -> GradError {
        GradError {
            elementwise: self.elementwise.max(other.elementwise),
            scaled: self.scaled.max(other.scaled),
        }
    }
}

/// Analytic gradient versus central differences with step `eps`.
pub fn grad_check<T: Real, O: Objective<T> + ?Sized>(obj: &mut O, x: &Tensor<T>, eps: f64) -> Result<GradError> {
    assert!(eps > 0.0, "eps must be positive");
    let analytic: Vec<f64> = obj.gradient(x)?.data().iter().map(|v| v.as_f64()).collect();
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + T::lit(eps);
        let up = obj.value(&probe)?;
        probe.data_mut()[i] = orig - T::lit(eps);
        let down = obj.value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(GradError::of(&analytic, &numeric))
}

/// Closure-backed objective.
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<T, V, G> Objective<T> for FnObjective<V, G>
where
    T: Real,
    V: FnMut(&Tensor<T>) -> Result<f64>,
    G: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    fn value(&mut self, x: &Tensor<T>) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        (self.gradient)(x)
    }
}

/// Reduces a layer to the scalar `<projection, layer(x)>` so its input
/// gradient can be checked.
pub struct LayerProbe<'a, T: Real> {
    pub layer: &'a mut Layer<T>,
    pub projection: Tensor<T>,
}

impl<T: Real> Objective<T> for LayerProbe<'_, T> {
    fn value(&mut self, x: &Tensor<T>) -> Result<f64> {
        Ok(self.layer.forward(x)?.dot_f64(&self.projection))
    }

    fn gradient(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.layer.backward(x, &self.projection)
    }
}

/// Checks every parameter gradient of `layer` under `<projection, layer(input)>`,
/// each parameter tensor on its own scale.
pub fn param_grad_check<T: Real>(
    layer: &mut Layer<T>,
    input: &Tensor<T>,
    projection: &Tensor<T>,
    eps: f64,
) -> Result<GradError> {
    for p in layer.params_mut() {
        p.zero_grad();
    }
    layer.backward(input, projection)?;
    let analytic: Vec<Tensor<T>> = layer.params().iter().map(|p| p.grad.clone()).collect();
    let n_params = analytic.len();
    let mut worst = GradError::default();
    for (pi, grad) in analytic.iter().enumerate().take(n_params) {
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let bump = |layer: &mut Layer<T>, delta: f64| {
                let p: &mut Param<T> = layer.params_mut().swap_remove(pi);
                let v = p.value.data()[i];
                p.value.data_mut()[i] = v + T::lit(delta);
            };
            let orig = layer.params()[pi].value.data()[i];
            bump(layer, eps);
            let up = layer.forward(input)?.dot_f64(projection);
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            bump(layer, -eps);
            let down = layer.forward(input)?.dot_f64(projection);
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let a: Vec<f64> = grad.data().iter().map(|v| v.as_f64()).collect();
        worst = worst.max(GradError::of(&a, &numeric));
    }
    for p in layer.params_mut() {
        p.zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::Conv3x3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_away_from_kink_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_vec(&[6], vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]).unwrap();
        let mut relu = Layer::Relu;
        let mut probe = LayerProbe {
            layer: &mut relu,
            projection: Tensor::uniform(&[6], -1.0, 1.0, &mut rng),
        };
        assert!(grad_check(&mut probe, &x, 1e-3).unwrap().elementwise < 1e-6);
    }

    #[test]
    fn conv_gradient_on_small_input_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Layer::Conv3x3(Conv3x3::<f32>::new("c", 1, 2, 1, &mut rng));
        let x = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let proj = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let mut probe = LayerProbe {
            layer: &mut conv,
            projection: proj.clone(),
        };
        let err = grad_check(&mut probe, &x, 1e-3).unwrap().elementwise;
        assert!(err < 1e-3, "input grad rel err {err}");
        let err = param_grad_check(&mut conv, &x, &proj, 1e-3).unwrap().elementwise;
        assert!(err < 1e-3, "param grad rel err {err}");
    }
}
