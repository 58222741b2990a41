use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Ordered collection of named parameters. Order is insertion order and is
/// part of the model's identity (checkpoints and hashing rely on it).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].grad.data_mut()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds `src` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, src: &[T]) {
        for (g, &s) in self.params[id.0].grad.data_mut().iter_mut().zip(src) {
            *g += s;
        }
    }

    /// Copy of the values (moments and step count reset) in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// One bias-corrected Adam update. Gradients are checked first so a
    /// non-finite gradient leaves every parameter untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let step_size = T::of(cfg.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(cfg.eps);
        for p in &mut self.params {
            let Param {
                value, grad, m, v, ..
            } = p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *w -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[1], vec![w]).unwrap());
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_gradient() {
        // t=1: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1, step = lr·1/(1+1e-8)
        let (mut s, id) = scalar_store(0.0);
        s.grad_mut(id)[0] = 1.0;
        s.adam_step(&AdamConfig::default()).unwrap();
        let want = -0.001 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut s, id) = scalar_store(0.75);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data()[0], 0.75);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id)[0] = f64::NAN;
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn memoryless_adam_steps_along_gradient_sign() {
        let cfg = AdamConfig {
            lr: 0.5,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        };
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        s.grad_mut(id).copy_from_slice(&[3.0, -1e-4, 250.0]);
        s.adam_step(&cfg).unwrap();
        assert_eq!(s.value(id).data(), &[-0.5, 0.5, -0.5]);
    }
}
