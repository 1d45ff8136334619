use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, Element, Gradients, Shape, Tape, Volume};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Volume<T>,
    pub grad: Volume<T>,
}

/// Ordered collection of uniquely named parameters for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// He (fan-in) normal initialisation: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Element, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Volume<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let data = (0..shape.numel()).map(|_| T::from_f64(normal.sample(rng))).collect();
    Volume::from_vec(shape, data).expect("sized from shape")
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Volume<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Volume::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// `(name, shape)` of every parameter in registration order.
    pub fn manifest(&self) -> Vec<(String, Shape)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    /// Adds the tape gradients of a [`bind`](Self::bind) into `grad`.
    /// Parameters the loss does not reach keep their gradient unchanged.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Converts every value and gradient to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        let shape = Shape::scalar();
        s.add("a", Volume::zeros(shape)).unwrap();
        assert!(s.add("a", Volume::zeros(shape)).is_err());
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let shape = Shape::cube(1, 1, 2).unwrap();
        let a = s.add("a", Volume::full(shape, 1.0)).unwrap();
        s.add("b", Volume::full(shape, 2.0)).unwrap();
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let loss = tape.sum(bound[a]);
        let grads = tape.backward(loss).unwrap();
        s.accumulate(&bound, &grads);
        assert!(s.by_name("a").unwrap().grad.data().iter().all(|&g| g == 1.0));
        assert!(s.by_name("b").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn he_init_is_seeded() {
        let shape = Shape::new(8, 4, 3, 3, 3).unwrap();
        let a: Volume<f32> = he_normal(shape, 108, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Volume<f32> = he_normal(shape, 108, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let var = a.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / a.len() as f64;
        assert!((var - 2.0 / 108.0).abs() < 0.005);
    }
}
