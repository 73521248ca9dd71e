use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{NumError, Result};

pub type ParamId = usize;

/// Named trainable tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered collection of parameters. Names are unique; the insertion order is
/// the layout used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    /// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Accumulate `g` into the parameter's gradient buffer.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id];
        match &mut p.grad {
            Some(buf) => {
                for (a, b) in buf.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => p.grad = Some(g.clone()),
        }
    }

    /// Element-type conversion, preserving names, order, and flags.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let id = out.add(&p.name, p.value.cast::<U>()).expect("names stay unique");
            out.get_mut(id).trainable = p.trainable;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn uniform_init_within_fan_in_bound() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(3, "init");
        let id = ps.add_uniform("w", vec![16, 4], 4, &mut rng).unwrap();
        let bound = 0.5f32;
        assert!(ps.value(id).data().iter().all(|x| x.abs() <= bound));
        // not degenerate
        assert!(ps.value(id).data().iter().any(|x| x.abs() > 1e-4));
    }
}
