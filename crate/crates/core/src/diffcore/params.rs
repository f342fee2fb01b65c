//! Named parameter storage with gradient buffers.

use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Non-trainable entries (e.g. running statistics) never receive gradients.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(DiffError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<F>) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamSet<F>) -> Result<(), DiffError> {
        if other.len() != self.len() {
            return Err(DiffError::ParamMismatch(format!("{} entries vs {}", other.len(), self.len())));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(DiffError::ParamMismatch(format!("{} {:?} vs {} {:?}", dst.name, dst.value.shape(), src.name, src.value.shape())));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(p.add("w", Tensor::zeros(&[2]), true).is_err());
        assert_eq!(p.id_of("w"), Some(ParamId(0)));
    }

    #[test]
    fn grads_accumulate_and_reset() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::zeros(&[3]), true).unwrap();
        let g = Tensor::full(&[3], 1.5);
        p.accumulate_grad(id, &g);
        p.accumulate_grad(id, &g);
        assert_eq!(p.grad(id).data(), &[3.0, 3.0, 3.0]);
        p.zero_grads();
        assert_eq!(p.grad(id).sum_f64(), 0.0);
    }
}
