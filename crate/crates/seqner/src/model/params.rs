//! Named trainable parameter storage.
//!
//! Parameters live outside any graph; each forward pass binds them as
//! leaves into a fresh tape. Names are hierarchical (`enc.l0.attn.wq`) so
//! components can be selected by prefix for gradient checking and for
//! weight sharing across model variants.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name);
        self.values.push(tensor);
        id
    }

    pub fn add_randn(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Ids whose name starts with the given prefix.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Copies values from `other` for every name both stores share.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.find(name) {
                assert_eq!(
                    self.values[i].shape,
                    other.values[src.0].shape,
                    "shape mismatch for shared parameter {name}"
                );
                self.values[i].data.clone_from(&other.values[src.0].data);
                copied += 1;
            }
        }
        copied
    }

    /// Order-sensitive fingerprint of all parameter bits; equal iff every
    /// value is bit-identical.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            mix(name.as_bytes());
            for v in &t.data {
                mix(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_selection_and_fingerprint() {
        let mut p = ParamStore::new();
        p.add("enc.l0.wq", Tensor::zeros(vec![2, 2]));
        p.add("enc.l1.wq", Tensor::zeros(vec![2, 2]));
        p.add("dec.l0.wq", Tensor::zeros(vec![2, 2]));
        assert_eq!(p.ids_with_prefix("enc.").len(), 2);
        let before = p.fingerprint();
        p.get_mut(ParamId(0)).data[3] = 1e-300;
        assert_ne!(before, p.fingerprint());
    }

    #[test]
    fn copy_shared_ignores_missing() {
        let mut a = ParamStore::new();
        a.add("shared", Tensor::zeros(vec![2]));
        a.add("only_a", Tensor::zeros(vec![2]));
        let mut b = ParamStore::new();
        b.add("shared", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        b.add("only_b", Tensor::zeros(vec![2]));
        assert_eq!(a.copy_shared_from(&b), 1);
        assert_eq!(a.get(ParamId(0)).data, vec![1.0, 2.0]);
        assert_eq!(a.get(ParamId(1)).data, vec![0.0, 0.0]);
    }
}
