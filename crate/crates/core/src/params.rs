//! Named learnable tensors and their initialisers.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Name and shape of one stored parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameters in insertion order. The order is part of the serialized form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.params
            .iter()
            .map(|(name, t)| ParamSpec {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Raw little-endian values of every parameter, in store order.
    pub fn encode(&self, out: &mut Vec<u8>) {
        for t in self.params.values() {
            for &x in t.data() {
                x.write_le(out);
            }
        }
    }

    /// Inverse of [`ParamStore::encode`]. Returns the store and the number of
    /// bytes consumed.
    pub fn decode(specs: &[ParamSpec], bytes: &[u8]) -> Result<(Self, usize)> {
        let size = T::DTYPE.size();
        let mut store = Self::new();
        let mut off = 0;
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let end = off + n * size;
            if end > bytes.len() {
                return Err(Error::Dataset(format!(
                    "parameter `{}` needs {} bytes at offset {off}, only {} available",
                    spec.name,
                    n * size,
                    bytes.len() - off.min(bytes.len())
                )));
            }
            let data = bytes[off..end].chunks_exact(size).map(T::read_le).collect();
            store.insert(spec.name.clone(), Tensor::new(&spec.shape, data)?)?;
            off = end;
        }
        Ok((store, off))
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }
}

/// Normal draws with standard deviation `std`, resampled outside ±2σ.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.insert("b", truncated_normal(&[3, 2], 1.0, &mut rng)).unwrap();
        store.insert("a", truncated_normal(&[5], 0.02, &mut rng)).unwrap();
        let mut bytes = Vec::new();
        store.encode(&mut bytes);
        let (back, used) = ParamStore::<f32>::decode(&store.specs(), &bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, store);
        assert_eq!(back.names().collect::<Vec<_>>(), ["b", "a"]);
        assert!(ParamStore::<f32>::decode(&store.specs(), &bytes[..10]).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = truncated_normal(&[4000], 0.5, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        let sd = (t.sq_norm() / 4000.0).sqrt();
        assert!(sd > 0.4 && sd < 0.5, "{sd}");
    }
}
