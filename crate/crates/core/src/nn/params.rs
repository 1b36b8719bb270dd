use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters keyed by dot-separated path. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Mark every entry whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Entries under `prefix`, names unchanged.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Move every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f64 images of every value
    /// whose name starts with `prefix` (empty prefix hashes everything).
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub const WEIGHT_STD: f64 = 0.02;

impl Init {
    pub fn tensor<T: Real, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            }),
        }
    }
}
