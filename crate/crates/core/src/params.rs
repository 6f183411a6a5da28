//! Named parameter storage shared by every network module.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    /// Registers every parameter on the tape as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| tape.param(e.value.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect(),
        }
    }

    /// Overwrites values of same-named parameters from `other`.
    /// Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for src in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            if let Some(dst) = self.by_name_mut(&src.name) {
                if dst.shape() != src.value.shape() {
                    return Err(Error::dim("load_matching", dst.shape(), src.value.shape()));
                }
                *dst = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> String {
        self.digest_prefix("")
    }

    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.value).collect()
    }

    pub fn decay_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.decay).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

/// Name-addressed initializer: a parameter's initial values depend only on
/// the seed and its name, not on construction order.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed, std: 0.02 }
    }

    pub fn normal<T: Scalar>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        let digest = Sha256::digest(name.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        trunc_normal(shape, self.std, &mut crate::rng::derived_rng(self.seed, &[key]))
    }
}
