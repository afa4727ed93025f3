//! Named parameter storage: the unit of checkpointing and selective transfer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    Zeros,
    Ones,
    /// `U(-bound, bound)`; linears use `bound = 1/sqrt(fan_in)`.
    Uniform {
        bound: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(flatten)]
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    /// Draws in f64 and casts, so f32 and f64 stores built from the same
    /// specs hold the same values up to rounding.
    pub fn materialize<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        match self.scheme {
            InitScheme::Zeros => Tensor::zeros(shape),
            InitScheme::Ones => Tensor::ones(shape),
            InitScheme::Uniform { bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: InitSpec,
}

/// Parameters ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, p: Parameter<T>) -> Result<()> {
        if self.params.contains_key(&p.name) {
            return Err(Error::PrefixSet(format!(
                "duplicate parameter `{}`",
                p.name
            )));
        }
        self.params.insert(p.name.clone(), p);
        Ok(())
    }

    /// Creates and inserts a parameter initialised from `init`.
    pub fn init(&mut self, name: String, shape: &[usize], init: InitSpec) -> Result<()> {
        let tensor = init.materialize(shape);
        self.insert(Parameter { name, tensor, init })
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::PrefixSet(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .values()
                .map(|p| (p.name.clone(), tape.param(&p.name, p.tensor.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (no gradients recorded).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .values()
                .map(|p| (p.name.clone(), tape.constant(p.tensor.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            init: p.init,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::PrefixSet(format!("missing parameter `{name}`")))
    }
}

/// Stable per-parameter seed derived from a base seed and the parameter name.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finaliser mixed with the base.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        let spec = InitSpec {
            scheme: InitScheme::Zeros,
            seed: 0,
        };
        s.init("a.w".into(), &[2], spec).unwrap();
        assert!(s.init("a.w".into(), &[2], spec).is_err());
    }

    #[test]
    fn uniform_init_is_seeded_and_bounded() {
        let spec = InitSpec {
            scheme: InitScheme::Uniform { bound: 0.25 },
            seed: 9,
        };
        let a: Tensor<f32> = spec.materialize(&[4, 8]);
        let b: Tensor<f32> = spec.materialize(&[4, 8]);
        assert_eq!(a, b);
        assert!(a.max_abs() <= 0.25);
        let c: Tensor<f64> = spec.materialize(&[4, 8]);
        assert!(c.cast::<f32>().max_abs_diff(&a) == 0.0);
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x.y"), derive_seed(3, "x.y"));
    }
}
