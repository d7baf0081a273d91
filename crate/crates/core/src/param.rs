//! Learnable parameters and the named store that owns them.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    One,
    Gaussian(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform {
        fan_in: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model, in creation order, under unique names.
///
/// Initial values are drawn from a ChaCha stream seeded at construction,
/// so a model built twice from the same seed is bit-identical.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config {
                path: name.to_string(),
                message: "duplicate parameter name".into(),
            });
        }
        let value = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::ones(shape),
            Init::Gaussian(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, &mut self.rng)
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            init,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_, T> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{:?}", p.value.shape()),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites every parameter with fresh Gaussian noise. Used by the
    /// gradient checks so that zero-initialised gates do not mask branches.
    pub fn perturb_all(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let noise = Tensor::<T>::randn(p.value.shape(), std, &mut rng);
            p.value = p.value.zip_map(&noise, |a, b| a + b).expect("same shape");
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
            rng: self.rng.clone(),
        }
    }
}

/// Name prefix view of a store used while building modules.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<T: Float> Scope<'_, T> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.add(&full, shape, init)
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        Scope {
            prefix: self.qualify(name),
            store: self.store,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }
}
