use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named initializer. Values are drawn in `f64` and rounded to the store's
/// scalar type, so `f32` and `f64` stores agree up to rounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    Zeros,
    Constant(f64),
    Uniform { low: f64, high: f64 },
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: InitSpec,
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_values(shape: &[usize], init: InitSpec, seed: u64) -> Vec<f64> {
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        InitSpec::Zeros => vec![0.0; n],
        InitSpec::Constant(c) => vec![c; n],
        InitSpec::Uniform { low, high } => (0..n).map(|_| rng.gen_range(low..high)).collect(),
        InitSpec::HeUniform { fan_in } => {
            let b = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-b..b)).collect()
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
    base_seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(base_seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            base_seed,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: InitSpec) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let seed = self.base_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name);
        let value = Tensor::from_f64(shape.to_vec(), &init_values(shape, init, seed))?;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            init,
            seed,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Re-draws every parameter from its initializer and seed.
    pub fn reinitialize(&mut self) {
        for p in &mut self.params {
            p.value = Tensor::from_f64(p.value.shape().to_vec(), &init_values(p.value.shape(), p.init, p.seed)).unwrap();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                    seed: p.seed,
                })
                .collect(),
            index: self.index.clone(),
            base_seed: self.base_seed,
        }
    }
}
