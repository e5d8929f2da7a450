use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub(crate) value: Arc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Named learnable tensors.
///
/// Each parameter draws its initial values from its own stream seeded by
/// `(seed, name)`, so adding or removing a module never shifts the initial
/// values of the others.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "parameter {name} registered twice");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform_bound(name, shape, bound)
    }

    pub fn uniform_bound(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Mutable access; copies the buffer only if a live graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> crate::Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(crate::Error::dim("param set", cur.shape(), value.shape()));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
