use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with a unique dotted name such as `smm.stage2.merge.w`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Normal(f64),
    /// Each trailing 4x4 block is the identity plus `N(0, std)` noise.
    IdentityPlusNoise(f64),
}

/// Owns all parameters of one model instance, in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Registers a new parameter; names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name `{name}`"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| contract_err!("{e}"))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::IdentityPlusNoise(std) => {
                if n % 16 != 0 {
                    return Err(dim_err!("identity init needs trailing 4x4 blocks, got {shape:?}"));
                }
                let dist = Normal::new(0.0, std).map_err(|e| contract_err!("{e}"))?;
                (0..n)
                    .map(|k| {
                        let e = k % 16;
                        let eye = if e / 4 == e % 4 { 1.0 } else { 0.0 };
                        eye + dist.sample(&mut self.rng)
                    })
                    .collect()
            }
        };
        let tensor = Tensor::new(shape.to_vec(), data)?.with_grad();
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replaces the values of a parameter, keeping its shape and gradient slot.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                value.shape()
            ));
        }
        p.tensor.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| contract_err!("unknown parameter `{name}`"))?;
        self.set(id, value)
    }

    pub(crate) fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.data_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds `grads` into the parameters' gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.entries {
            let buf = self.params[id.0].tensor.grad_mut().expect("parameters carry gradients");
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.grad().expect("parameters carry gradients")
    }
}

/// Gradients of a scalar loss with respect to every parameter it reached.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
