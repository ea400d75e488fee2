//! Named parameter storage shared by the networks, the optimizer and checkpoints.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

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
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
}

/// Ordered collection of named trainable tensors.
///
/// Each store has a process-unique id so a [`Tape`](crate::tensor::Tape) can
/// tell parameters of different networks apart. Clones get a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Load values by name from `(name, tensor)` pairs; every parameter must be covered.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = lookup(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor for parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` expects shape {:?} but checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
            p.grad = None;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Normal samples with the given std, redrawn outside two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std is finite and positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std is finite and positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], low: f32, high: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(low..high)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
