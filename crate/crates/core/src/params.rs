//! Named parameter storage, deterministic initialisation and the small layer types
//! (convolutions, channel norms, learnable scalars) shared by the model modules.
//!
//! Layers only hold [`ParamId`]s. A [`Session`] binds every stored tensor as a leaf of
//! one [`Graph`], so the same layer structure serves training (tracked leaves),
//! inference (constant leaves) and gradient checking (caller-supplied leaves).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{ConvOptions, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor with the same-named entry of `other`. Both stores must
    /// hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.names.len()];
        let mut unexpected = Vec::new();
        for (name, tensor) in other {
            match self.index.get(name) {
                Some(&i) => {
                    if seen[i] {
                        return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
                    }
                    if self.tensors[i].shape() != tensor.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name:?} has shape {:?}, model expects {:?}",
                            tensor.shape(),
                            self.tensors[i].shape()
                        )));
                    }
                    seen[i] = true;
                }
                None => unexpected.push(name.clone()),
            }
        }
        let missing: Vec<&str> = seen
            .iter()
            .zip(&self.names)
            .filter(|(s, _)| !**s)
            .map(|(_, n)| n.as_str())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: missing {missing:?}, unexpected {unexpected:?}"
            )));
        }
        for (name, tensor) in other {
            self.tensors[self.index[name]] = tensor.clone();
        }
        Ok(())
    }
}

/// How stored parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Leaves that collect gradients.
    Trainable,
    /// Constant leaves; nothing is differentiated.
    Frozen,
}

/// One forward pass worth of parameter leaves on a graph.
pub struct Session<'g, T: Real> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Session<'g, T> {
    pub fn bind(graph: &'g Graph<T>, store: &ParamStore<T>, binding: Binding) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| match binding {
                Binding::Trainable => graph.param(t.clone()),
                Binding::Frozen => graph.constant(t.clone()),
            })
            .collect();
        Self { graph, vars }
    }

    /// Uses caller-created leaves, one per stored parameter in store order.
    pub fn from_vars(graph: &'g Graph<T>, vars: Vec<Var<'g, T>>) -> Self {
        Self { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Creates named, deterministically initialised parameters.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) samples redrawn until they fall inside ±2·std.
    pub fn truncated_normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, value)
    }

    pub fn scalar(&mut self, name: impl Into<String>, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::scalar(T::from_f64(value)))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape.to_vec(), T::from_f64(value)))
    }
}

/// Weight initialisation of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal with std `1/sqrt(fan_in)`, zero bias.
    FanIn,
    /// All zeros, weight and bias.
    Zero,
}

/// A 2-D convolution (`[C_out, C_in/g, k, k]` kernel) with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub opts: ConvOptions,
}

impl Conv {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        opts: ConvOptions,
        init: Init,
    ) -> Result<Self> {
        if opts.groups == 0 || !c_in.is_multiple_of(opts.groups) || !c_out.is_multiple_of(opts.groups) {
            return Err(Error::Config(format!(
                "{name}: {c_in}->{c_out} channels not divisible into {} groups",
                opts.groups
            )));
        }
        let cin_g = c_in / opts.groups;
        let shape = [c_out, cin_g, k, k];
        let weight = match init {
            Init::FanIn => b.truncated_normal(&shape, 1.0 / ((cin_g * k * k) as f64).sqrt()),
            Init::Zero => Tensor::zeros(shape.to_vec()),
        };
        Ok(Self {
            weight: b.add(format!("{name}.weight"), weight)?,
            bias: b.filled(format!("{name}.bias"), &[c_out], 0.0)?,
            c_in,
            c_out,
            k,
            opts,
        })
    }

    /// 1×1 convolution.
    pub fn pointwise<T: Real>(b: &mut Builder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(b, name, c_in, c_out, 1, ConvOptions::same(1), Init::FanIn)
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(s.var(self.weight), Some(s.var(self.bias)), self.opts)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * (self.c_in / self.opts.groups) * self.k * self.k + self.c_out
    }

    /// Multiply-accumulates for a `[h, w]` input, bias excluded.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let oh = (h + 2 * self.opts.padding - self.k) / self.opts.stride + 1;
        let ow = (w + 2 * self.opts.padding - self.k) / self.opts.stride + 1;
        (batch * self.c_out * (self.c_in / self.opts.groups) * self.k * self.k * oh * ow) as u64
    }
}

/// Stride-`k` transposed convolution (`[C_in, C_out, k, k]` kernel) with bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvTranspose {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        // each output pixel receives c_in contributions when stride == k
        let weight = b.truncated_normal(&[c_in, c_out, k, k], 1.0 / (c_in as f64).sqrt());
        Ok(Self {
            weight: b.add(format!("{name}.weight"), weight)?,
            bias: b.filled(format!("{name}.bias"), &[c_out], 0.0)?,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv_transpose2d(s.var(self.weight), Some(s.var(self.bias)), self.k)
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k + self.c_out
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        (batch * self.c_in * self.c_out * self.k * self.k * h * w) as u64
    }
}

/// Layer norm across the channels of a `[B, C, H, W]` map, per pixel.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.filled(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: b.filled(format!("{name}.beta"), &[channels], 0.0)?,
            channels,
        })
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.permute(&[0, 2, 3, 1])?
            .layer_norm(s.var(self.gamma), s.var(self.beta), NORM_EPS)?
            .permute(&[0, 3, 1, 2])
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Accumulates multiply-accumulate counts per named submodule.
#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    entries: Vec<(String, u64)>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_macs(&mut self, group: &str, macs: u64) {
        match self.entries.iter_mut().find(|(g, _)| g == group) {
            Some((_, m)) => *m += macs,
            None => self.entries.push((group.to_string(), macs)),
        }
    }

    /// Per-group floating-point operations, one multiply-accumulate = 2 flops.
    pub fn groups(&self) -> Vec<(String, u64)> {
        self.entries.iter().map(|(g, m)| (g.clone(), 2 * m)).collect()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.entries.iter().map(|(_, m)| m).sum::<u64>()
    }
}
