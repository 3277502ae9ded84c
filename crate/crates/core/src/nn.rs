//! Parameter storage and the transformer building blocks shared by the
//! encoder, the full-self-attention fusion stack and the MAE decoders.

use crate::autodiff::{Gradients, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param_set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients aligned with the parameter store; unused parameters get `None`.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

/// Parameter initializers.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut SplitMix64,
}

impl Init<'_> {
    pub fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.normal());
        self.store.add(name, t, false)
    }

    pub fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), false)
    }

    pub fn ones(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0), false)
    }

    /// Xavier-uniform weight matrix, subject to weight decay.
    pub fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| a * (2.0 * rng.uniform() - 1.0));
        self.store.add(name, t, true)
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{prefix}.w"), fan_in, fan_out),
            b: self.zeros(format!("{prefix}.b"), vec![fan_out]),
        }
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gain: self.ones(format!("{prefix}.gain"), vec![dim]),
            bias: self.zeros(format!("{prefix}.bias"), vec![dim]),
        }
    }

    pub fn mha(&mut self, prefix: &str, dim: usize) -> Mha {
        Mha {
            q: self.linear(&format!("{prefix}.q"), dim, dim),
            k: self.linear(&format!("{prefix}.k"), dim, dim),
            v: self.linear(&format!("{prefix}.v"), dim, dim),
            o: self.linear(&format!("{prefix}.o"), dim, dim),
        }
    }

    pub fn block(&mut self, prefix: &str, dim: usize, mlp_ratio: usize) -> Block {
        Block {
            norm1: self.norm(&format!("{prefix}.norm1"), dim),
            attn: self.mha(&format!("{prefix}.attn"), dim),
            norm2: self.norm(&format!("{prefix}.norm2"), dim),
            fc1: self.linear(&format!("{prefix}.fc1"), dim, dim * mlp_ratio),
            fc2: self.linear(&format!("{prefix}.fc2"), dim * mlp_ratio, dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_row(y, b)
    }

    pub fn numel(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Projected multi-head self-attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    pub fn apply(&self, g: &mut Graph, x: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        multi_head_attention(g, self, x, x, heads, segments)
    }

    pub fn numel(dim: usize) -> usize {
        4 * Linear::numel(dim, dim)
    }
}

/// Attention with queries from `xq` and keys/values from `xkv`: per-head
/// scaled dot-product attention, heads concatenated, output-projected.
pub fn multi_head_attention(
    g: &mut Graph,
    w: &Mha,
    xq: Var,
    xkv: Var,
    heads: usize,
    segments: &[Segment],
) -> Result<Var> {
    let dim = g.value(xq).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dimension {dim} is not divisible by {heads} heads"
        )));
    }
    let q = w.q.apply(g, xq)?;
    let k = w.k.apply(g, xkv)?;
    let v = w.v.apply(g, xkv)?;
    let a = g.tape.attention(q, k, v, heads, segments)?;
    w.o.apply(g, a)
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Mha,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn apply(&self, g: &mut Graph, x: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let h = self.norm1.apply(g, x)?;
        let h = self.attn.apply(g, h, heads, segments)?;
        let x = g.tape.add(x, h)?;
        let h = self.norm2.apply(g, x)?;
        let h = self.fc1.apply(g, h)?;
        let h = g.tape.gelu(h)?;
        let h = self.fc2.apply(g, h)?;
        g.tape.add(x, h)
    }

    pub fn numel(dim: usize, mlp_ratio: usize) -> usize {
        2 * 2 * dim + Mha::numel(dim) + Linear::numel(dim, dim * mlp_ratio) + Linear::numel(dim * mlp_ratio, dim)
    }
}

/// Attention FLOPs of one layer over the given segments: `QKᵀ` and `PV`,
/// two flops per multiply-add.
pub fn attention_flops(segment_lens: &[usize], dim: usize) -> u64 {
    segment_lens.iter().map(|&n| 4 * (n * n * dim) as u64).sum()
}
