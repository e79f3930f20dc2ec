use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Real, Tape, Tensor, Var};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Lookup {
            kind: "parameter",
            key: name.to_string(),
        })?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::dim("set_param", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape. Parameters for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                if trainable(n) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape<T>) -> Bound {
        self.bind(tape, |_| true)
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
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

fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `in x out` drawn from N(0, gain^2 / in), zero bias.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut Stream,
    ) -> Self {
        let std = gain / (in_dim.max(1) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), normal(&[in_dim, out_dim], std, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        tape.add_rows(h, bound.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[1, dim], T::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta))
    }
}

/// `x + inner2(act(inner1(x)))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub inner1: Linear,
    pub inner2: Linear,
    pub activation: Activation,
}

impl ResidualBlock {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize, activation: Activation, rng: &mut Stream) -> Self {
        Self {
            inner1: Linear::new(params, &format!("{name}.fc1"), dim, dim, 1.0, rng),
            inner2: Linear::new(params, &format!("{name}.fc2"), dim, dim, 0.5, rng),
            activation,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.inner1.forward(tape, bound, x)?;
        let h = self.activation.apply(tape, h);
        let h = self.inner2.forward(tape, bound, h)?;
        tape.add(x, h)
    }
}

/// Pre-norm transformer block: causal multi-head self-attention followed by
/// a feed-forward layer, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut Stream,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            norm1: LayerNorm::new(params, &format!("{name}.ln1"), model_dim),
            query: Linear::new(params, &format!("{name}.q"), model_dim, inner, 1.0, rng),
            key: Linear::new(params, &format!("{name}.k"), model_dim, inner, 1.0, rng),
            value: Linear::new(params, &format!("{name}.v"), model_dim, inner, 1.0, rng),
            out: Linear::new(params, &format!("{name}.o"), inner, model_dim, 0.5, rng),
            norm2: LayerNorm::new(params, &format!("{name}.ln2"), model_dim),
            ff1: Linear::new(params, &format!("{name}.ff1"), model_dim, 4 * model_dim, 1.0, rng),
            ff2: Linear::new(params, &format!("{name}.ff2"), 4 * model_dim, model_dim, 0.5, rng),
            heads,
            head_dim,
        }
    }

    /// `x` is (batch * tokens) x model_dim.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, tokens: usize) -> Result<Var> {
        let n = self.norm1.forward(tape, bound, x)?;
        let q = self.query.forward(tape, bound, n)?;
        let k = self.key.forward(tape, bound, n)?;
        let v = self.value.forward(tape, bound, n)?;
        let a = tape.causal_attention(q, k, v, tokens, self.heads)?;
        let a = self.out.forward(tape, bound, a)?;
        let h = tape.add(x, a)?;
        let n = self.norm2.forward(tape, bound, h)?;
        let f = self.ff1.forward(tape, bound, n)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, bound, f)?;
        tape.add(h, f)
    }
}

/// Token-grid transformer with learned positions. Input and output are
/// batch x (tokens * model_dim).
#[derive(Debug, Clone)]
pub struct CausalTransformer {
    pub positions: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub tokens: usize,
    pub model_dim: usize,
}

impl CausalTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        tokens: usize,
        model_dim: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut Stream,
    ) -> Self {
        let positions = params.add(format!("{name}.pos"), normal(&[tokens, model_dim], 0.02, rng));
        let blocks = (0..layers)
            .map(|l| AttentionBlock::new(params, &format!("{name}.block{l}"), model_dim, heads, head_dim, rng))
            .collect();
        Self {
            positions,
            blocks,
            tokens,
            model_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let batch = tape.value(x).rows();
        if tape.value(x).cols() != self.tokens * self.model_dim {
            return Err(Error::dim("transformer", &shape, &[self.tokens * self.model_dim]));
        }
        let h = tape.reshape(x, &[batch * self.tokens, self.model_dim])?;
        let mut h = tape.add_rows(h, bound.var(self.positions))?;
        for block in &self.blocks {
            h = block.forward(tape, bound, h, self.tokens)?;
        }
        tape.reshape(h, &[batch, self.tokens * self.model_dim])
    }
}

/// Plain stack of linear layers; hidden layers use LayerNorm + activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dims: &[usize], activation: Activation, rng: &mut Stream) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(params, &format!("{name}.fc{i}"), dims[i], dims[i + 1], 1.0, rng))
            .collect();
        let norms = (0..n - 1)
            .map(|i| LayerNorm::new(params, &format!("{name}.ln{i}"), dims[i + 1]))
            .collect();
        Self {
            layers,
            norms,
            activation,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if let Some(norm) = self.norms.get(i) {
                h = norm.forward(tape, bound, h)?;
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}
