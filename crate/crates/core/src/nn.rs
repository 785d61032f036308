//! Small neural building blocks on top of the autodiff graph: a named
//! parameter store, a per-forward binding context, and linear / MLP /
//! layer-norm / multihead-attention modules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// All model parameters, keyed by hierarchical dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter {}", name);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// Initialization helpers; all draws go through one seeded stream so model
/// construction is deterministic.
pub struct Initializer<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(self.rng)).collect();
        Tensor::new(shape, data)
    }

    /// Kaiming fan-in scaling for rectifier networks.
    pub fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One forward pass: owns the graph and binds each named parameter at most
/// once so shared modules (e.g. refinement rounds) reuse the same node.
pub struct Ctx<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, NodeId>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx { g: Graph::new(), store, bound: BTreeMap::new() }
    }

    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.g.param(name, self.store.get(name));
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear { name: name.into(), din, dout }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        store.insert(&format!("{}.w", self.name), init.kaiming(vec![self.din, self.dout], self.din));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.dout]));
    }

    /// Residual-branch outputs start at zero so the branch is an identity.
    pub fn init_zero(&self, store: &mut ParamStore, _init: &mut Initializer) {
        store.insert(&format!("{}.w", self.name), Tensor::zeros(vec![self.din, self.dout]));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.dout]));
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.p(&format!("{}.w", self.name));
        let b = ctx.p(&format!("{}.b", self.name));
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

/// Two-layer rectifier MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{}.fc1", name), din, hidden),
            fc2: Linear::new(format!("{}.fc2", name), hidden, dout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.fc1.init(store, init);
        self.fc2.init(store, init);
    }

    /// Second layer zero so the whole MLP starts at zero (residual branches).
    pub fn init_zero_out(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.fc1.init(store, init);
        self.fc2.init_zero(store, init);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.g.relu(h);
        self.fc2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        LayerNorm { name: name.into(), d }
    }

    pub fn init(&self, store: &mut ParamStore, _init: &mut Initializer) {
        store.insert(&format!("{}.g", self.name), Tensor::full(vec![self.d], 1.0));
        store.insert(&format!("{}.o", self.name), Tensor::zeros(vec![self.d]));
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let g = ctx.p(&format!("{}.g", self.name));
        let o = ctx.p(&format!("{}.o", self.name));
        ctx.g.layer_norm_rows(x, g, o)
    }
}

/// Dense multihead dot-product attention with per-head projection matrices
/// and a zero-initialized output projection (residual identity at init).
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    pub name: String,
    pub d: usize,
    pub heads: usize,
}

impl MultiheadAttention {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Self {
        let name = name.into();
        assert!(d % heads == 0, "width {} not divisible by heads {}", d, heads);
        MultiheadAttention { name, d, heads }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        let hd = self.head_dim();
        for h in 0..self.heads {
            for proj in ["q", "k", "v"] {
                store.insert(
                    &format!("{}.{}{}", self.name, proj, h),
                    init.kaiming(vec![self.d, hd], self.d),
                );
            }
        }
        store.insert(&format!("{}.out.w", self.name), Tensor::zeros(vec![self.d, self.d]));
        store.insert(&format!("{}.out.b", self.name), Tensor::zeros(vec![self.d]));
    }

    /// queries [Nq,D] attend over keys/values [Nk,D]; returns [Nq,D]
    /// (the attention branch output, before any residual add).
    pub fn forward(&self, ctx: &mut Ctx, queries: NodeId, keys: NodeId, values: NodeId) -> NodeId {
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = ctx.p(&format!("{}.q{}", self.name, h));
            let wk = ctx.p(&format!("{}.k{}", self.name, h));
            let wv = ctx.p(&format!("{}.v{}", self.name, h));
            let q = ctx.g.matmul(queries, wq);
            let k = ctx.g.matmul(keys, wk);
            let v = ctx.g.matmul(values, wv);
            let scores = ctx.g.matmul_nt(q, k);
            let scores = ctx.g.scale(scores, scale);
            let attn = ctx.g.softmax_rows(scores);
            head_outs.push(ctx.g.matmul(attn, v));
        }
        let cat = ctx.g.concat_cols(&head_outs);
        let w = ctx.p(&format!("{}.out.w", self.name));
        let b = ctx.p(&format!("{}.out.b", self.name));
        let y = ctx.g.matmul(cat, w);
        ctx.g.add_row(y, b)
    }
}
