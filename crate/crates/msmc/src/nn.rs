//! Parameter storage and the layer vocabulary shared by the analyzer and
//! the predictor: linear projections, strided 1-D convolutions, and
//! self-attention / convolutional block stacks.
//!
//! Parameters live in a name-keyed [`ParamStore`]. A forward pass binds the
//! needed entries onto a [`Tape`] through a [`Binder`], so gradient lookup
//! and optimizer updates are uniform over names.

use crate::autodiff::{Tape, Var};
use crate::config::BlockFamily;
use crate::error::{Error, Result};
use crate::vq::mix_seed;
use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// How a parameter tensor is filled at creation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
}

/// Name-keyed `f64` parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a parameter. The fill is derived from the store seed and the
    /// parameter name, so creation order never affects values.
    pub fn create(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter {name}"
        );
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::from_elem((rows, cols), 1.0),
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, fnv1a(name)));
                let dist = Uniform::new_inclusive(-bound, bound);
                Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
            }
        };
        self.entries.insert(name.to_string(), value);
    }

    pub fn insert_raw(&mut self, name: &str, value: Array2<f64>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Named parameter gradients, as returned by a backward pass.
pub type ParamGrads = Vec<(String, Array2<f64>)>;

/// Binds store parameters onto a tape on demand, once per name.
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("unknown parameter {name}"))
            .clone();
        let v = self.tape.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// All `(name, var)` pairs touched by the forward pass.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// `x @ w + b` with `w: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.create(
            &format!("{}.w", self.name),
            self.in_dim,
            self.out_dim,
            Init::XavierUniform,
            seed,
        );
        store.create(&format!("{}.b", self.name), 1, self.out_dim, Init::Zeros, seed);
    }

    pub fn apply(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let w = b.var(&format!("{}.w", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        t.add_bias(t.matmul(x, w), bias)
    }
}

/// Strided 1-D convolution over time; padding keeps `out_len = L / stride`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= stride, "kernel must cover the stride");
        Conv1d {
            name: name.into(),
            in_dim,
            out_dim,
            kernel,
            stride,
        }
    }

    /// Strided down-sampler with the kernel spanning one frame each side of
    /// the stride window.
    pub fn downsampler(name: impl Into<String>, in_dim: usize, out_dim: usize, rate: usize) -> Self {
        Conv1d::new(name, in_dim, out_dim, 2 * rate + 1, rate)
    }

    fn padding(&self) -> (usize, usize) {
        let total = self.kernel - self.stride;
        let left = total / 2;
        (left, total - left)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.create(
            &format!("{}.w", self.name),
            self.out_dim,
            self.kernel * self.in_dim,
            Init::XavierUniform,
            seed,
        );
        store.create(&format!("{}.b", self.name), 1, self.out_dim, Init::Zeros, seed);
    }

    pub fn apply(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let w = b.var(&format!("{}.w", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        let (pl, pr) = self.padding();
        t.conv1d(x, w, bias, self.kernel, self.stride, pl, pr)
    }
}

/// Learnable per-feature affine layer norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.create(&format!("{}.g", self.name), 1, self.dim, Init::Ones, seed);
        store.create(&format!("{}.b", self.name), 1, self.dim, Init::Zeros, seed);
    }

    pub fn apply(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let g = b.var(&format!("{}.g", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        t.layer_norm(x, g, bias, 1e-5)
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, dim));
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            pe[[t, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// One residual block: pre-norm multi-head self-attention plus a GELU
/// feed-forward for the transformer family, or a single convolution with a
/// residual connection for the conv family.
#[derive(Debug, Clone)]
pub struct Block {
    pub prefix: String,
    pub family: BlockFamily,
    pub dim: usize,
    pub attn_heads: usize,
}

impl Block {
    pub fn new(prefix: impl Into<String>, family: BlockFamily, dim: usize, attn_heads: usize) -> Self {
        Block {
            prefix: prefix.into(),
            family,
            dim,
            attn_heads,
        }
    }

    fn ff_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        match self.family {
            BlockFamily::Transformer => {
                LayerNorm::new(format!("{p}.ln1"), self.dim).register(store, seed);
                for gate in ["q", "k", "v", "o"] {
                    Linear::new(format!("{p}.attn.{gate}"), self.dim, self.dim)
                        .register(store, seed);
                }
                LayerNorm::new(format!("{p}.ln2"), self.dim).register(store, seed);
                Linear::new(format!("{p}.ff.w1"), self.dim, self.ff_dim()).register(store, seed);
                Linear::new(format!("{p}.ff.w2"), self.ff_dim(), self.dim).register(store, seed);
            }
            BlockFamily::Conv => {
                Conv1d::new(format!("{p}.conv"), self.dim, self.dim, 5, 1).register(store, seed);
                LayerNorm::new(format!("{p}.ln"), self.dim).register(store, seed);
            }
        }
    }

    pub fn apply(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let p = &self.prefix;
        match self.family {
            BlockFamily::Transformer => {
                let normed = LayerNorm::new(format!("{p}.ln1"), self.dim).apply(t, b, x);
                let attended = self.self_attention(t, b, normed);
                let x = t.add(x, attended);
                let normed = LayerNorm::new(format!("{p}.ln2"), self.dim).apply(t, b, x);
                let h = Linear::new(format!("{p}.ff.w1"), self.dim, self.ff_dim()).apply(t, b, normed);
                let h = t.gelu(h);
                let h = Linear::new(format!("{p}.ff.w2"), self.ff_dim(), self.dim).apply(t, b, h);
                t.add(x, h)
            }
            BlockFamily::Conv => {
                let h = Conv1d::new(format!("{p}.conv"), self.dim, self.dim, 5, 1).apply(t, b, x);
                let h = t.gelu(h);
                let sum = t.add(x, h);
                LayerNorm::new(format!("{p}.ln"), self.dim).apply(t, b, sum)
            }
        }
    }

    fn self_attention(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let p = &self.prefix;
        let q = Linear::new(format!("{p}.attn.q"), self.dim, self.dim).apply(t, b, x);
        let k = Linear::new(format!("{p}.attn.k"), self.dim, self.dim).apply(t, b, x);
        let v = Linear::new(format!("{p}.attn.v"), self.dim, self.dim).apply(t, b, x);
        let hd = self.dim / self.attn_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.attn_heads);
        for h in 0..self.attn_heads {
            let qh = t.slice_cols(q, h * hd, hd);
            let kh = t.slice_cols(k, h * hd, hd);
            let vh = t.slice_cols(v, h * hd, hd);
            let scores = t.scale(t.matmul(qh, t.transpose(kh)), scale);
            let weights = t.softmax_rows(scores);
            heads.push(t.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)
        };
        Linear::new(format!("{p}.attn.o"), self.dim, self.dim).apply(t, b, merged)
    }
}

/// A named stack of identical blocks.
#[derive(Debug, Clone)]
pub struct BlockStack {
    pub prefix: String,
    pub family: BlockFamily,
    pub dim: usize,
    pub attn_heads: usize,
    pub count: usize,
}

impl BlockStack {
    pub fn new(
        prefix: impl Into<String>,
        family: BlockFamily,
        dim: usize,
        attn_heads: usize,
        count: usize,
    ) -> Self {
        BlockStack {
            prefix: prefix.into(),
            family,
            dim,
            attn_heads,
            count,
        }
    }

    fn block(&self, i: usize) -> Block {
        Block::new(
            format!("{}.{i}", self.prefix),
            self.family,
            self.dim,
            self.attn_heads,
        )
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for i in 0..self.count {
            self.block(i).register(store, seed);
        }
    }

    /// Adds sinusoidal positions, then applies the blocks in order.
    pub fn apply(&self, t: &Tape, b: &Binder, x: Var) -> Var {
        let (len, dim) = t.shape(x);
        let mut h = t.add_const(x, &positional_encoding(len, dim));
        for i in 0..self.count {
            h = self.block(i).apply(t, b, h);
        }
        h
    }
}
