//! Parameter store and the small layer library the model is built from.
//!
//! Parameters are registered once under path-style names ("spatial.gru.w_z");
//! a [`Forward`] context turns them into tape leaves on demand, caching the
//! leaf so repeated use accumulates gradients on one node. Freezing is a
//! per-parameter trainable bit: the optimizer skips frozen parameters and
//! reports zero gradient for them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.names.len() - 1)
    }

    pub fn gaussian(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamId {
        // Fan-in scaled init.
        let sd = 1.0 / crate::mathx::sqrt(rows.max(1) as f64);
        self.register(name, Tensor::randn(rows, cols, sd, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.register(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.register(name, Tensor::filled(rows, cols, 1.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "param shape change");
        self.values[id.0] = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    /// Checksum over all parameters matching `prefix`, in name order.
    pub fn checksum_by_prefix(&self, prefix: &str) -> u64 {
        let mut ordered: Vec<(&String, &Tensor)> =
            self.names.iter().zip(self.values.iter()).collect();
        ordered.sort_by(|a, b| a.0.cmp(b.0));
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, tensor) in ordered {
            if name.starts_with(prefix) {
                h ^= crate::util::fnv1a64(name.as_bytes());
                h = h.wrapping_mul(0x100000001b3);
                h ^= crate::util::f64_checksum(&tensor.data);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Load values by name; every parameter must be present with the right
    /// shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let value = map.get(name).ok_or_else(|| {
                CoreError::usage(format!("checkpoint missing parameter '{name}'"))
            })?;
            if value.shape() != self.values[i].shape() {
                return Err(CoreError::usage(format!(
                    "checkpoint parameter '{name}' is {}, expected {}",
                    value.describe(),
                    self.values[i].describe()
                )));
            }
            self.values[i] = value.clone();
        }
        Ok(())
    }

    /// Load only parameters under `prefix` from the map, e.g. restoring the
    /// stage-1 weights into a stage-2 model.
    pub fn load_map_prefix(&mut self, map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            let value = map.get(name).ok_or_else(|| {
                CoreError::usage(format!("checkpoint missing parameter '{name}'"))
            })?;
            if value.shape() != self.values[i].shape() {
                return Err(CoreError::usage(format!(
                    "checkpoint parameter '{name}' is {}, expected {}",
                    value.describe(),
                    self.values[i].describe()
                )));
            }
            self.values[i] = value.clone();
        }
        Ok(())
    }
}

/// One forward pass: a tape plus the parameter set feeding it.
pub struct Forward<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ParamSet,
    cache: RefCell<BTreeMap<usize, usize>>,
    dropout: f64,
    dropout_rng: RefCell<Option<Rng>>,
}

impl<'t, 'p> Forward<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Forward {
            tape,
            params,
            cache: RefCell::new(BTreeMap::new()),
            dropout: 0.0,
            dropout_rng: RefCell::new(None),
        }
    }

    /// Enable dropout for this pass (training only).
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = p;
            self.dropout_rng = RefCell::new(Some(Rng::substream(seed, b"dropout")));
        }
        self
    }

    /// Tape leaf for a parameter, cached per pass so gradients accumulate on
    /// a single node.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(&node) = self.cache.borrow().get(&id.0) {
            return self.restore(node);
        }
        let var = self.tape.leaf(self.params.get(id).clone());
        self.cache.borrow_mut().insert(id.0, self.node_id(var));
        var
    }

    /// Collect (ParamId, leaf) pairs touched by this pass.
    pub fn touched(&self) -> Vec<(ParamId, usize)> {
        self.cache
            .borrow()
            .iter()
            .map(|(&p, &n)| (ParamId(p), n))
            .collect()
    }

    fn node_id(&self, var: Var<'t>) -> usize {
        // Vars are only created through this tape; the most recent node is
        // the one just pushed.
        let _ = var;
        self.tape.len() - 1
    }

    fn restore(&self, node: usize) -> Var<'t> {
        self.tape.var_at(node)
    }

    /// Inverted dropout on a var; identity when disabled.
    pub fn dropout(&self, x: Var<'t>) -> Var<'t> {
        if self.dropout <= 0.0 {
            return x;
        }
        let mut guard = self.dropout_rng.borrow_mut();
        let rng = guard.as_mut().expect("dropout rng");
        let (r, c) = x.shape();
        let keep = 1.0 - self.dropout;
        let mut mask = Tensor::zeros(r, c);
        for v in mask.data.iter_mut() {
            if rng.uniform() < keep {
                *v = 1.0 / keep;
            }
        }
        x.mul(self.tape.constant(mask))
    }
}

/// Dense layer, optionally biased.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = params.gaussian(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| params.zeros(format!("{name}.b"), 1, fan_out));
        Linear { w, b }
    }

    pub fn forward<'t>(&self, f: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(f.p(self.w));
        match self.b {
            Some(b) => y.add_row(f.p(b)),
            None => y,
        }
    }
}

/// Single-layer gated recurrent cell over row-batched sequences.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_h: ParamId,
    u_h: ParamId,
    b_h: ParamId,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let gate = |g: &str, p: &mut ParamSet, r: &mut Rng| {
            (
                p.gaussian(format!("{name}.w_{g}"), input_dim, hidden_dim, r),
                p.gaussian(format!("{name}.u_{g}"), hidden_dim, hidden_dim, r),
                p.zeros(format!("{name}.b_{g}"), 1, hidden_dim),
            )
        };
        let (w_z, u_z, b_z) = gate("z", params, rng);
        let (w_r, u_r, b_r) = gate("r", params, rng);
        let (w_h, u_h, b_h) = gate("h", params, rng);
        GruCell {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    /// One step: rows are independent sequences.
    pub fn step<'t>(&self, f: &Forward<'t, '_>, x: Var<'t>, h: Var<'t>) -> Var<'t> {
        let z = x
            .matmul(f.p(self.w_z))
            .add(h.matmul(f.p(self.u_z)))
            .add_row(f.p(self.b_z))
            .sigmoid();
        let r = x
            .matmul(f.p(self.w_r))
            .add(h.matmul(f.p(self.u_r)))
            .add_row(f.p(self.b_r))
            .sigmoid();
        let candidate = x
            .matmul(f.p(self.w_h))
            .add(r.mul(h).matmul(f.p(self.u_h)))
            .add_row(f.p(self.b_h))
            .tanh();
        let ones = f.tape.constant(Tensor::filled(z.shape().0, z.shape().1, 1.0));
        ones.sub(z).mul(h).add(z.mul(candidate))
    }

    /// Run over `steps` (each rows×input_dim) from a zero state; returns the
    /// final hidden state.
    pub fn run<'t>(&self, f: &Forward<'t, '_>, steps: &[Var<'t>]) -> Var<'t> {
        assert!(!steps.is_empty(), "empty sequence");
        let rows = steps[0].shape().0;
        let mut h = f.tape.constant(Tensor::zeros(rows, self.hidden_dim));
        for &x in steps {
            h = self.step(f, x, h);
        }
        h
    }
}

/// Row-wise layer normalization with learnable gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.ones(format!("{name}.gamma"), 1, dim),
            beta: params.zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(f.p(self.gamma), f.p(self.beta), 1e-5)
    }
}

/// Scaled dot-product attention with projections, optionally multi-head.
#[derive(Debug, Clone)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must divide by heads");
        Attention {
            dim,
            heads,
            wq: Linear::new(params, &format!("{name}.wq"), dim, dim, false, rng),
            wk: Linear::new(params, &format!("{name}.wk"), dim, dim, false, rng),
            wv: Linear::new(params, &format!("{name}.wv"), dim, dim, false, rng),
            wo: Linear::new(params, &format!("{name}.wo"), dim, dim, false, rng),
        }
    }

    /// Attend queries (Q×D) over keys/values (N×D). Returns the projected
    /// context (Q×D) and the attention weights (Q×(N*heads), heads stacked
    /// left to right).
    pub fn attend<'t>(
        &self,
        f: &Forward<'t, '_>,
        queries: Var<'t>,
        keys_values: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let q = self.wq.forward(f, queries);
        let k = self.wk.forward(f, keys_values);
        let v = self.wv.forward(f, keys_values);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / crate::mathx::sqrt(head_dim as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * head_dim, head_dim);
            let kh = k.slice_cols(h * head_dim, head_dim);
            let vh = v.slice_cols(h * head_dim, head_dim);
            let scores = qh.matmul(kh.t()).scale(scale);
            let attn = scores.softmax_rows();
            let attn = f.dropout(attn);
            outs.push(attn.matmul(vh));
            weights.push(attn);
        }
        let merged = if self.heads == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)
        };
        let w = if self.heads == 1 {
            weights[0]
        } else {
            Var::concat_cols(&weights)
        };
        (self.wo.forward(f, merged), w)
    }
}

/// Two-layer feed-forward block with tanh.
#[derive(Debug, Clone)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            l1: Linear::new(params, &format!("{name}.l1"), fan_in, hidden, true, rng),
            l2: Linear::new(params, &format!("{name}.l2"), hidden, fan_out, true, rng),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.l2.forward(f, self.l1.forward(f, x).tanh())
    }

    /// Zero the output layer, making the block emit exactly zero. Used by
    /// tests that need an identity refinement.
    pub fn zero_output(&self, params: &mut ParamSet) {
        let (r, c) = params.get(self.l2.w).shape();
        params.set(self.l2.w, Tensor::zeros(r, c));
        if let Some(b) = self.l2.b {
            let (r, c) = params.get(b).shape();
            params.set(b, Tensor::zeros(r, c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_roundtrip_and_checksums() {
        let mut rng = Rng::from_seed(1);
        let mut params = ParamSet::new();
        let a = params.gaussian("diffusion.block0.w", 3, 3, &mut rng);
        let b = params.gaussian("decoder.head.w", 3, 2, &mut rng);
        let before = params.checksum_by_prefix("diffusion.");
        let map = params.to_map();
        params.set(b, Tensor::zeros(3, 2));
        assert_eq!(params.checksum_by_prefix("diffusion."), before);
        params.set(a, Tensor::zeros(3, 3));
        assert_ne!(params.checksum_by_prefix("diffusion."), before);
        params.load_map(&map).unwrap();
        assert_eq!(params.checksum_by_prefix("diffusion."), before);
    }

    #[test]
    fn missing_checkpoint_param_is_usage_error() {
        let mut rng = Rng::from_seed(1);
        let mut params = ParamSet::new();
        params.gaussian("a.w", 2, 2, &mut rng);
        let mut map = params.to_map();
        map.clear();
        assert!(matches!(
            params.load_map(&map),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn forward_caches_leaves() {
        let mut rng = Rng::from_seed(2);
        let mut params = ParamSet::new();
        let w = params.gaussian("w", 2, 2, &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let v1 = f.p(w);
        let v2 = f.p(w);
        // Same node: gradient accumulates once per use on one leaf.
        let loss = v1.mul(v2).sum();
        let grads = tape.backward(loss);
        let expected = params.get(w).scale(2.0);
        assert!(grads.of(v1).bit_eq(&expected));
    }

    #[test]
    fn gru_shapes_and_determinism() {
        let mut rng = Rng::from_seed(3);
        let mut params = ParamSet::new();
        let gru = GruCell::new(&mut params, "gru", 3, 8, &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let steps: Vec<_> = (0..4)
            .map(|i| {
                let mut r = Rng::from_seed(10 + i);
                f.tape.constant(Tensor::randn(5, 3, 1.0, &mut r))
            })
            .collect();
        let h1 = gru.run(&f, &steps).value();
        assert_eq!(h1.shape(), (5, 8));
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let steps2: Vec<_> = (0..4)
            .map(|i| {
                let mut r = Rng::from_seed(10 + i);
                f2.tape.constant(Tensor::randn(5, 3, 1.0, &mut r))
            })
            .collect();
        assert!(gru.run(&f2, &steps2).value().bit_eq(&h1));
    }

    #[test]
    fn attention_weights_normalize() {
        let mut rng = Rng::from_seed(4);
        let mut params = ParamSet::new();
        let attn = Attention::new(&mut params, "attn", 8, 2, &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let q = tape.constant(Tensor::randn(1, 8, 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(5, 8, 1.0, &mut rng));
        let (out, weights) = attn.attend(&f, q, kv);
        assert_eq!(out.shape(), (1, 8));
        let w = weights.value();
        assert_eq!(w.shape(), (1, 10)); // two heads of five weights
        for h in 0..2 {
            let sum: f64 = w.data[h * 5..(h + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
