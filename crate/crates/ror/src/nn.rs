//! Model plumbing shared by every network module: a flat parameter store,
//! initializers, the graph binder, gradient accumulation, AdamW, and small
//! layer builders (linear, conv, layer norm, LSTM cell).
//!
//! Parameters live outside any graph as plain f64 vectors. Each training
//! step builds a fresh [`crate::autograd::Graph`], binds the parameters it
//! touches through a [`Binder`], and collects per-parameter gradients back
//! into a [`GradAccum`]. Registration order is fixed by construction order,
//! which keeps initialization and checkpoints reproducible.

use crate::autograd::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Flat, named parameter storage.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// How a parameter is filled at registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `(-a, a)`.
    Uniform(f64),
    /// Glorot uniform; fans are inferred from the dims (2-D: out x in,
    /// 4-D conv: channels x kernel taps).
    XavierUniform,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

fn fans(dims: &[usize]) -> (usize, usize) {
    match dims.len() {
        2 => (dims[1], dims[0]),
        4 => (dims[1] * dims[2] * dims[3], dims[0] * dims[2] * dims[3]),
        _ => {
            let n: usize = dims.iter().product();
            (n, n)
        }
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per value keeps the stream layout simple.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, dims: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect(),
            Init::XavierUniform => {
                let (fan_in, fan_out) = fans(dims);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect()
            }
            Init::Normal(std) => (0..n).map(|_| sample_normal(rng) * std).collect(),
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].dims
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        Tensor::from_vec(&self.entries[id.0].dims, self.entries[id.0].data.clone())
    }

    /// Number of registered parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn total_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.data.len())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Binds store parameters into a graph as leaves, once each, and routes
/// gradients back to their [`ParamId`]s after the backward sweep.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<(ParamId, Var)>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: Vec::new(),
        }
    }

    /// The graph leaf for `id`, created on first use.
    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(b, _)| *b == id) {
            return v;
        }
        let v = g.leaf(self.store.tensor(id));
        self.bound.push((id, v));
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Moves the gradients of every bound parameter into `accum`, in
    /// binding order.
    pub fn collect_into(&self, grads: &mut Gradients, accum: &mut GradAccum) {
        for &(id, var) in &self.bound {
            if let Some(g) = grads.take(var) {
                accum.add(id, &g);
            }
        }
    }
}

/// Per-parameter gradient sums, indexed by [`ParamId`].
pub struct GradAccum {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradAccum {
    pub fn for_store(store: &ParamStore) -> Self {
        let mut slots = Vec::with_capacity(store.len());
        slots.resize_with(store.len(), || None);
        GradAccum { slots }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Fixed-order merge of another accumulator (batch reduction).
    pub fn merge(&mut self, other: GradAccum) {
        for (i, slot) in other.slots.into_iter().enumerate() {
            if let Some(g) = slot {
                self.add(ParamId(i), &g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.85,
            beta2: 0.91,
            eps: 1e-8,
            weight_decay: 0.005,
        }
    }
}

/// AdamW with decoupled weight decay. Parameters that received no gradient
/// in a step keep their moments untouched.
pub struct AdamW {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: store.ids().map(|id| vec![0.0; store.data(id).len()]).collect(),
            v: store.ids().map(|id| vec![0.0; store.data(id).len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step at learning rate `lr`. Decay is applied to the
    /// pre-update parameter value, then the bias-corrected adaptive update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for id in 0..self.m.len() {
            let Some(g) = grads.get(ParamId(id)) else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = store.data_mut(ParamId(id));
            for i in 0..p.len() {
                p[i] -= lr * self.cfg.weight_decay * p[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }

    /// Serialized moment state, in parameter order (for checkpoints).
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state size mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

// ---- layer builders --------------------------------------------------------

/// Fully connected layer on row-token matrices: `(n,in) -> (n,out)`.
pub struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearP {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[out_f, in_f], Init::XavierUniform, rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[out_f], Init::Zeros, rng));
        LinearP { w, b }
    }

    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Var {
        let w = binder.var(g, self.w);
        let y = g.matmul_nt(x, w);
        match self.b {
            Some(b) => {
                let bv = binder.var(g, b);
                g.add_row_broadcast(y, bv)
            }
            None => y,
        }
    }
}

/// 2-D convolution layer on `(c,h,w)` maps.
pub struct Conv2dP {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dP {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[co, ci, k, k], init, rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[co], Init::Zeros, rng));
        Conv2dP {
            w,
            b,
            stride,
            pad,
            dilation,
        }
    }

    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Var {
        let w = binder.var(g, self.w);
        let y = g.conv2d(x, w, self.stride, self.pad, self.dilation);
        match self.b {
            Some(b) => {
                let bv = binder.var(g, b);
                g.add_bias(y, bv)
            }
            None => y,
        }
    }
}

/// LayerNorm over the feature axis of `(n,c)` token rows.
pub struct LayerNormP {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormP {
    pub fn register(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let gain = store.add(&format!("{name}.gain"), &[c], Init::Ones, rng);
        let shift = store.add(&format!("{name}.shift"), &[c], Init::Zeros, rng);
        LayerNormP { gain, shift }
    }

    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Var {
        let gain = binder.var(g, self.gain);
        let shift = binder.var(g, self.shift);
        g.layer_norm_rows(x, gain, shift)
    }
}

/// Single LSTM cell over column-vector states. Gate rows are ordered
/// input, forget, cell, output; the forget bias starts at 1.
pub struct LstmP {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmP {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            &[4 * hidden, input + hidden],
            Init::XavierUniform,
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[4 * hidden], Init::Zeros, rng);
        store.data_mut(b)[hidden..2 * hidden].fill(1.0);
        LstmP { w, b, hidden }
    }

    /// One step: `x (in,1)`, state `(h, c)` each `(hidden,1)`.
    pub fn step(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let hid = self.hidden;
        let w = binder.var(g, self.w);
        let b = binder.var(g, self.b);
        let z = g.concat_dim0(&[x, h]);
        let pre = g.matmul(w, z);
        let pre = g.add_bias(pre, b);
        let i_pre = g.slice_dim0(pre, 0, hid);
        let f_pre = g.slice_dim0(pre, hid, 2 * hid);
        let c_pre = g.slice_dim0(pre, 2 * hid, 3 * hid);
        let o_pre = g.slice_dim0(pre, 3 * hid, 4 * hid);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let c_new = g.add(fc, ic);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o, c_act);
        (h_new, c_new)
    }
}
