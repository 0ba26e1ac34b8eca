//! Parameter store and the layer modules built on it.
//!
//! Parameters live in a [`ParamStore`] as named buffers. Layers hold
//! [`ParamId`]s, not tensors; each training step wraps the current buffers
//! into fresh gradient-tracked leaves ([`ParamStore::leaves`]), runs the
//! graph, and lets the optimizer write updated buffers back. Wrapping shares
//! the underlying allocation, so a step copies no parameter data.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its store. Valid only for the store that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Slot index, for code that walks a store and its leaves in lockstep.
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal(0, std) with draws beyond two standard deviations rejected.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

struct Slot<S: Scalar> {
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

pub struct ParamStore<S: Scalar> {
    slots: Vec<Slot<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter. Initialization draws in f64 so f32 and f64
    /// stores built from the same seed hold the same values.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).map_err(|_| Error::Config {
                    reason: format!("bad init std {std}"),
                })?;
                (0..numel)
                    .map(|_| loop {
                        let v = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break S::from_f64(v);
                        }
                    })
                    .collect()
            }
            Init::Zeros => vec![S::zero(); numel],
            Init::Ones => vec![S::one(); numel],
        };
        self.add_data(name, shape, data)
    }

    /// Register a parameter holding the given values verbatim.
    pub fn add_data(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam {
                name: name.to_string(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param_add",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let id = self.slots.len();
        self.by_name.insert(name.to_string(), id);
        self.slots.push(Slot {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.slots[id.0].data
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Replace a parameter's buffer (the optimizer's write-back path).
    pub fn set_data(&mut self, id: ParamId, data: Vec<S>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if data.len() != slot.data.len() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: slot.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        slot.data = Arc::new(data);
        Ok(())
    }

    /// Wrap every parameter as a graph leaf. `trainable` decides whether the
    /// leaves request gradients; eval passes use `false` and build no graph.
    pub fn leaves(&self, trainable: bool) -> ParamLeaves<S> {
        let leaves = self
            .slots
            .iter()
            .map(|s| {
                Tensor::leaf_shared(&s.shape, Arc::clone(&s.data), trainable)
                    .expect("stored shape always matches stored data")
            })
            .collect();
        ParamLeaves { leaves }
    }

    /// Write all parameters to a container file (values converted to f32).
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<Entry> = self
            .slots
            .iter()
            .map(|s| {
                Entry::new(
                    s.name.clone(),
                    s.shape.clone(),
                    s.data.iter().map(|v| v.as_f32()).collect(),
                )
            })
            .collect();
        container::write(path, &entries)
    }

    /// Load values from a container file into matching parameters. Every
    /// stored parameter must be present with the right shape, and the file
    /// must not name parameters this store lacks: a checkpoint from a
    /// different architecture is an error, not a partial load.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = container::read(path)?;
        let mut seen = vec![false; self.slots.len()];
        for e in entries {
            let id = self.by_name.get(&e.name).copied().ok_or_else(|| {
                Error::UnknownParam {
                    name: e.name.clone(),
                }
            })?;
            let slot = &mut self.slots[id];
            if slot.shape != e.shape {
                return Err(Error::ShapeMismatch {
                    op: "param_load",
                    lhs: slot.shape.clone(),
                    rhs: e.shape,
                });
            }
            slot.data = Arc::new(e.data.into_iter().map(S::from_f32).collect());
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Container {
                reason: format!("checkpoint lacks parameter {}", self.slots[missing].name),
            });
        }
        Ok(())
    }
}

/// Parameters wrapped as graph leaves for one forward/backward pass.
pub struct ParamLeaves<S: Scalar> {
    leaves: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamLeaves<S> {
    /// Build from explicit leaf tensors, index-aligned with the store that
    /// produced them. Finite-difference checks substitute perturbed copies
    /// this way.
    pub fn from_tensors(leaves: Vec<Tensor<S>>) -> Self {
        ParamLeaves { leaves }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.leaves[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.leaves.iter()
    }
}

/// Per-pass mode switch: training enables dropout and carries the RNG that
/// draws the masks.
pub struct TrainCtx<'a> {
    pub train: bool,
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> TrainCtx<'a> {
    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        TrainCtx {
            train: true,
            dropout,
            rng,
        }
    }

    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        TrainCtx {
            train: false,
            dropout: 0.0,
            rng,
        }
    }

    pub fn apply_dropout<S: Scalar>(&mut self, t: Tensor<S>) -> Result<Tensor<S>> {
        if self.train && self.dropout > 0.0 {
            t.dropout(self.dropout, self.rng)
        } else {
            Ok(t)
        }
    }
}

/// Dense layer `x @ w + b` acting on the last axis.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::TruncNormal { std: 0.02 },
            rng,
        )?;
        let b = store.add(&format!("{name}.b"), &[d_out], Init::Zeros, rng)?;
        Ok(Linear { w, b })
    }

    pub fn forward<S: Scalar>(&self, p: &ParamLeaves<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(p.get(self.w))?.add_suffix(p.get(self.b))
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?;
        let beta = store.add(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(&self, p: &ParamLeaves<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// Two-layer GELU MLP, the transformer feed-forward branch.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            lin2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<S: Scalar>(&self, p: &ParamLeaves<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.lin2.forward(p, &self.lin1.forward(p, x)?.gelu())
    }
}

/// Multi-head scaled-dot-product attention. Queries may come from a
/// different sequence than keys/values (cross-attention); self-attention
/// passes the same tensor for both.
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config {
                reason: format!("model dim {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Mha {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `q_in` is `[B, Lq, D]`, `kv_in` is `[B, Lk, D]`; returns `[B, Lq, D]`.
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        q_in: &Tensor<S>,
        kv_in: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let (b, lq) = (q_in.shape()[0], q_in.shape()[1]);
        let lk = kv_in.shape()[1];
        let (h, dh) = (self.heads, self.dim / self.heads);

        // [B,L,D] -> [B*H, L, dh] with heads batch-major
        let split = |t: &Tensor<S>, l: usize| -> Result<Tensor<S>> {
            t.reshape(&[b, l, h, dh])?
                .permute0213()?
                .reshape(&[b * h, l, dh])
        };
        let q = split(&self.wq.forward(p, q_in)?, lq)?;
        let k = split(&self.wk.forward(p, kv_in)?, lk)?;
        let v = split(&self.wv.forward(p, kv_in)?, lk)?;

        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let scores = q.scale(scale).bmm_bt(&k)?;
        let attn = ctx.apply_dropout(scores.softmax(2)?)?;
        let mixed = attn
            .bmm(&v)?
            .reshape(&[b, h, lq, dh])?
            .permute0213()?
            .reshape(&[b, lq, self.dim])?;
        self.wo.forward(p, &mixed)
    }
}

/// Pre-norm self-attention transformer block:
/// `x += drop(attn(ln1(x))); x += drop(ffn(ln2(x)))`.
pub struct SelfAttnBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttnBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(SelfAttnBlock {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim)?,
            attn: Mha::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        x: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let n1 = self.ln1.forward(p, x)?;
        let a = self.attn.forward(p, &n1, &n1, ctx)?;
        let x = x.add(&ctx.apply_dropout(a)?)?;
        let f = self.ffn.forward(p, &self.ln2.forward(p, &x)?)?;
        x.add(&ctx.apply_dropout(f)?)
    }
}
