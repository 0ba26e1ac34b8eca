//! Reference matching.
//!
//! Target identity tokens query reference identity tokens through pre-norm
//! cross-attention blocks, producing "refined" tokens that encode how well
//! the target's identity evidence agrees with the reference. An auxiliary
//! head turns the refined tokens into a two-way match/mismatch prediction;
//! its loss shapes the refined representation without feeding the main
//! real/fake head.
//!
//! The blocks never look at token order on the reference side, so the stack
//! is invariant to reference token permutations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{FeedForward, LayerNorm, Linear, Mha, ParamLeaves, ParamStore, TrainCtx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub use_ffn: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            depth: 2,
            heads: 4,
            ffn_mult: 4,
            use_ffn: true,
        }
    }
}

struct MatchBlock {
    ln: LayerNorm,
    ca: Mha,
    ffn: Option<(LayerNorm, FeedForward)>,
}

impl MatchBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        cfg: &MatchConfig,
    ) -> Result<Self> {
        Ok(MatchBlock {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), d)?,
            ca: Mha::new(store, rng, &format!("{name}.ca"), d, cfg.heads)?,
            ffn: if cfg.use_ffn {
                Some((
                    LayerNorm::new(store, rng, &format!("{name}.ln_ffn"), d)?,
                    FeedForward::new(store, rng, &format!("{name}.ffn"), d, d * cfg.ffn_mult)?,
                ))
            } else {
                None
            },
        })
    }

    fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        x: &Tensor<S>,
        reference: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let a = self.ca.forward(
            p,
            &self.ln.forward(p, x)?,
            &self.ln.forward(p, reference)?,
            ctx,
        )?;
        let x = x.add(&ctx.apply_dropout(a)?)?;
        match &self.ffn {
            Some((ln, ffn)) => {
                let f = ffn.forward(p, &ln.forward(p, &x)?)?;
                x.add(&ctx.apply_dropout(f)?)
            }
            None => Ok(x),
        }
    }
}

pub struct MatchStack {
    pub cfg: MatchConfig,
    blocks: Vec<MatchBlock>,
}

impl MatchStack {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: MatchConfig,
        d: usize,
    ) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| MatchBlock::new(store, rng, &format!("{name}.block{i}"), d, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(MatchStack { cfg, blocks })
    }

    /// Refine target tokens `[B, n_q, D]` against reference tokens of the
    /// same shape. Zero depth passes the target through untouched.
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        target: &Tensor<S>,
        reference: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let mut x = target.clone();
        for blk in &self.blocks {
            x = blk.forward(p, &x, reference, ctx)?;
        }
        Ok(x)
    }
}

/// Match/mismatch classifier over mean-pooled refined tokens:
/// `D -> D/2 -> 2` with a GELU between.
pub struct AuxHead {
    fc1: Linear,
    fc2: Linear,
}

impl AuxHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        Ok(AuxHead {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, d / 2)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d / 2, 2)?,
        })
    }

    pub fn logits<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        refined: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let pooled = refined.mean_axis(1)?;
        self.fc2.forward(p, &self.fc1.forward(p, &pooled)?.gelu())
    }
}
