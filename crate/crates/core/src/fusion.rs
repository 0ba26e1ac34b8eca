//! Joint classification transformer.
//!
//! A class token, the refined identity tokens, and the full target feature
//! sequence are concatenated, given role embeddings (class / identity /
//! feature), and mixed by pre-norm self-attention blocks. The real/fake head
//! reads only the class token's final state.
//!
//! The training objective is a weighted sum of the real/fake cross-entropy
//! and the identity match cross-entropy. Each head owns its loss: the match
//! loss never propagates into the real/fake head and vice versa.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamId, ParamLeaves, ParamStore, SelfAttnBlock, TrainCtx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub use_type_embeddings: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            depth: 2,
            heads: 4,
            ffn_mult: 4,
            use_type_embeddings: true,
        }
    }
}

/// Role indices into the type embedding table.
const ROLE_CLS: usize = 0;
const ROLE_IDENTITY: usize = 1;
const ROLE_FEATURE: usize = 2;

pub struct JointFusion {
    pub cfg: FusionConfig,
    cls: ParamId,
    blocks: Vec<SelfAttnBlock>,
    rf_head: Linear,
    type_emb: Option<ParamId>,
}

impl JointFusion {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: FusionConfig,
        d: usize,
    ) -> Result<Self> {
        let cls = store.add(
            &format!("{name}.cls"),
            &[1, d],
            Init::TruncNormal { std: 0.02 },
            rng,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                SelfAttnBlock::new(
                    store,
                    rng,
                    &format!("{name}.block{i}"),
                    d,
                    cfg.heads,
                    d * cfg.ffn_mult,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let rf_head = Linear::new(store, rng, &format!("{name}.rf_head"), d, 2)?;
        // registered last so configs with and without role embeddings share
        // the rest of the init stream
        let type_emb = if cfg.use_type_embeddings {
            Some(store.add(
                &format!("{name}.type_emb"),
                &[3, d],
                Init::TruncNormal { std: 0.02 },
                rng,
            )?)
        } else {
            None
        };
        Ok(JointFusion {
            cfg,
            cls,
            blocks,
            rf_head,
            type_emb,
        })
    }

    /// Fuse refined identity tokens `[B, n_q, D]` with the target feature
    /// sequence `[B, L, D]`; returns real/fake logits `[B, 2]` and the final
    /// class-token state `[B, D]`.
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        refined: &Tensor<S>,
        feats: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let (b, n_q) = (refined.shape()[0], refined.shape()[1]);
        let (l, d) = (feats.shape()[1], feats.shape()[2]);
        let cls = Tensor::zeros(&[b, 1, d]).add_suffix(p.get(self.cls))?;
        let mut x = Tensor::concat(&[&cls, refined, feats], 1)?;
        if let Some(emb) = self.type_emb {
            let mut roles = vec![ROLE_CLS];
            roles.extend(std::iter::repeat(ROLE_IDENTITY).take(n_q));
            roles.extend(std::iter::repeat(ROLE_FEATURE).take(l));
            let rows = p.get(emb).embed_rows(&roles)?;
            x = x.add_suffix(&rows)?;
        }
        for blk in &self.blocks {
            x = blk.forward(p, &x, ctx)?;
        }
        let cls_out = x.narrow(1, 0, 1)?.reshape(&[b, d])?;
        let rf_logits = self.rf_head.forward(p, &cls_out)?;
        Ok((rf_logits, cls_out))
    }
}

/// Weighted two-task objective. Returns the scalar loss node plus the raw
/// per-task values for logging.
pub fn total_loss<S: Scalar>(
    rf_logits: &Tensor<S>,
    y_fake: &[usize],
    id_logits: &Tensor<S>,
    y_id: &[usize],
    w_rf: f64,
    w_id: f64,
) -> Result<(Tensor<S>, f64, f64)> {
    if w_rf < 0.0 || w_id < 0.0 {
        return Err(Error::Config {
            reason: format!("loss weights must be non-negative, got ({w_rf}, {w_id})"),
        });
    }
    let ce_rf = rf_logits.cross_entropy(y_fake)?;
    let ce_id = id_logits.cross_entropy(y_id)?;
    let rf_val = ce_rf.data()[0].as_f64();
    let id_val = ce_id.data()[0].as_f64();
    let loss = ce_rf
        .scale(S::from_f64(w_rf))
        .add(&ce_id.scale(S::from_f64(w_id)))?;
    Ok((loss, rf_val, id_val))
}
