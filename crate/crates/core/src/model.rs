//! Full detector: feature assembly, identity bottleneck, reference
//! matching, and the joint classifier, wired over one parameter store.
//!
//! The reference pathway can be ablated away (`no_reference`): the matching
//! stack is then not built at all, refined tokens are the target's own
//! identity tokens, and the parameter count drops by exactly the matching
//! stack's size. The bottleneck is shared between target and reference by
//! default; `separate_ref_bottleneck` duplicates it for the reference side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{BottleneckConfig, IdentityBottleneck};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeaturePipe};
use crate::fusion::{FusionConfig, JointFusion};
use crate::matching::{AuxHead, MatchConfig, MatchStack};
use crate::nn::{ParamLeaves, ParamStore, TrainCtx};
use crate::scalar::{derive_seed, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature: FeatureConfig,
    pub bottleneck: BottleneckConfig,
    pub matching: MatchConfig,
    pub fusion: FusionConfig,
    /// Drop the reference pathway entirely.
    pub no_reference: bool,
    /// Give the reference its own bottleneck weights instead of sharing.
    pub separate_ref_bottleneck: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature: FeatureConfig::default(),
            bottleneck: BottleneckConfig::default(),
            matching: MatchConfig::default(),
            fusion: FusionConfig::default(),
            no_reference: false,
            separate_ref_bottleneck: false,
        }
    }
}

/// One batch of raw token windows, each `[B, rows, d_raw]`.
pub struct Batch<S: Scalar> {
    pub target_visual: Tensor<S>,
    pub target_audio: Tensor<S>,
    pub reference_visual: Tensor<S>,
    pub reference_audio: Tensor<S>,
}

pub struct ModelOutput<S: Scalar> {
    pub rf_logits: Tensor<S>,
    pub id_logits: Tensor<S>,
    pub cls_out: Tensor<S>,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pipe: FeaturePipe,
    idb: IdentityBottleneck,
    ref_idb: Option<IdentityBottleneck>,
    match_stack: Option<MatchStack>,
    aux: AuxHead,
    fusion: JointFusion,
    component_counts: Vec<(&'static str, usize)>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.feature.d;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let mut counts: Vec<(&'static str, usize)> = Vec::new();
        let mut mark = |store: &ParamStore<S>, counts: &mut Vec<(&'static str, usize)>, name| {
            let prev: usize = counts.iter().map(|(_, n)| n).sum();
            counts.push((name, store.numel() - prev));
        };

        let pipe = FeaturePipe::new(&mut store, &mut rng, cfg.feature.clone())?;
        mark(&store, &mut counts, "features");
        let idb =
            IdentityBottleneck::new(&mut store, &mut rng, "idb", cfg.bottleneck.clone(), d)?;
        mark(&store, &mut counts, "bottleneck");
        let ref_idb = if cfg.separate_ref_bottleneck && !cfg.no_reference {
            let r =
                IdentityBottleneck::new(&mut store, &mut rng, "idb_ref", cfg.bottleneck.clone(), d)?;
            mark(&store, &mut counts, "bottleneck_ref");
            Some(r)
        } else {
            None
        };
        let match_stack = if cfg.no_reference {
            None
        } else {
            let m = MatchStack::new(&mut store, &mut rng, "match", cfg.matching.clone(), d)?;
            mark(&store, &mut counts, "matching");
            Some(m)
        };
        let aux = AuxHead::new(&mut store, &mut rng, "aux", d)?;
        mark(&store, &mut counts, "aux_head");
        let fusion = JointFusion::new(&mut store, &mut rng, "fusion", cfg.fusion.clone(), d)?;
        mark(&store, &mut counts, "fusion");

        Ok(Model {
            cfg,
            store,
            pipe,
            idb,
            ref_idb,
            match_stack,
            aux,
            fusion,
            component_counts: counts,
        })
    }

    /// Parameter counts per component, in registration order.
    pub fn component_counts(&self) -> &[(&'static str, usize)] {
        &self.component_counts
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    fn check_batch(&self, batch: &Batch<S>) -> Result<usize> {
        let c = &self.cfg.feature;
        let b = batch.target_visual.shape()[0];
        let want = [
            (&batch.target_visual, c.visual_len()),
            (&batch.target_audio, c.audio_len()),
            (&batch.reference_visual, c.visual_len()),
            (&batch.reference_audio, c.audio_len()),
        ];
        for (t, rows) in want {
            let s = t.shape();
            if s != [b, rows, c.d_raw] {
                return Err(Error::ShapeMismatch {
                    op: "model_batch",
                    lhs: s.to_vec(),
                    rhs: vec![b, rows, c.d_raw],
                });
            }
        }
        Ok(b)
    }

    pub fn forward(
        &self,
        p: &ParamLeaves<S>,
        batch: &Batch<S>,
        ctx: &mut TrainCtx,
    ) -> Result<ModelOutput<S>> {
        self.check_batch(batch)?;
        let f_tgt = self
            .pipe
            .assemble(p, &batch.target_visual, &batch.target_audio)?;
        let tgt_tok = self.idb.forward(p, &f_tgt, ctx)?;
        let refined = match &self.match_stack {
            None => tgt_tok,
            Some(stack) => {
                let f_ref = self
                    .pipe
                    .assemble(p, &batch.reference_visual, &batch.reference_audio)?;
                let ref_tok = self
                    .ref_idb
                    .as_ref()
                    .unwrap_or(&self.idb)
                    .forward(p, &f_ref, ctx)?;
                stack.forward(p, &tgt_tok, &ref_tok, ctx)?
            }
        };
        let id_logits = self.aux.logits(p, &refined)?;
        let (rf_logits, cls_out) = self.fusion.forward(p, &refined, &f_tgt, ctx)?;
        Ok(ModelOutput {
            rf_logits,
            id_logits,
            cls_out,
        })
    }
}
