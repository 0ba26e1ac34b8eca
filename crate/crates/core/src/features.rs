//! Token feature assembly.
//!
//! Raw per-segment tokens of both modalities are projected into the model
//! width, given per-modality temporal position embeddings, and joined into
//! one sequence with a learned boundary token between the modalities:
//!
//!   [ visual tokens | boundary | audio tokens ]
//!
//! The projection stands in for encoder fine-tuning; everything upstream of
//! it is frozen synthetic data.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamId, ParamLeaves, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Segments per model window.
    pub n_seg: usize,
    /// Visual / audio tokens per segment.
    pub t_v: usize,
    pub t_a: usize,
    pub d_raw: usize,
    /// Model width.
    pub d: usize,
    pub seg_duration_s: f64,
    pub window_s: f64,
    pub use_positions: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_seg: 8,
            t_v: 4,
            t_a: 6,
            d_raw: 32,
            d: 64,
            seg_duration_s: 0.64,
            window_s: 2.88,
            use_positions: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seg == 0 || self.t_v == 0 || self.t_a == 0 || self.d_raw == 0 || self.d == 0 {
            return Err(Error::Config {
                reason: "feature dimensions must be positive".into(),
            });
        }
        let stride = segment_stride(self.window_s, self.seg_duration_s, self.n_seg)?;
        let span = self.seg_duration_s + (self.n_seg - 1) as f64 * stride;
        if (span - self.window_s).abs() > 1e-9 {
            return Err(Error::Windowing {
                reason: format!("segments span {span}s but the window is {}s", self.window_s),
            });
        }
        Ok(())
    }

    pub fn visual_len(&self) -> usize {
        self.n_seg * self.t_v
    }

    pub fn audio_len(&self) -> usize {
        self.n_seg * self.t_a
    }

    /// Assembled sequence length: both modalities plus the boundary token.
    pub fn seq_len(&self) -> usize {
        self.visual_len() + 1 + self.audio_len()
    }

    /// Position of the boundary token.
    pub fn boundary_index(&self) -> usize {
        self.visual_len()
    }
}

/// Spacing between consecutive segment starts inside a window.
pub fn segment_stride(window_s: f64, seg_duration_s: f64, n_seg: usize) -> Result<f64> {
    if n_seg < 2 {
        return Err(Error::Windowing {
            reason: format!("need at least 2 segments per window, got {n_seg}"),
        });
    }
    let stride = (window_s - seg_duration_s) / (n_seg - 1) as f64;
    if stride <= 0.0 {
        return Err(Error::Windowing {
            reason: format!(
                "window {window_s}s does not exceed segment duration {seg_duration_s}s"
            ),
        });
    }
    Ok(stride)
}

pub struct FeaturePipe {
    pub cfg: FeatureConfig,
    proj: Linear,
    pos_v: ParamId,
    pos_a: ParamId,
    boundary: ParamId,
}

impl FeaturePipe {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: FeatureConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = Linear::new(store, rng, "feat.proj", cfg.d_raw, cfg.d)?;
        let emb = Init::TruncNormal { std: 0.02 };
        let pos_v = store.add("feat.pos_v", &[cfg.visual_len(), cfg.d], emb, rng)?;
        let pos_a = store.add("feat.pos_a", &[cfg.audio_len(), cfg.d], emb, rng)?;
        let boundary = store.add("feat.boundary", &[1, cfg.d], emb, rng)?;
        Ok(FeaturePipe {
            cfg,
            proj,
            pos_v,
            pos_a,
            boundary,
        })
    }

    /// Build the fused sequence `[B, seq_len, d]` from raw windows
    /// `visual [B, n_seg*t_v, d_raw]` and `audio [B, n_seg*t_a, d_raw]`.
    pub fn assemble<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        visual: &Tensor<S>,
        audio: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let c = &self.cfg;
        let expect = |t: &Tensor<S>, rows: usize, what: &'static str| -> Result<usize> {
            let s = t.shape();
            if s.len() != 3 || s[1] != rows || s[2] != c.d_raw {
                return Err(Error::ShapeMismatch {
                    op: what,
                    lhs: s.to_vec(),
                    rhs: vec![0, rows, c.d_raw],
                });
            }
            Ok(s[0])
        };
        let b = expect(visual, c.visual_len(), "assemble_visual")?;
        let b2 = expect(audio, c.audio_len(), "assemble_audio")?;
        if b != b2 {
            return Err(Error::ShapeMismatch {
                op: "assemble_batch",
                lhs: visual.shape().to_vec(),
                rhs: audio.shape().to_vec(),
            });
        }

        let mut v = self.proj.forward(p, visual)?;
        let mut a = self.proj.forward(p, audio)?;
        if c.use_positions {
            v = v.add_suffix(p.get(self.pos_v))?;
            a = a.add_suffix(p.get(self.pos_a))?;
        }
        let m = Tensor::zeros(&[b, 1, c.d]).add_suffix(p.get(self.boundary))?;
        Tensor::concat(&[&v, &m, &a], 1)
    }
}
