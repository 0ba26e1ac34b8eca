//! Identity query bottleneck.
//!
//! A small set of learned queries iteratively distills identity evidence out
//! of a fused token sequence: each block runs self-attention among the
//! queries, cross-attention from queries to the sequence, and a feed-forward
//! update, all pre-norm with residuals:
//!
//!   Q~ = SA(LN(Q)) + Q
//!   Q^ = CA(LN(Q~), LN(F)) + Q~
//!   Q' = FFN(LN(Q^)) + Q^
//!
//! The cross-attention stage owns a single LN affine, applied to both the
//! queries and the sequence. Without position embeddings the stack is
//! permutation-equivariant in the queries; the optional embeddings break
//! that symmetry on purpose.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{FeedForward, Init, LayerNorm, Mha, ParamId, ParamLeaves, ParamStore, TrainCtx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BottleneckConfig {
    /// Number of identity queries.
    pub n_q: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub use_q_pos: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            n_q: 6,
            depth: 2,
            heads: 4,
            ffn_mult: 4,
            use_q_pos: true,
        }
    }
}

struct QueryBlock {
    ln_sa: LayerNorm,
    sa: Mha,
    ln_ca: LayerNorm,
    ca: Mha,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl QueryBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(QueryBlock {
            ln_sa: LayerNorm::new(store, rng, &format!("{name}.ln_sa"), d)?,
            sa: Mha::new(store, rng, &format!("{name}.sa"), d, heads)?,
            ln_ca: LayerNorm::new(store, rng, &format!("{name}.ln_ca"), d)?,
            ca: Mha::new(store, rng, &format!("{name}.ca"), d, heads)?,
            ln_ffn: LayerNorm::new(store, rng, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d * ffn_mult)?,
        })
    }

    fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        q: &Tensor<S>,
        f: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let n = self.ln_sa.forward(p, q)?;
        let s = self.sa.forward(p, &n, &n, ctx)?;
        let q = q.add(&ctx.apply_dropout(s)?)?;
        let a = self
            .ca
            .forward(p, &self.ln_ca.forward(p, &q)?, &self.ln_ca.forward(p, f)?, ctx)?;
        let q = q.add(&ctx.apply_dropout(a)?)?;
        let f_out = self.ffn.forward(p, &self.ln_ffn.forward(p, &q)?)?;
        q.add(&ctx.apply_dropout(f_out)?)
    }
}

pub struct IdentityBottleneck {
    pub cfg: BottleneckConfig,
    q0: ParamId,
    q_pos: Option<ParamId>,
    blocks: Vec<QueryBlock>,
}

impl IdentityBottleneck {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: BottleneckConfig,
        d: usize,
    ) -> Result<Self> {
        let emb = Init::TruncNormal { std: 0.02 };
        let q0 = store.add(&format!("{name}.q0"), &[cfg.n_q, d], emb, rng)?;
        let q_pos = if cfg.use_q_pos {
            Some(store.add(&format!("{name}.q_pos"), &[cfg.n_q, d], emb, rng)?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                QueryBlock::new(
                    store,
                    rng,
                    &format!("{name}.block{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_mult,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IdentityBottleneck {
            cfg,
            q0,
            q_pos,
            blocks,
        })
    }

    /// Distill `f` `[B, L, D]` into `[B, n_q, D]` identity tokens.
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamLeaves<S>,
        f: &Tensor<S>,
        ctx: &mut TrainCtx,
    ) -> Result<Tensor<S>> {
        let b = f.shape()[0];
        let d = p.get(self.q0).shape()[1];
        let mut q = Tensor::zeros(&[b, self.cfg.n_q, d]).add_suffix(p.get(self.q0))?;
        if let Some(pos) = self.q_pos {
            q = q.add_suffix(p.get(pos))?;
        }
        for blk in &self.blocks {
            q = blk.forward(p, &q, f, ctx)?;
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn build(cfg: BottleneckConfig, d: usize) -> (ParamStore<f64>, IdentityBottleneck) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let idb = IdentityBottleneck::new(&mut store, &mut rng, "idb", cfg, d).unwrap();
        (store, idb)
    }

    fn feats(b: usize, l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[b, l, d], data).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let (store, idb) = build(BottleneckConfig::default(), 64);
        let p = store.leaves(false);
        let f = feats(2, 81, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out1 = idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap();
        let out2 = idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap();
        assert_eq!(out1.shape(), &[2, 6, 64]);
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn zero_depth_passes_queries_through() {
        let cfg = BottleneckConfig {
            depth: 0,
            ..BottleneckConfig::default()
        };
        let (store, idb) = build(cfg, 32);
        let p = store.leaves(false);
        let f = feats(3, 10, 32, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap();
        let q0 = p.get(idb.q0).data();
        let q_pos = p.get(idb.q_pos.unwrap()).data();
        for bi in 0..3 {
            for i in 0..6 * 32 {
                assert_eq!(out.data()[bi * 6 * 32 + i], q0[i] + q_pos[i]);
            }
        }
    }

    #[test]
    fn queries_are_permutation_equivariant_without_positions() {
        let cfg = BottleneckConfig {
            n_q: 4,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            use_q_pos: false,
        };
        let d = 16;
        let (mut store, idb) = build(cfg, d);
        let f = feats(1, 9, d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = {
            let p = store.leaves(false);
            idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap()
        };

        let perm = [2usize, 0, 3, 1];
        let q0_data = store.data(idb.q0).to_vec();
        let mut permuted = vec![0.0; q0_data.len()];
        for (i, &src) in perm.iter().enumerate() {
            permuted[i * d..(i + 1) * d].copy_from_slice(&q0_data[src * d..(src + 1) * d]);
        }
        store.set_data(idb.q0, permuted).unwrap();
        let p = store.leaves(false);
        let out = idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap();

        for (i, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let got = out.data()[i * d + c];
                let want = base.data()[src * d + c];
                assert!(
                    (got - want).abs() < 1e-12,
                    "row {i} ({src}) coord {c}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn position_embeddings_break_the_symmetry() {
        let cfg = BottleneckConfig {
            n_q: 4,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            use_q_pos: true,
        };
        let d = 16;
        let (mut store, idb) = build(cfg, d);
        let f = feats(1, 9, d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = {
            let p = store.leaves(false);
            idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap()
        };

        let perm = [2usize, 0, 3, 1];
        let q0_data = store.data(idb.q0).to_vec();
        let mut permuted = vec![0.0; q0_data.len()];
        for (i, &src) in perm.iter().enumerate() {
            permuted[i * d..(i + 1) * d].copy_from_slice(&q0_data[src * d..(src + 1) * d]);
        }
        store.set_data(idb.q0, permuted).unwrap();
        let p = store.leaves(false);
        let out = idb.forward(&p, &f, &mut TrainCtx::eval(&mut rng)).unwrap();

        let mut max_dev = 0.0f64;
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let dev = (out.data()[i * d + c] - base.data()[src * d + c]).abs();
                max_dev = max_dev.max(dev);
            }
        }
        assert!(max_dev > 1e-3, "positions should break equivariance, max dev {max_dev}");
    }

    #[test]
    fn sequence_content_reaches_the_queries() {
        let (store, idb) = build(BottleneckConfig::default(), 64);
        let p = store.leaves(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = idb
            .forward(&p, &feats(1, 81, 64, 4), &mut TrainCtx::eval(&mut rng))
            .unwrap();
        let b = idb
            .forward(&p, &feats(1, 81, 64, 5), &mut TrainCtx::eval(&mut rng))
            .unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck;
        let cfg = BottleneckConfig {
            n_q: 2,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            use_q_pos: true,
        };
        let d = 8;
        let (store, idb) = build(cfg, d);
        let n = store.len();
        let mut inputs: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
            .map(|i| (store.shape(crate::nn::ParamId::from_index(i)).to_vec(), store.data(crate::nn::ParamId::from_index(i)).to_vec()))
            .collect();
        let f = feats(1, 5, d, 6);
        inputs.push((vec![1, 5, d], f.data().to_vec()));
        let mut wrng = ChaCha8Rng::seed_from_u64(40);
        let w: Vec<f64> = (0..2 * d).map(|_| wrng.gen_range(-1.0..1.0)).collect();

        let err = gradcheck::max_rel_err_sampled(
            &inputs,
            |ts| {
                let leaves = ParamLeaves::from_tensors(ts[..ts.len() - 1].to_vec());
                let f_in = &ts[ts.len() - 1];
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = TrainCtx::eval(&mut rng);
                let out = idb.forward(&leaves, f_in, &mut ctx)?;
                let weight = Tensor::new(&[1, 2, d], w.clone())?;
                Ok(out.mul(&weight)?.sum_all())
            },
            Some(3),
            99,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
