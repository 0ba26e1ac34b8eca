//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value eagerly, and installs
//! a backward closure that maps the output gradient to per-parent gradients.
//! Closures capture saved activations as `Arc` clones, so nothing is
//! recomputed in the backward sweep except cheap elementwise math.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul_slices, Scalar};

/// Split a shape at `axis` into (outer, len, inner) extents for lane walks.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<S: Scalar> Tensor<S> {
    fn check_same_shape(&self, op: &'static str, rhs: &Tensor<S>) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape("add", rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape("sub", rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| *a - *b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -*v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape("mul", rhs)?;
        let a = self.data_arc();
        let b = rhs.data_arc();
        let data = a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.iter()).map(|(gi, bi)| *gi * *bi).collect()),
                    Some(g.iter().zip(a.iter()).map(|(gi, ai)| *gi * *ai).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| *v * c).collect())]),
        )
    }

    /// Broadcast add: `rhs.shape()` must equal a suffix of `self.shape()`.
    /// Covers bias rows (`[..,D] + [D]`) and shared position/token rows
    /// (`[B,L,D] + [L,D]`). Backward of the small side sums over the
    /// broadcast leading dims.
    pub fn add_suffix(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let k = self
            .rank()
            .checked_sub(rhs.rank())
            .ok_or(Error::ShapeMismatch {
                op: "add_suffix",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            })?;
        if &self.shape()[k..] != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_suffix",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let chunk = rhs.numel().max(1);
        let reps = self.numel() / chunk;
        let b = rhs.data_arc();
        let mut data = self.data().to_vec();
        for r in 0..reps {
            let base = r * chunk;
            for i in 0..chunk {
                data[base + i] = data[base + i] + b[i];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut db = vec![S::zero(); chunk];
                for r in 0..reps {
                    let base = r * chunk;
                    for i in 0..chunk {
                        db[i] += g[base + i];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    /// Matrix product. Accepts `[m,k] @ [k,n]`, a shared rhs
    /// `[B,m,k] @ [k,n]`, and batched `[B,m,k] @ [B,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let ls = self.shape().to_vec();
        let rs = rhs.shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        match (self.rank(), rhs.rank()) {
            (2, 2) => {
                let (m, k) = (ls[0], ls[1]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let a = self.data_arc();
                let b = rhs.data_arc();
                let mut out = vec![S::zero(); m * n];
                matmul_slices(m, k, n, &a, false, &b, false, S::zero(), &mut out);
                Ok(Tensor::from_op(
                    vec![m, n],
                    out,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        let mut da = vec![S::zero(); m * k];
                        matmul_slices(m, n, k, g, false, &b, true, S::zero(), &mut da);
                        let mut db = vec![S::zero(); k * n];
                        matmul_slices(k, m, n, &a, true, g, false, S::zero(), &mut db);
                        vec![Some(da), Some(db)]
                    }),
                ))
            }
            (3, 2) => {
                let (bsz, m, k) = (ls[0], ls[1], ls[2]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let a = self.data_arc();
                let b = rhs.data_arc();
                let rows = bsz * m;
                let mut out = vec![S::zero(); rows * n];
                matmul_slices(rows, k, n, &a, false, &b, false, S::zero(), &mut out);
                Ok(Tensor::from_op(
                    vec![bsz, m, n],
                    out,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        let mut da = vec![S::zero(); rows * k];
                        matmul_slices(rows, n, k, g, false, &b, true, S::zero(), &mut da);
                        // db = sum_b a_b^T g_b == a_flat^T @ g_flat
                        let mut db = vec![S::zero(); k * n];
                        matmul_slices(k, rows, n, &a, true, g, false, S::zero(), &mut db);
                        vec![Some(da), Some(db)]
                    }),
                ))
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(mismatch());
                }
                self.bmm(rhs)
            }
            _ => Err(mismatch()),
        }
    }

    /// Batched matmul `[N,m,k] @ [N,k,n] -> [N,m,n]`.
    pub fn bmm(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if self.rank() != 3 || rhs.rank() != 3 || ls[0] != rs[0] || ls[2] != rs[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (nb, m, k, n) = (ls[0], ls[1], ls[2], rs[2]);
        let a = self.data_arc();
        let b = rhs.data_arc();
        let mut out = vec![S::zero(); nb * m * n];
        for i in 0..nb {
            matmul_slices(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                false,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Tensor::from_op(
            vec![nb, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut da = vec![S::zero(); nb * m * k];
                let mut db = vec![S::zero(); nb * k * n];
                for i in 0..nb {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    matmul_slices(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &b[i * k * n..(i + 1) * k * n],
                        true,
                        S::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    matmul_slices(
                        k,
                        m,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        true,
                        gi,
                        false,
                        S::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched `a @ b^T`: `[N,m,k] x [N,n,k] -> [N,m,n]`. Attention scores
    /// use this so keys never need a materialized transpose.
    pub fn bmm_bt(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if self.rank() != 3 || rhs.rank() != 3 || ls[0] != rs[0] || ls[2] != rs[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_bt",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (nb, m, k, n) = (ls[0], ls[1], ls[2], rs[1]);
        let a = self.data_arc();
        let b = rhs.data_arc();
        let mut out = vec![S::zero(); nb * m * n];
        for i in 0..nb {
            matmul_slices(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * n * k..(i + 1) * n * k],
                true,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Tensor::from_op(
            vec![nb, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut da = vec![S::zero(); nb * m * k];
                let mut db = vec![S::zero(); nb * n * k];
                for i in 0..nb {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    // da_i = g_i @ b_i ([m,n] x [n,k])
                    matmul_slices(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &b[i * n * k..(i + 1) * n * k],
                        false,
                        S::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    // db_i = g_i^T @ a_i ([n,m] x [m,k])
                    matmul_slices(
                        n,
                        m,
                        k,
                        gi,
                        true,
                        &a[i * m * k..(i + 1) * m * k],
                        false,
                        S::zero(),
                        &mut db[i * n * k..(i + 1) * n * k],
                    );
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Zero-copy view with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_arc(
            shape.to_vec(),
            self.data_arc(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Rank-4 axis swap `[a,b,c,d] -> [a,c,b,d]`; self-inverse, used to bring
    /// attention heads to the batch-major position.
    pub fn permute0213(&self) -> Result<Tensor<S>> {
        if self.rank() != 4 {
            return Err(Error::InvalidAxis {
                op: "permute0213",
                axis: 2,
                rank: self.rank(),
            });
        }
        let sh = self.shape().to_vec();
        let (a, b, c, d) = (sh[0], sh[1], sh[2], sh[3]);
        let data = permute_0213(self.data(), a, b, c, d);
        Ok(Tensor::from_op(
            vec![a, c, b, d],
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_0213(g, a, c, b, d))]),
        ))
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        let sh = self.shape();
        if start + len > sh[axis] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: sh.to_vec(),
                rhs: vec![start, len],
            });
        }
        let (outer, full, inner) = axis_split(sh, axis);
        let mut out_shape = sh.to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); total];
                for o in 0..outer {
                    let src_base = o * len * inner;
                    let dst_base = (o * full + start) * inner;
                    dx[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenate along `axis`. All inputs must agree on every other axis.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat" })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for (d, (a, b)) in first.shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for (p, &l) in parts.iter().zip(&lens) {
            let src = p.data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let s = o * l * inner;
                data[dst..dst + l * inner].copy_from_slice(&src[s..s + l * inner]);
            }
            offset += l;
        }
        let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                let mut outs = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &l in &lens {
                    let mut dp = vec![S::zero(); outer * l * inner];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * l * inner;
                        dp[dst..dst + l * inner].copy_from_slice(&g[src..src + l * inner]);
                    }
                    outs.push(Some(dp));
                    offset += l;
                }
                outs
            }),
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        if self.numel() == 0 {
            return Err(Error::EmptyInput { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = x[at(0)];
                for j in 1..len {
                    if x[at(j)] > m {
                        m = x[at(j)];
                    }
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let y = Arc::new(out);
        let y_for_back = Arc::clone(&y);
        Ok(Tensor::from_op_arc(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let y = &y_for_back;
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let rank = self.rank();
        if rank == 0 || self.numel() == 0 {
            return Err(Error::EmptyInput { op: "layer_norm" });
        }
        let d = self.shape()[rank - 1];
        if gamma.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: beta.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let gm = gamma.data_arc();
        let eps = S::from_f64(eps);
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut xhat = vec![S::zero(); x.len()];
        let mut istd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for v in row {
                mu += *v;
            }
            mu = mu * inv_d;
            let mut var = S::zero();
            for v in row {
                let c = *v - mu;
                var += c * c;
            }
            var = var * inv_d;
            let is = S::one() / (var + eps).sqrt();
            istd[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm[j] + beta.data()[j];
            }
        }
        let xhat = Arc::new(xhat);
        let istd = Arc::new(istd);
        let xhat_b = Arc::clone(&xhat);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let xhat = &xhat_b;
                let mut dx = vec![S::zero(); g.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..d {
                        let dxh = g[base + j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xhat[base + j];
                        dgamma[j] += g[base + j] * xhat[base + j];
                        dbeta[j] += g[base + j];
                    }
                    s1 = s1 * inv_d;
                    s2 = s2 * inv_d;
                    for j in 0..d {
                        let dxh = g[base + j] * gm[j];
                        dx[base + j] = istd[r] * (dxh - s1 - xhat[base + j] * s2);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    /// Logits `[B,C]`, labels length `B`; returns a scalar. Stable through
    /// log-sum-exp: large logits never produce NaN.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if b == 0 || c == 0 {
            return Err(Error::EmptyInput {
                op: "cross_entropy",
            });
        }
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
        }
        let x = self.data();
        let mut probs = vec![S::zero(); b * c];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let mut m = row[0];
            for v in row {
                if *v > m {
                    m = *v;
                }
            }
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / sum;
            }
            let lse = m + sum.ln();
            loss += lse - row[labels[r]];
        }
        loss = loss / S::from_f64(b as f64);
        let probs = Arc::new(probs);
        let labels: Arc<Vec<usize>> = Arc::new(labels.to_vec());
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / S::from_f64(b as f64);
                let mut dx = vec![S::zero(); b * c];
                for r in 0..b {
                    for j in 0..c {
                        let one_hot = if labels[r] == j { S::one() } else { S::zero() };
                        dx[r * c + j] = (probs[r * c + j] - one_hot) * scale;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let c0 = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = S::from_f64(0.044_715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let x = self.data_arc();
        let mut tanh_u = vec![S::zero(); x.len()];
        let mut out = vec![S::zero(); x.len()];
        for (i, &v) in x.iter().enumerate() {
            let t = (c0 * (v + c1 * v * v * v)).tanh();
            tanh_u[i] = t;
            out[i] = half * v * (S::one() + t);
        }
        let tanh_u = Arc::new(tanh_u);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); g.len()];
                for i in 0..g.len() {
                    let v = x[i];
                    let t = tanh_u[i];
                    let sech2 = S::one() - t * t;
                    let du = c0 * (S::one() + three * c1 * v * v);
                    dx[i] = g[i] * (half * (S::one() + t) + half * v * sech2 * du);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Inverted dropout: keeps each element with probability `1-rate` scaled
    /// by `1/(1-rate)`, so expected activations match eval mode. Call sites
    /// skip this op entirely at eval time or when the rate is zero.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config {
                reason: format!("dropout rate {rate} outside [0,1)"),
            });
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Arc<Vec<S>> = Arc::new(
            (0..self.numel())
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        S::zero()
                    } else {
                        keep
                    }
                })
                .collect(),
        );
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| *v * *m)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(mask.iter()).map(|(gi, m)| *gi * *m).collect(),
                )]
            }),
        ))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "mean_axis",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyInput { op: "mean_axis" });
        }
        let x = self.data();
        let inv = S::one() / S::from_f64(len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); total];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let mut s = S::zero();
        for v in self.data() {
            s += *v;
        }
        let total = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; total])]),
        )
    }

    /// Row lookup into an embedding table `[V,D]`; gradient scatters back
    /// into the selected rows.
    pub fn embed_rows(&self, ids: &[usize]) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, len: v });
            }
        }
        let x = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&x[id * d..(id + 1) * d]);
        }
        let ids: Arc<Vec<usize>> = Arc::new(ids.to_vec());
        let table_len = self.numel();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![S::zero(); table_len];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }
}

fn permute_0213<S: Scalar>(x: &[S], a: usize, b: usize, c: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i0 in 0..a {
        for i1 in 0..b {
            for i2 in 0..c {
                let src = ((i0 * b + i1) * c + i2) * d;
                let dst = ((i0 * c + i2) * b + i1) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn softmax_known_row() {
        let x = t64(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = x.softmax(1).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_67, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(expect) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        let sum: f64 = y.data().iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t64(&[1, 4], &[1.0, -2.0, 0.5, 3.0]);
        let shifted = t64(&[1, 4], &[1001.0, 998.0, 1000.5, 1003.0]);
        let a = x.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_relative_eq!(*u, *v, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_invalid_axis() {
        let x = t64(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            x.softmax(2),
            Err(Error::InvalidAxis { op: "softmax", .. })
        ));
    }

    #[test]
    fn cross_entropy_known_values() {
        let x = t64(&[1, 3], &[1.0, 2.0, 3.0]);
        let l = x.cross_entropy(&[2]).unwrap();
        assert_relative_eq!(l.data()[0], 0.407_605_964_444_380_3, max_relative = 1e-12);

        let u = t64(&[1, 2], &[0.0, 0.0]);
        let l2 = u.cross_entropy(&[0]).unwrap();
        assert_relative_eq!(l2.data()[0], std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_extreme_logits_stay_finite() {
        let x = t64(&[1, 2], &[100.0, 0.0]);
        let l = x.cross_entropy(&[0]).unwrap();
        assert!(l.data()[0].is_finite());
        assert!(l.data()[0] >= 0.0);
        assert!(l.data()[0] < 1e-8);
        let worse = t64(&[1, 2], &[1000.0, -1000.0]);
        assert!(worse.cross_entropy(&[1]).unwrap().data()[0].is_finite());
    }

    #[test]
    fn cross_entropy_label_range_checked() {
        let x = t64(&[2, 3], &[0.0; 6]);
        assert!(matches!(
            x.cross_entropy(&[0, 3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        assert!(matches!(
            x.cross_entropy(&[0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t64(&[1, 2], &[0.0, 2.0]);
        let g = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert_relative_eq!(y.data()[0], -1.0, epsilon = 1e-6);
        assert_relative_eq!(y.data()[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let x = t64(&[2, 4], &[0.5; 8]);
        let g = Tensor::new(&[3], vec![1.0; 3]).unwrap();
        let b = Tensor::new(&[4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            x.layer_norm(&g, &b, 1e-5),
            Err(Error::ShapeMismatch {
                op: "layer_norm",
                ..
            })
        ));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[4, 2], &[0.0; 8]);
        let err = a.matmul(&b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // f = sum(A@B); dA = ones @ B^T, dB = A^T @ ones.
        let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t64(&[3, 2], &[1.0, -1.0, 0.5, 2.0, -2.0, 0.0]);
        let y = a.matmul(&b).unwrap().sum_all();
        y.backward().unwrap();
        let da = a.grad().unwrap();
        let db = b.grad().unwrap();
        // row sums of B
        assert_eq!(da, vec![0.0, 2.5, -2.0, 0.0, 2.5, -2.0]);
        // column sums of A broadcast over B's columns
        assert_eq!(db, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let a = t64(&[2, 2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let b = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(
            y.data(),
            &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 10.0, 12.0]
        );
        y.sum_all().backward().unwrap();
        // db sums contributions across both batch slices
        let db = b.grad().unwrap();
        assert_eq!(db, vec![3.0, 3.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bmm_bt_matches_explicit_transpose() {
        let a = t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bt = t64(&[1, 2, 3], &[1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
        let y = a.bmm_bt(&bt).unwrap();
        // rows of a dotted with rows of bt
        assert_eq!(y.data(), &[4.0, 4.0, 10.0, 13.0]);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[1, 1, 2], &[5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.data(), &[5.0, 6.0]);
        back.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(a.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn add_suffix_broadcast_and_grad() {
        let x = t64(&[2, 2, 2], &[0.0; 8]);
        let bias = t64(&[2], &[1.0, 2.0]);
        let y = x.add_suffix(&bias).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(bias.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn permute0213_roundtrip() {
        let x = t64(&[1, 2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = x.permute0213().unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 1]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let rt = p.permute0213().unwrap();
        assert_eq!(rt.data(), x.data());
    }

    #[test]
    fn embedding_scatters_gradient() {
        let table = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = table.embed_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            table.embed_rows(&[3]),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn dropout_zero_kills_and_rescales() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = t64(&[1, 1000], &[1.0; 1000]);
        let y = x.dropout(0.25, &mut rng).unwrap();
        let kept = y.data().iter().filter(|v| **v != 0.0).count();
        // all survivors are scaled by 1/(1-p)
        for v in y.data() {
            assert!(*v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-12);
        }
        assert!((650..=850).contains(&kept), "kept {kept}");
        // same seed, same mask
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let y2 = x.dropout(0.25, &mut rng2).unwrap();
        assert_eq!(y.data(), y2.data());
        assert!(x.dropout(1.0, &mut rng).is_err());
    }

    #[test]
    fn mean_axis_removes_axis() {
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = x.mean_axis(1).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2.0, 5.0]);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0 / 3.0; 6]);
    }
}
