//! Finite-difference verification of backward implementations.
//!
//! Central differences in f64: truncation error O(eps^2) and roundoff
//! O(ulp/eps) are both far below the tolerances asserted by callers when
//! eps = 1e-5, so a failure here means a wrong derivative, not noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Relative disagreement between analytic and finite-difference gradients,
/// floored so near-zero coordinates compare absolutely.
fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3)
}

/// Maximum relative gradient error of `f` over every coordinate of every
/// input. `f` must reduce to a scalar tensor and must be a pure function of
/// its inputs (re-seed any RNG it uses internally).
pub fn max_rel_err<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    max_rel_err_sampled(inputs, f, None, 0)
}

/// Like [`max_rel_err`] but probing only `per_input` randomly chosen
/// coordinates of each input; the full sweep is quadratic in model size and
/// only feasible for op-sized tensors.
pub fn max_rel_err_sampled<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: F,
    per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, d)| Tensor::leaf(s, d.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, (_, data)) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match per_input {
            None => (0..data.len()).collect(),
            Some(k) => (0..k.min(data.len()))
                .map(|_| pick.gen_range(0..data.len()))
                .collect(),
        };
        for j in coords {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (s, d))| {
                        let mut d = d.clone();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::leaf(s, d, false)
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&probe)?.data()[0])
            };
            let fd = (eval(EPS)? - eval(-EPS)?) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
    }
    Ok(worst)
}

/// One op's verification outcome.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n)).unwrap()
}

/// Gradient-check every differentiable op against central differences, with
/// a fixed random weighting on the output so no backward path sees a
/// uniform gradient. Returns one entry per op.
pub fn run_op_suite() -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: Result<f64>| -> Result<()> {
        out.push(OpCheck {
            name,
            max_rel_err: err?,
        });
        Ok(())
    };

    {
        let (a, b) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6));
        let w = weight(&mut rng, &[2, 3]);
        push(
            "add",
            max_rel_err(&[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())], |t| {
                t[0].add(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
        let w2 = weight(&mut rng, &[2, 3]);
        push(
            "sub",
            max_rel_err(&[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())], |t| {
                t[0].sub(&t[1])?.mul(&w2).map(|v| v.sum_all())
            }),
        )?;
        let w3 = weight(&mut rng, &[2, 3]);
        push(
            "mul",
            max_rel_err(&[(vec![2, 3], a.clone()), (vec![2, 3], b)], |t| {
                t[0].mul(&t[1])?.mul(&w3).map(|v| v.sum_all())
            }),
        )?;
        let w4 = weight(&mut rng, &[2, 3]);
        push(
            "scale",
            max_rel_err(&[(vec![2, 3], a)], |t| {
                t[0].scale(1.7).mul(&w4).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let x = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 6);
        let w = weight(&mut rng, &[2, 2, 3]);
        push(
            "add_suffix",
            max_rel_err(&[(vec![2, 2, 3], x), (vec![2, 3], b)], |t| {
                t[0].add_suffix(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let (a, b) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 8));
        let w = weight(&mut rng, &[3, 2]);
        push(
            "matmul_2d",
            max_rel_err(&[(vec![3, 4], a), (vec![4, 2], b)], |t| {
                t[0].matmul(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let (a, b) = (rand_vec(&mut rng, 24), rand_vec(&mut rng, 8));
        let w = weight(&mut rng, &[2, 3, 2]);
        push(
            "matmul_shared_rhs",
            max_rel_err(&[(vec![2, 3, 4], a), (vec![4, 2], b)], |t| {
                t[0].matmul(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let (a, b) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 12));
        let w = weight(&mut rng, &[2, 2, 2]);
        push(
            "bmm",
            max_rel_err(&[(vec![2, 2, 3], a), (vec![2, 3, 2], b)], |t| {
                t[0].bmm(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let (a, b) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 24));
        let w = weight(&mut rng, &[2, 2, 4]);
        push(
            "bmm_bt",
            max_rel_err(&[(vec![2, 2, 3], a), (vec![2, 4, 3], b)], |t| {
                t[0].bmm_bt(&t[1])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 12);
        let w = weight(&mut rng, &[3, 4]);
        push(
            "reshape",
            max_rel_err(&[(vec![2, 6], a)], |t| {
                t[0].reshape(&[3, 4])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let a = rand_vec(&mut rng, 24);
        let w = weight(&mut rng, &[2, 3, 2, 2]);
        push(
            "permute0213",
            max_rel_err(&[(vec![2, 2, 3, 2], a)], |t| {
                t[0].permute0213()?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let a = rand_vec(&mut rng, 20);
        let w = weight(&mut rng, &[2, 3, 2]);
        push(
            "narrow",
            max_rel_err(&[(vec![2, 5, 2], a)], |t| {
                t[0].narrow(1, 1, 3)?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }
    {
        let (a, b) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 12));
        let w = weight(&mut rng, &[2, 5, 2]);
        push(
            "concat",
            max_rel_err(&[(vec![2, 2, 2], a), (vec![2, 3, 2], b)], |t| {
                Tensor::concat(&[&t[0], &t[1]], 1)?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 24);
        let w = weight(&mut rng, &[2, 3, 4]);
        push(
            "softmax_last",
            max_rel_err(&[(vec![2, 3, 4], a.clone())], |t| {
                t[0].softmax(2)?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
        let w2 = weight(&mut rng, &[2, 3, 4]);
        push(
            "softmax_mid",
            max_rel_err(&[(vec![2, 3, 4], a)], |t| {
                t[0].softmax(1)?.mul(&w2).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let x = rand_vec(&mut rng, 12);
        let gamma: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta = rand_vec(&mut rng, 4);
        let w = weight(&mut rng, &[3, 4]);
        push(
            "layer_norm",
            max_rel_err(
                &[(vec![3, 4], x), (vec![4], gamma), (vec![4], beta)],
                |t| {
                    t[0].layer_norm(&t[1], &t[2], 1e-5)?
                        .mul(&w)
                        .map(|v| v.sum_all())
                },
            ),
        )?;
    }

    {
        let x = rand_vec(&mut rng, 20);
        push(
            "cross_entropy",
            max_rel_err(&[(vec![4, 5], x)], |t| t[0].cross_entropy(&[0, 3, 2, 4])),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 12);
        let w = weight(&mut rng, &[2, 6]);
        push(
            "gelu",
            max_rel_err(&[(vec![2, 6], a)], |t| {
                t[0].gelu().mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 16);
        let w = weight(&mut rng, &[2, 8]);
        // fixed seed inside the closure makes the dropped set a constant
        push(
            "dropout",
            max_rel_err(&[(vec![2, 8], a)], |t| {
                let mut r = ChaCha8Rng::seed_from_u64(7);
                t[0].dropout(0.3, &mut r)?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 24);
        let w = weight(&mut rng, &[2, 4]);
        push(
            "mean_axis",
            max_rel_err(&[(vec![2, 3, 4], a)], |t| {
                t[0].mean_axis(1)?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let table = rand_vec(&mut rng, 15);
        let w = weight(&mut rng, &[4, 3]);
        push(
            "embed_rows",
            max_rel_err(&[(vec![5, 3], table)], |t| {
                t[0].embed_rows(&[0, 4, 2, 2])?.mul(&w).map(|v| v.sum_all())
            }),
        )?;
    }

    {
        let a = rand_vec(&mut rng, 7);
        push(
            "sum_all",
            max_rel_err(&[(vec![7], a)], |t| Ok(t[0].sum_all())),
        )?;
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let checks = run_op_suite().unwrap();
        assert!(checks.len() >= 20);
        for c in &checks {
            assert!(
                c.max_rel_err < 1e-4,
                "{} rel err {:.3e}",
                c.name,
                c.max_rel_err
            );
        }
    }

    #[test]
    fn chained_ops_match_finite_differences() {
        // linear -> gelu -> layer_norm -> linear -> cross entropy
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_vec(&mut rng, 2 * 8);
        let w1 = rand_vec(&mut rng, 8 * 4);
        let b1 = rand_vec(&mut rng, 4);
        let g = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let be = rand_vec(&mut rng, 4);
        let w2 = rand_vec(&mut rng, 4 * 3);
        let err = max_rel_err(
            &[
                (vec![2, 8], x),
                (vec![8, 4], w1),
                (vec![4], b1),
                (vec![4], g),
                (vec![4], be),
                (vec![4, 3], w2),
            ],
            |t| {
                let h = t[0].matmul(&t[1])?.add_suffix(&t[2])?.gelu();
                let n = h.layer_norm(&t[3], &t[4], 1e-5)?;
                n.matmul(&t[5])?.cross_entropy(&[2, 0])
            },
        )
        .unwrap();
        assert!(err < 1e-4, "chain rel err {err:.3e}");
    }

    #[test]
    fn sampling_probes_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vec(&mut rng, 50);
        let err = max_rel_err_sampled(
            &[(vec![5, 10], a)],
            |t| Ok(t[0].gelu().sum_all()),
            Some(5),
            11,
        )
        .unwrap();
        assert!(err < 1e-4);
    }
}
