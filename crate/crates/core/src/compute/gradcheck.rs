use super::{ComputeError, Graph, Tensor, Var};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` registers each input itself via `g.param(i, &inputs[i])` and may
/// draw randomness only from `seed`. Straight-through nodes are pinned to
/// their decisions at the unperturbed point, so the check covers the
/// straight-through gradient path too. Returns the largest relative error
/// `|a - b| / max(|a|, |b|, 1e-8)` over all input coordinates.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64, ComputeError>
where
    F: for<'a> FnMut(&mut Graph<'a, f64>, &'a [Tensor<f64>], u64) -> Result<Var, ComputeError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(ComputeError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let first = {
        let mut g = Graph::new();
        let loss = f(&mut g, inputs, seed)?;
        g.value(loss).item()
    };

    let mut g = Graph::recording();
    let loss = f(&mut g, inputs, seed)?;
    if g.value(loss).item().to_bits() != first.to_bits() {
        return Err(ComputeError::NonDeterministicFunction);
    }
    let grads = g.backward(loss)?;
    let anchors = g.take_anchors();

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64, ComputeError> {
        let mut g = Graph::replaying(anchors.clone());
        let loss = f(&mut g, xs, seed)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for c in 0..xs[i].len() {
            let x0 = xs[i].data()[c];
            xs[i].data_mut()[c] = x0 + eps;
            let plus = eval(&xs)?;
            xs[i].data_mut()[c] = x0 - eps;
            let minus = eval(&xs)?;
            xs[i].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.param(i).map_or(0.0, |t| t.data()[c]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::causal_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    fn check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
    where
        F: for<'a> FnMut(&mut Graph<'a, f64>, &'a [Tensor<f64>], u64) -> Result<Var, ComputeError>,
    {
        grad_check(f, inputs, 1e-5, 0).unwrap()
    }

    #[test]
    fn square_at_three() {
        let x = vec![Tensor::scalar(3.0)];
        let err = check(
            |g, xs, _| {
                let v = g.param(0, &xs[0]);
                let y = g.mul(v, v)?;
                g.sum(y)
            },
            &x,
        );
        assert!(err < 1e-9, "{err}");
        let mut g = Graph::new();
        let v = g.param(0, &x[0]);
        let y = g.mul(v, v).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.param(0).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_t(4, 3, 1) } else { rand_t(3, 4, 1) };
            let b = if tb { rand_t(5, 4, 2) } else { rand_t(4, 5, 2) };
            let w = rand_t(3, 5, 3);
            let err = check(
                |g, xs, _| {
                    let (a, b, w) = (g.param(0, &xs[0]), g.param(1, &xs[1]), g.param(2, &xs[2]));
                    let c = g.matmul_ex(a, ta, b, tb)?;
                    let y = g.mul(c, w)?;
                    g.sum(y)
                },
                &[a, b, w],
            );
            assert!(err < 1e-6, "ta={ta} tb={tb}: {err}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let x = rand_t(3, 4, 5);
        let pos = x.map(|v| v.abs() + 0.5);
        let row = rand_t(1, 4, 6);
        let col = rand_t(3, 1, 7);
        let w = rand_t(3, 4, 8);
        let err = check(
            |g, xs, _| {
                let (x, p, r, c, w) = (
                    g.param(0, &xs[0]),
                    g.param(1, &xs[1]),
                    g.param(2, &xs[2]),
                    g.param(3, &xs[3]),
                    g.param(4, &xs[4]),
                );
                let a = g.gelu(x)?;
                let b = g.sigmoid(x)?;
                let l = g.log(p)?;
                let e = g.exp(x)?;
                let s = g.add(a, b)?;
                let s = g.add(s, l)?;
                let s = g.add(s, e)?;
                let s = g.add_row(s, r)?;
                let s = g.mul_col(s, c)?;
                let s = g.affine(s, 0.7, 0.1)?;
                let s = g.mul(s, w)?;
                g.sum(s)
            },
            &[x, pos, row, col, w],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_layernorm_ce() {
        let x = rand_t(4, 6, 9);
        let gamma = rand_t(1, 6, 10);
        let beta = rand_t(1, 6, 11);
        let err = check(
            |g, xs, _| {
                let (x, ga, be) = (g.param(0, &xs[0]), g.param(1, &xs[1]), g.param(2, &xs[2]));
                let n = g.layer_norm(x, ga, be, 1e-5)?;
                let sq = g.slice_cols(n, 0, 4)?;
                let att = g.softmax(sq, Some(&causal_mask(4)))?;
                let back = g.matmul(att, n)?;
                g.cross_entropy(back, &[Some(1), None, Some(5), Some(0)])
            },
            &[x, gamma, beta],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pooling_gather_concat() {
        let x = rand_t(6, 3, 12);
        let w = rand_t(6, 1, 13).map(|v| v.abs() + 0.5);
        let probe = rand_t(9, 5, 14);
        let ids = [0, 0, 1, 2, 2, 2];
        let err = check(
            |g, xs, _| {
                let (x, w, p) = (g.param(0, &xs[0]), g.param(1, &xs[1]), g.param(2, &xs[2]));
                let a = g.segment_mean_pool(x, &ids, 3)?;
                let b = g.segment_weighted_pool(x, w, &ids, 3)?;
                let ab = g.concat_rows(&[a, b])?;
                let up = g.gather_rows(ab, &[0, 1, 2, 3, 4, 5, 5, 0, 3])?;
                let cs = g.cumsum_exclusive(w)?;
                let cs3 = g.gather_rows(cs, &[1, 2, 3, 4, 5, 0, 1, 2, 3])?;
                let cat = g.concat_cols(&[up, cs3, cs3])?;
                let y = g.mul(cat, p)?;
                g.mean(y)
            },
            &[x, w, probe],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn binomial_nll_and_clamp() {
        let k = vec![Tensor::scalar(3.3)];
        let err = check(
            |g, xs, _| {
                let k = g.param(0, &xs[0]);
                let k = g.clamp(k, 0.0, 10.0)?;
                g.binomial_nll(k, 10, 0.25)
            },
            &k,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn straight_through_is_checked_as_surrogate() {
        let x = rand_t(5, 1, 15);
        let probe = rand_t(5, 1, 16);
        let err = check(
            |g, xs, _| {
                let (x, p) = (g.param(0, &xs[0]), g.param(1, &xs[1]));
                let s = g.sigmoid(x)?;
                let (h, _) = g.straight_through(s)?;
                let y = g.mul(h, p)?;
                let y = g.mul(y, y)?;
                g.sum(y)
            },
            &[x, probe],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn hard_forward_values() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::column(vec![0.2, 0.5, 0.9]));
        let (h, hard) = g.straight_through(s).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 1.0]);
        assert_eq!(hard, vec![false, true, true]);
    }

    #[test]
    fn trivial_values() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::scalar(0.0));
        let y = g.gelu(z).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(z).unwrap().item() - 0.5).abs() < 1e-15);

        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(z).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(z).unwrap().item() - 0.25).abs() < 1e-15);

        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::full(1, 7, 2.5));
        let y = g.softmax(z, None).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(3, 259));
        let ce = g.cross_entropy(z, &[Some(0), Some(100), Some(258)]).unwrap();
        assert!((g.value(ce).item() - 259f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(1.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(ComputeError::BackwardTwice)));
    }

    #[test]
    fn non_finite_forward_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(-1.0));
        assert!(matches!(g.log(x), Err(ComputeError::NonFiniteValue { op: "log" })));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(ComputeError::ShapeMismatch { .. })));
        assert!(matches!(g.segment_mean_pool(a, &[0, 2], 2), Err(ComputeError::ShapeMismatch { .. })));
        assert!(matches!(g.segment_mean_pool(a, &[1, 1], 2), Err(ComputeError::ShapeMismatch { .. })));
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut calls = 0u32;
        let x = vec![Tensor::scalar(1.0)];
        let r = grad_check(
            |g, xs, _| {
                calls += 1;
                let v = g.param(0, &xs[0]);
                g.affine(v, 1.0, calls as f64)
            },
            &x,
            1e-5,
            0,
        );
        assert!(matches!(r, Err(ComputeError::NonDeterministicFunction)));
    }

    #[test]
    fn eps_range_enforced() {
        let x = vec![Tensor::scalar(1.0)];
        let r = grad_check(|g, xs, _| Ok(g.param(0, &xs[0])), &x, 1e-2, 0);
        assert!(matches!(r, Err(ComputeError::InvalidArgument(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert!((grads.wrt(x).unwrap().item() - 7.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gradient_is_linear(ca in -3.0f64..3.0, cb in -3.0f64..3.0, seed in 0u64..1000) {
                let x = rand_t(3, 3, seed);
                let build = |g: &mut Graph<'_, f64>, v: Var, which: u8| -> Var {
                    match which {
                        0 => { let s = g.gelu(v).unwrap(); g.sum(s).unwrap() }
                        _ => { let m = g.matmul(v, v).unwrap(); let s = g.sigmoid(m).unwrap(); g.sum(s).unwrap() }
                    }
                };
                let grad_of = |which: Option<u8>| -> Tensor<f64> {
                    let mut g = Graph::new();
                    let v = g.param(0, &x);
                    let loss = match which {
                        Some(w) => build(&mut g, v, w),
                        None => {
                            let f = build(&mut g, v, 0);
                            let h = build(&mut g, v, 1);
                            let f = g.scale(f, ca).unwrap();
                            let h = g.scale(h, cb).unwrap();
                            g.add(f, h).unwrap()
                        }
                    };
                    g.backward(loss).unwrap().param(0).unwrap().clone()
                };
                let (gf, gh, gc) = (grad_of(Some(0)), grad_of(Some(1)), grad_of(None));
                for i in 0..gc.len() {
                    let expect = ca * gf.data()[i] + cb * gh.data()[i];
                    prop_assert!((gc.data()[i] - expect).abs() < 1e-10);
                }
            }

            #[test]
            fn pool_then_duplicate_is_identity_on_piecewise_constant(lens in proptest::collection::vec(1usize..5, 1..6), seed in 0u64..1000) {
                let m = lens.len();
                let vals = rand_t(m, 4, seed);
                let ids: Vec<usize> = lens.iter().enumerate().flat_map(|(j, &l)| std::iter::repeat(j).take(l)).collect();
                let mut g = Graph::<f64>::new();
                let table = g.constant(vals);
                let x = g.gather_rows(table, &ids).unwrap();
                let pooled = g.segment_mean_pool(x, &ids, m).unwrap();
                let back = g.gather_rows(pooled, &ids).unwrap();
                for (a, b) in g.value(x).data().iter().zip(g.value(back).data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
