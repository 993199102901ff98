use dsat::numerics::{grad_check_inputs, Tape, Tensor, Var, NORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += x.at(&[b, c, ii as usize, jj as usize])
                                        * w.at(&[o, c, ki, kj]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, i, j], acc);
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution.
fn naive_conv_transpose(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for c in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    for o in 0..co {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oi = (i * stride + ki) as isize - pad as isize;
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oi >= 0 && oj >= 0 && (oi as usize) < ho && (oj as usize) < wo {
                                    let idx = [b, o, oi as usize, oj as usize];
                                    let v =
                                        out.at(&idx) + x.at(&[b, c, i, j]) * w.at(&[c, o, ki, kj]);
                                    out.set(&idx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weighted sum so every output element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(v), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

#[test]
fn matmul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_fn(
        &[3, 3],
        |i| if i % 4 == 0 { 1.0 } else { 0.0 },
    ));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(eye, mv).unwrap();
    assert_eq!(tape.value(out), &m);
    let z = tape.constant(Tensor::zeros(&[3, 3]));
    let out = tape.matmul(z, mv).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(out).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn bmm_transposes_match_explicit_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 4, 3], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    // aᵀ b per batch: [3, 5]
    let out = tape.bmm(va, vb, true, false).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|p| a.at(&[bi, p, i]) * b.at(&[bi, p, j])).sum();
                assert!((tape.value(out).at(&[bi, i, j]) - expect).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn conv_identity_kernel_and_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 3, 4, 4], &mut rng);
    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(eye);
    let out = tape.conv2d(xv, wv, 1, 0).unwrap();
    assert_eq!(tape.value(out), &x);
    let z = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let out = tape.conv2d(xv, z, 1, 1).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let out = tape.conv2d(xv, wv, stride, pad).unwrap();
        let expect = naive_conv(&x, &w, stride, pad);
        assert_eq!(tape.shape(out), expect.shape());
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-13);
    }
}

#[test]
fn conv_rejects_empty_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        tape.conv2d(x, w, 1, 0),
        Err(dsat::Error::Config(_))
    ));
}

#[test]
fn conv_transpose_matches_scatter_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 3, 4], &mut rng);
    let w = random(&[3, 2, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let out = tape.conv_transpose2d(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.shape(out), &[2, 2, 6, 8]);
    let expect = naive_conv_transpose(&x, &w, 2, 1);
    assert!(tape.value(out).max_abs_diff(&expect) < 1e-13);
}

#[test]
fn adaptive_avg_pool_matches_mean_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 4, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.adaptive_avg_pool(xv).unwrap();
    assert_eq!(tape.shape(out), &[1, 4]);
    for c in 0..4 {
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                total += x.at(&[0, c, i, j]);
            }
        }
        assert!((tape.value(out).at(&[0, c]) - total / 9.0).abs() < 1e-15);
    }
    let constant = tape.constant(Tensor::full(&[2, 2, 3, 5], 0.75));
    let out = tape.adaptive_avg_pool(constant).unwrap();
    assert!(tape
        .value(out)
        .data()
        .iter()
        .all(|&v| (v - 0.75).abs() < 1e-15));
    let zero = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let out = tape.adaptive_avg_pool(zero).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn upsample_multiplies_extents() {
    let mut tape = Tape::new();
    for (h, w, k) in [(2, 3, 2), (4, 4, 4), (1, 5, 8)] {
        let x = tape.constant(Tensor::from_fn(&[1, 2, h, w], |i| i as f64));
        let up = tape.upsample_nearest(x, k).unwrap();
        assert_eq!(tape.shape(up), &[1, 2, k * h, k * w]);
        let pooled = tape.max_pool2d(up, k).unwrap();
        assert_eq!(tape.value(pooled), tape.value(x));
    }
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 4, 5, 5], &mut rng).map(|v| 10.0 * v + 3.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let (y, stats) = tape.batch_norm_train(xv, g, b).unwrap();
    assert_eq!(stats.count, 75);
    let y = tape.value(y);
    for c in 0..4 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..25).map(move |p| (n, p)))
            .map(|(n, p)| y.data()[(n * 4 + c) * 25 + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / 75.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 75.0;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
}

#[test]
fn layer_norm_normalizes_each_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 3, 8], &mut rng).map(|v| 5.0 * v - 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape.layer_norm(xv, g, b).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5, "{var} (eps {NORM_EPS})");
    }
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> dsat::Result<Var>) {
    let report = grad_check_inputs(inputs, f, EPS, TOL).unwrap();
    assert!(
        report.passed(),
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn gradients_of_elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let m = t.scale(m, 1.7);
        Ok(weighted_sum(t, m, 1))
    });
    check(std::slice::from_ref(&a), |t, v| {
        let s = t.sigmoid(v[0]);
        Ok(weighted_sum(t, s, 2))
    });
    // Keep ReLU inputs away from the kink.
    let away = a.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    check(&[away], |t, v| {
        let r = t.relu(v[0]);
        Ok(weighted_sum(t, r, 3))
    });
    check(&[a.clone(), b.clone()], |t, v| t.mse(v[0], v[1]));
    check(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])));
    let bias = random(&[4], &mut rng);
    check(&[a.clone(), bias], |t, v| {
        let y = t.add_bias_last(v[0], v[1])?;
        Ok(weighted_sum(t, y, 4))
    });
}

#[test]
fn gradients_of_linear_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    check(
        &[random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(weighted_sum(t, y, 5))
        },
    );
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta {
            random(&[2, 3, 4], &mut rng)
        } else {
            random(&[2, 4, 3], &mut rng)
        };
        let b = if tb {
            random(&[2, 5, 3], &mut rng)
        } else {
            random(&[2, 3, 5], &mut rng)
        };
        check(&[a, b], move |t, v| {
            let y = t.bmm(v[0], v[1], ta, tb)?;
            Ok(weighted_sum(t, y, 6))
        });
    }
    check(
        &[random(&[2, 3, 4], &mut rng), random(&[4, 3], &mut rng)],
        |t, v| {
            let y = t.linear(v[0], v[1])?;
            Ok(weighted_sum(t, y, 7))
        },
    );
}

#[test]
fn gradients_of_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check(
            &[
                random(&[2, 2, 4, 4], &mut rng),
                random(&[2, 2, 3, 3], &mut rng),
            ],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                Ok(weighted_sum(t, y, 8))
            },
        );
    }
    check(
        &[
            random(&[1, 2, 3, 3], &mut rng),
            random(&[2, 2, 4, 4], &mut rng),
        ],
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2, 1)?;
            Ok(weighted_sum(t, y, 9))
        },
    );
}

#[test]
fn gradients_of_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let g = random(&[3], &mut rng);
    let b = random(&[3], &mut rng);
    check(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
        Ok(weighted_sum(t, y, 10))
    });
    check(&[x, g, b], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?;
        Ok(weighted_sum(t, y, 11))
    });
    check(
        &[
            random(&[2, 3, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5], &mut rng),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            Ok(weighted_sum(t, y, 12))
        },
    );
}

#[test]
fn gradients_of_pooling_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[2, 3, 4, 4], &mut rng);
    check(std::slice::from_ref(&x), |t, v| {
        let y = t.max_pool2d(v[0], 2)?;
        Ok(weighted_sum(t, y, 13))
    });
    check(std::slice::from_ref(&x), |t, v| {
        let y = t.adaptive_avg_pool(v[0])?;
        Ok(weighted_sum(t, y, 14))
    });
    check(std::slice::from_ref(&x), |t, v| {
        let y = t.upsample_nearest(v[0], 2)?;
        Ok(weighted_sum(t, y, 15))
    });
    check(std::slice::from_ref(&x), |t, v| {
        let tok = t.to_tokens(v[0])?;
        let a = t.slice_last(tok, 1, 2)?;
        let b = t.slice_last(tok, 0, 1)?;
        let d = t.slice_last(tok, 1, 1)?;
        let c = t.concat_last(&[a, b, d])?;
        let back = t.reshape(c, &[2, 16, 4])?;
        let img = t.from_tokens(back, 4, 4)?;
        Ok(weighted_sum(t, img, 16))
    });
    check(&[x, random(&[3, 4, 4], &mut rng)], |t, v| {
        let y = t.add_broadcast_leading(v[0], v[1])?;
        Ok(weighted_sum(t, y, 17))
    });
    check(
        &[random(&[2, 3, 2, 2], &mut rng), random(&[2, 3], &mut rng)],
        |t, v| {
            let y = t.channel_mask(v[0], v[1])?;
            Ok(weighted_sum(t, y, 18))
        },
    );
}

#[test]
fn two_layer_composition_matches_chained_jacobians() {
    // f(x) = sum(w2 · relu(w1 · x)) with the chain written out by hand.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w1 = random(&[3, 4], &mut rng);
    let w2 = random(&[1, 3], &mut rng);
    let x = random(&[4, 1], &mut rng);
    let mut tape = Tape::new();
    let (a, b, xv) = (
        tape.constant(w1.clone()),
        tape.constant(w2.clone()),
        tape.leaf(x.clone()),
    );
    let h = tape.matmul(a, xv).unwrap();
    let r = tape.relu(h);
    let y = tape.matmul(b, r).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();

    let pre = naive_matmul(&w1, &x);
    for j in 0..4 {
        let expect: f64 = (0..3)
            .map(|i| {
                if pre[i] > 0.0 {
                    w2.at(&[0, i]) * w1.at(&[i, j])
                } else {
                    0.0
                }
            })
            .sum();
        assert!((grads.get(xv).unwrap()[j] - expect).abs() < 1e-14);
    }
}

#[test]
fn forward_values_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 8, 8], &mut rng).map(|v| v * 1e3));
    let w = tape.constant(random(&[3, 3, 3, 3], &mut rng));
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    let s = tape.sigmoid(y);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (n, _) = tape.batch_norm_train(s, g, b).unwrap();
    assert!(tape.value(n).is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_hold_on_random_shapes(
        seed in 0u64..1000,
        c in 1usize..3,
        h in 2usize..5,
        k in 1usize..4,
        stride in 1usize..3,
    ) {
        let pad = k / 2;
        prop_assume!(h + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, c, h, h], &mut rng);
        let w = random(&[2, c, k, k], &mut rng);
        let report = grad_check_inputs(&[x, w], move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            Ok(weighted_sum(t, y, seed))
        }, EPS, TOL).unwrap();
        prop_assert!(report.passed(), "{:?}", report.worst);
    }

    #[test]
    fn token_layout_round_trips(seed in 0u64..1000, n in 1usize..3, c in 1usize..5, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tok = tape.to_tokens(xv).unwrap();
        prop_assert_eq!(tape.shape(tok), &[n, h * w, c]);
        let back = tape.from_tokens(tok, h, w).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}
