use dic_core::gradcheck;
use dic_core::tensor::kernels;
use dic_core::{DicError, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Seven nested loops, cross-correlation, zero padding 1.
fn naive_conv3x3(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4("oracle").unwrap();
    let cout = w.shape()[0];
    let (ho, wo) = (h / stride, wd / stride);
    let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize) -> dic_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv3x3(xv, wv, bv, stride)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_all_ones() {
    let y = conv(&Tensor::full(vec![1, 1, 3, 3], 1.0), &Tensor::full(vec![1, 1, 3, 3], 1.0), None, 1).unwrap();
    assert_eq!(y.data()[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(y.data()[corner], 4.0);
    }
}

#[test]
fn conv_dirac_is_identity() {
    let x = random(&[2, 3, 6, 6], 1);
    let mut w = Tensor::zeros(vec![3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    assert_eq!(conv(&x, &w, None, 1).unwrap(), x);
}

#[test]
fn conv_matches_loop_oracle() {
    let x = random(&[2, 3, 8, 8], 2);
    let w = random(&[5, 3, 3, 3], 3);
    for stride in [1, 2] {
        let fast = conv(&x, &w, None, stride).unwrap();
        let slow = naive_conv3x3(&x, &w, stride);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "stride {stride}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_bias_and_errors() {
    let x = random(&[1, 2, 4, 4], 4);
    let w = random(&[3, 2, 3, 3], 5);
    let b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let with = conv(&x, &w, Some(&b), 1).unwrap();
    let without = conv(&x, &w, None, 1).unwrap();
    for (i, (a, c)) in with.data().iter().zip(without.data()).enumerate() {
        assert!((a - c - b.data()[i / 16]).abs() < 1e-12);
    }
    assert!(matches!(conv(&x, &random(&[3, 4, 3, 3], 6), None, 1), Err(DicError::Shape { .. })));
    assert!(matches!(conv(&random(&[1, 2, 5, 4], 7), &w, None, 2), Err(DicError::Shape { .. })));
    assert!(matches!(conv(&x, &w, None, 3), Err(DicError::Shape { .. })));
}

fn gn(x: &Tensor<f64>, groups: usize, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> dic_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, g, b) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let y = tape.group_norm(xv, groups, g, b, 1e-5)?;
    Ok(tape.value(y).clone())
}

#[test]
fn group_norm_constant_input_is_zero() {
    let c = 8;
    let y = gn(&Tensor::full(vec![2, c, 3, 3], 3.5), 4, &Tensor::full(vec![c], 1.0), &Tensor::zeros(vec![c])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_zero_gamma_gives_beta() {
    let c = 6;
    let beta = Tensor::from_fn(vec![c], |i| i as f64 - 2.0);
    let y = gn(&random(&[2, c, 4, 4], 8), 3, &Tensor::zeros(vec![c]), &beta).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, beta.data()[(i / 16) % c]);
    }
}

#[test]
fn group_norm_output_statistics() {
    let (n, c, groups) = (2, 32, 16);
    let x = random(&[n, c, 4, 4], 9).map(|v| 3.0 * v + 0.7);
    let y = gn(&x, groups, &Tensor::full(vec![c], 1.0), &Tensor::zeros(vec![c])).unwrap();
    let m = (c / groups) * 16;
    for seg in y.data().chunks(m) {
        let mean = seg.iter().sum::<f64>() / m as f64;
        let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    assert!(matches!(gn(&x, 5, &Tensor::full(vec![c], 1.0), &Tensor::zeros(vec![c])), Err(DicError::Shape { .. })));
}

/// erf from its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_values() {
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    let oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((kernels::gelu(1.0f64) - oracle).abs() < 1e-12);
    assert!((kernels::gelu(1.0f64) - 0.8413447).abs() < 1e-7);
    for x in [-3.0, -0.4, 0.25, 1.7, 5.0f64] {
        assert!((kernels::gelu(x) - kernels::gelu(-x) - x).abs() < 1e-12);
    }
}

#[test]
fn silu_values() {
    assert_eq!(kernels::silu(0.0f64), 0.0);
    assert!((kernels::silu(20.0f64) - 20.0).abs() < 1e-6);
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((kernels::silu(1.0f64) - oracle).abs() < 1e-15);
    assert!((kernels::silu(1.0f64) - 0.7310586).abs() < 1e-7);
}

fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> dic_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}

#[test]
fn linear_cases() {
    let x = random(&[3, 4], 10);
    let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(vec![4]))).unwrap(), x);
    let b = Tensor::from_fn(vec![5], |i| i as f64);
    let y = linear(&x, &Tensor::zeros(vec![5, 4]), Some(&b)).unwrap();
    for row in y.data().chunks(5) {
        assert_eq!(row, b.data());
    }
    let w = random(&[5, 4], 11);
    let y = linear(&x, &w, None).unwrap();
    for i in 0..3 {
        for o in 0..5 {
            let dot: f64 = (0..4).map(|k| x.data()[i * 4 + k] * w.data()[o * 4 + k]).sum();
            assert!((y.data()[i * 5 + o] - dot).abs() < 1e-12);
        }
    }
    assert!(linear(&x, &random(&[5, 3], 12), None).is_err());
}

#[test]
fn concat_shapes_and_empty() {
    let mut tape = Tape::new();
    let a = tape.constant(random(&[1, 2, 4, 4], 13));
    let b = tape.constant(random(&[1, 3, 4, 4], 14));
    let e = tape.constant(Tensor::zeros(vec![1, 0, 4, 4]));
    let ab = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(ab), &[1, 5, 4, 4]);
    let ae = tape.concat_channels(a, e).unwrap();
    assert_eq!(tape.value(ae), tape.value(a));
    let bad = tape.constant(Tensor::zeros(vec![1, 1, 2, 4]));
    assert!(tape.concat_channels(a, bad).is_err());
}

#[test]
fn concat_sum_gradient_is_ones() {
    let names = vec!["a".to_string(), "b".to_string()];
    let inputs = vec![random(&[2, 2, 3, 3], 15), random(&[2, 1, 3, 3], 16)];
    let report = gradcheck::check(&names, &inputs, 20, 1e-5, 0, |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    for e in &report.entries {
        assert!((e.analytic - 1.0).abs() < 1e-12);
        assert!((e.numeric - 1.0).abs() < 1e-8);
    }
}

#[test]
fn upsample_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 1, 1], 2.5));
    let y = tape.upsample_nearest2x(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

    let x = random(&[2, 3, 3, 5], 17);
    let up = kernels::upsample_nearest2x(x.data(), 6, 3, 5);
    assert_eq!(kernels::avg_pool2x2(&up, 6, 6, 10), x.data());
}

#[test]
fn backward_basics() {
    let x0 = random(&[2, 3], 18);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(x).unwrap(), &x0);
}

#[test]
fn backward_errors_and_unreached_leaves() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[2, 2], 19), true);
    let unused = tape.leaf(random(&[3], 20), true);
    let sq = tape.mul(x, x).unwrap();
    assert!(matches!(tape.backward(sq), Err(DicError::NonScalarLoss(_))));
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(vec![3]));
    // consumed
    assert!(matches!(tape.backward(s), Err(DicError::TapeCleared)));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[2], 21), true);
    let s = tape.sum(x);
    tape.clear();
    assert!(matches!(tape.backward(s), Err(DicError::TapeCleared)));
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn probe(t: &mut Tape<f64>, y: dic_core::Var, seed: u64) -> dic_core::Result<dic_core::Var> {
    let w = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("in{i}")).collect()
}

#[test]
fn finite_differences_for_every_op() {
    let tol = 1e-4;
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[dic_core::Var]) -> dic_core::Result<dic_core::Var>>)> = vec![
        ("conv_s1", vec![random(&[2, 3, 5, 4], 30), random(&[4, 3, 3, 3], 31), random(&[4], 32)], Box::new(|t, v| {
            let y = t.conv3x3(v[0], v[1], Some(v[2]), 1)?;
            probe(t, y, 33)
        })),
        ("conv_s2", vec![random(&[2, 2, 6, 4], 34), random(&[3, 2, 3, 3], 35)], Box::new(|t, v| {
            let y = t.conv3x3(v[0], v[1], None, 2)?;
            probe(t, y, 36)
        })),
        ("patchify", vec![random(&[1, 2, 4, 6], 37), random(&[3, 2, 2, 2], 38)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 0)?;
            probe(t, y, 39)
        })),
        ("group_norm", vec![random(&[2, 6, 3, 3], 40), random(&[6], 41), random(&[6], 42)], Box::new(|t, v| {
            let y = t.group_norm(v[0], 3, v[1], v[2], 1e-5)?;
            probe(t, y, 43)
        })),
        ("gelu", vec![random(&[3, 7], 44).map(|v| 3.0 * v)], Box::new(|t, v| {
            let y = t.gelu(v[0]);
            probe(t, y, 45)
        })),
        ("silu", vec![random(&[3, 7], 46).map(|v| 3.0 * v)], Box::new(|t, v| {
            let y = t.silu(v[0]);
            probe(t, y, 47)
        })),
        ("linear", vec![random(&[3, 4], 48), random(&[5, 4], 49), random(&[5], 50)], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, 51)
        })),
        ("upsample", vec![random(&[1, 2, 3, 3], 52)], Box::new(|t, v| {
            let y = t.upsample_nearest2x(v[0])?;
            probe(t, y, 53)
        })),
        ("pixel_shuffle", vec![random(&[1, 8, 2, 3], 54)], Box::new(|t, v| {
            let y = t.pixel_shuffle(v[0], 2)?;
            probe(t, y, 55)
        })),
        ("modulate", vec![random(&[2, 3, 2, 2], 56), random(&[2, 3], 57), random(&[2, 3], 58)], Box::new(|t, v| {
            let y = t.modulate(v[0], v[1], v[2])?;
            probe(t, y, 59)
        })),
        ("gated_residual", vec![random(&[2, 3, 2, 2], 60), random(&[2, 3], 61), random(&[2, 3, 2, 2], 62)], Box::new(|t, v| {
            let y = t.gated_residual(v[0], v[1], v[2])?;
            probe(t, y, 63)
        })),
        ("embedding", vec![random(&[4, 3], 64)], Box::new(|t, v| {
            let y = t.embedding(v[0], &[2, 0, 2, 3])?;
            probe(t, y, 65)
        })),
        ("mse", vec![random(&[2, 5], 66), random(&[2, 5], 67)], Box::new(|t, v| t.mse(v[0], v[1]))),
    ];
    for (name, inputs, f) in cases {
        let report = gradcheck::check(&names(inputs.len()), &inputs, 20, 1e-5, 99, f).unwrap();
        assert!(report.passes(tol), "{name}: worst {:?}", report.worst());
    }
}

#[test]
fn ops_are_pure() {
    let x = random(&[2, 4, 6, 6], 70);
    let w = random(&[4, 4, 3, 3], 71);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        let y = t.conv3x3(xv, wv, None, 1).unwrap();
        let y = t.group_norm(y, 2, g, b, 1e-5).unwrap();
        let y = t.gelu(y);
        t.value(y).clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
