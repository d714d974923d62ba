use dic_core::winograd::{winograd_conv3x3, winograd_mult_count, Ratio};
use dic_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-padded stride-1 cross-correlation, straight loops.
fn oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let mut out = vec![0.0; n * cout * h * wd];
    for b_ in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b_ * cin + c) * h + iy as usize) * wd + ix as usize] * w.data()[((o * cin + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((b_ * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, wd], out).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn all_ones_four_by_four() {
    let x = Tensor::full(vec![1, 1, 4, 4], 1.0);
    let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let y = winograd_conv3x3(&x, &w, None).unwrap();
    #[rustfmt::skip]
    let expect = [4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0];
    assert_eq!(y.data(), &expect);
}

#[test]
fn one_by_four_by_eight_matches_oracle() {
    let x = random(&[1, 4, 8, 8], 1);
    let w = random(&[4, 4, 3, 3], 2);
    let b = random(&[4], 3);
    assert!(max_diff(&winograd_conv3x3(&x, &w, Some(&b)).unwrap(), &oracle(&x, &w, Some(&b))) < 1e-10);
}

#[test]
fn single_precision_within_1e4() {
    let x = random(&[2, 8, 10, 12], 4);
    let w = random(&[6, 8, 3, 3], 5);
    let want = oracle(&x, &w, None);
    let y = winograd_conv3x3(&x.cast::<f32>(), &w.cast::<f32>(), None).unwrap();
    let diff = y.data().iter().zip(want.data()).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn mult_counts() {
    let one = winograd_mult_count(2, 2, 1, 1);
    assert_eq!((one.direct_mults, one.winograd_mults), (36, 16));
    assert_eq!(winograd_mult_count(32, 32, 64, 128).ratio(), Ratio::new(4, 9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn matches_oracle_on_random_shapes(n in 1usize..3, cin in 1usize..6, cout in 1usize..6, h in 2usize..11, w in 2usize..11, seed in any::<u64>()) {
        let x = random(&[n, cin, h, w], seed);
        let k = random(&[cout, cin, 3, 3], seed.wrapping_add(1));
        let b = random(&[cout], seed.wrapping_add(2));
        prop_assert!(max_diff(&winograd_conv3x3(&x, &k, Some(&b)).unwrap(), &oracle(&x, &k, Some(&b))) < 1e-10);
    }

    #[test]
    fn even_maps_save_five_ninths(th in 1usize..40, tw in 1usize..40, cin in 1usize..300, cout in 1usize..300) {
        prop_assert_eq!(winograd_mult_count(2 * th, 2 * tw, cin, cout).saving(), Ratio::new(5, 9));
    }
}
