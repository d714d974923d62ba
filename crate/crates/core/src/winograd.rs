//! Winograd F(2×2, 3×3) convolution and multiplication accounting.
//!
//! A 2×2 output tile of a 3×3 convolution is computed from a 4×4 input tile
//! as `Aᵀ [(G g Gᵀ) ⊙ (Bᵀ d B)] A`: 16 elementwise multiplications instead
//! of the 36 a direct evaluation needs. Across channels the elementwise
//! stage becomes 16 independent GEMMs, one per transformed tile position.

use std::fmt;

use crate::error::{DicError, Result};
use crate::tensor::{Element, Tensor};

/// The constant transform matrices of F(2×2, 3×3).
pub struct WinogradTransforms;

impl WinogradTransforms {
    /// Filter transform, 4×3.
    pub const G: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.0, 1.0]];
    /// Input transform Bᵀ, 4×4.
    pub const BT: [[f64; 4]; 4] = [[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, -1.0, 1.0, 0.0], [0.0, 1.0, 0.0, -1.0]];
    /// Output transform Aᵀ, 2×4.
    pub const AT: [[f64; 4]; 2] = [[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]];
}

/// `G g Gᵀ` for a row-major 3×3 filter.
pub fn transform_filter<T: Element>(g: &[T]) -> [T; 16] {
    let half = T::from_f64(0.5);
    // G·g (4×3)
    let mut t = [T::ZERO; 12];
    for c in 0..3 {
        let (g0, g1, g2) = (g[c], g[3 + c], g[6 + c]);
        t[c] = g0;
        t[3 + c] = (g0 + g1 + g2) * half;
        t[6 + c] = (g0 - g1 + g2) * half;
        t[9 + c] = g2;
    }
    // (G·g)·Gᵀ (4×4)
    let mut u = [T::ZERO; 16];
    for r in 0..4 {
        let (a, b, c) = (t[3 * r], t[3 * r + 1], t[3 * r + 2]);
        u[4 * r] = a;
        u[4 * r + 1] = (a + b + c) * half;
        u[4 * r + 2] = (a - b + c) * half;
        u[4 * r + 3] = c;
    }
    u
}

/// `Bᵀ d B` for a row-major 4×4 input tile.
pub fn transform_input<T: Element>(d: &[T; 16]) -> [T; 16] {
    // Bᵀ·d
    let mut t = [T::ZERO; 16];
    for c in 0..4 {
        let (d0, d1, d2, d3) = (d[c], d[4 + c], d[8 + c], d[12 + c]);
        t[c] = d0 - d2;
        t[4 + c] = d1 + d2;
        t[8 + c] = d2 - d1;
        t[12 + c] = d1 - d3;
    }
    // (Bᵀ·d)·B
    let mut v = [T::ZERO; 16];
    for r in 0..4 {
        let (a, b, c, e) = (t[4 * r], t[4 * r + 1], t[4 * r + 2], t[4 * r + 3]);
        v[4 * r] = a - c;
        v[4 * r + 1] = b + c;
        v[4 * r + 2] = c - b;
        v[4 * r + 3] = b - e;
    }
    v
}

/// `Aᵀ m A`, mapping a 4×4 product tile to the 2×2 output tile.
pub fn transform_output<T: Element>(m: &[T; 16]) -> [T; 4] {
    // Aᵀ·m (2×4)
    let mut t = [T::ZERO; 8];
    for c in 0..4 {
        let (m0, m1, m2, m3) = (m[c], m[4 + c], m[8 + c], m[12 + c]);
        t[c] = m0 + m1 + m2;
        t[4 + c] = m1 - m2 - m3;
    }
    let mut y = [T::ZERO; 4];
    for r in 0..2 {
        let (a, b, c, e) = (t[4 * r], t[4 * r + 1], t[4 * r + 2], t[4 * r + 3]);
        y[2 * r] = a + b + c;
        y[2 * r + 1] = b - c - e;
    }
    y
}

/// Valid 3×3 correlation of one 4×4 tile through the Winograd transforms.
pub fn tile_conv<T: Element>(d: &[T; 16], g: &[T; 9]) -> [T; 4] {
    let u = transform_filter(g);
    let v = transform_input(d);
    let mut m = [T::ZERO; 16];
    for i in 0..16 {
        m[i] = u[i] * v[i];
    }
    transform_output(&m)
}

/// Transformed filter bank laid out as 16 `[cout, cin]` matrices.
#[derive(Clone, Debug)]
pub struct WinogradFilter<T> {
    u: Vec<T>,
    cout: usize,
    cin: usize,
}

impl<T: Element> WinogradFilter<T> {
    pub fn new(weight: &Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(DicError::shape("winograd_filter", format!("expected [cout, cin, 3, 3], got {ws:?}")));
        }
        let (cout, cin) = (ws[0], ws[1]);
        let mut u = vec![T::ZERO; 16 * cout * cin];
        for (oc_ic, g) in weight.data().chunks(9).enumerate() {
            let t = transform_filter(g);
            for (xi, &v) in t.iter().enumerate() {
                u[xi * cout * cin + oc_ic] = v;
            }
        }
        Ok(WinogradFilter { u, cout, cin })
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn cin(&self) -> usize {
        self.cin
    }
}

/// Stride-1, padding-1 3×3 convolution via F(2×2, 3×3). Odd extents are
/// handled by padding the tile grid and cropping the result.
pub fn winograd_conv3x3<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let filter = WinogradFilter::new(weight)?;
    winograd_conv3x3_with(x, &filter, bias)
}

pub fn winograd_conv3x3_with<T: Element>(
    x: &Tensor<T>,
    filter: &WinogradFilter<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = x.dims4("winograd_conv3x3")?;
    let cout = filter.cout;
    if cin != filter.cin {
        return Err(DicError::shape("winograd_conv3x3", format!("input has {cin} channels, filter expects {}", filter.cin)));
    }
    if h < 2 || w < 2 {
        return Err(DicError::shape("winograd_conv3x3", format!("spatial extent {h}×{w} below 2×2")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(DicError::shape("winograd_conv3x3", format!("bias {:?} for {cout} outputs", b.shape())));
        }
    }
    let (th, tw) = (h.div_ceil(2), w.div_ceil(2));
    let tiles = th * tw;
    let xd = x.data();
    let mut out = vec![T::ZERO; n * cout * h * w];
    let mut v = vec![T::ZERO; 16 * cin * tiles];
    let mut m = vec![T::ZERO; 16 * cout * tiles];
    for b in 0..n {
        for ci in 0..cin {
            let plane = &xd[(b * cin + ci) * h * w..][..h * w];
            for ty in 0..th {
                for tx in 0..tw {
                    let mut d = [T::ZERO; 16];
                    for dy in 0..4 {
                        let iy = (2 * ty + dy) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..4 {
                            let ix = (2 * tx + dx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                d[4 * dy + dx] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    let t = transform_input(&d);
                    let tile = ty * tw + tx;
                    for (xi, &val) in t.iter().enumerate() {
                        v[(xi * cin + ci) * tiles + tile] = val;
                    }
                }
            }
        }
        for xi in 0..16 {
            T::gemm(
                cout,
                cin,
                tiles,
                T::ONE,
                &filter.u[xi * cout * cin..(xi + 1) * cout * cin],
                cin as isize,
                1,
                &v[xi * cin * tiles..(xi + 1) * cin * tiles],
                tiles as isize,
                1,
                T::ZERO,
                &mut m[xi * cout * tiles..(xi + 1) * cout * tiles],
                tiles as isize,
                1,
            );
        }
        for co in 0..cout {
            let b0 = bias.map_or(T::ZERO, |bb| bb.data()[co]);
            let dst = &mut out[(b * cout + co) * h * w..][..h * w];
            for ty in 0..th {
                for tx in 0..tw {
                    let tile = ty * tw + tx;
                    let mut mt = [T::ZERO; 16];
                    for (xi, slot) in mt.iter_mut().enumerate() {
                        *slot = m[(xi * cout + co) * tiles + tile];
                    }
                    let y = transform_output(&mt);
                    for oy in 0..2 {
                        let yy = 2 * ty + oy;
                        if yy >= h {
                            continue;
                        }
                        for ox in 0..2 {
                            let xx = 2 * tx + ox;
                            if xx < w {
                                dst[yy * w + xx] = y[2 * oy + ox] + b0;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, w], out)
}

/// Reduced non-negative fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        fn gcd(a: u64, b: u64) -> u64 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Multiplications of one stride-1 3×3 layer, direct vs Winograd.
///
/// Only the elementwise-product stage is counted on the Winograd side; the
/// transforms are additions and constant scalings. Odd extents count the
/// padded tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultCount {
    pub direct_mults: u64,
    pub winograd_mults: u64,
}

impl MultCount {
    pub fn ratio(&self) -> Ratio {
        Ratio::new(self.winograd_mults, self.direct_mults)
    }

    /// Fraction of multiplications saved.
    pub fn saving(&self) -> Ratio {
        Ratio::new(self.direct_mults - self.winograd_mults, self.direct_mults)
    }
}

pub fn winograd_mult_count(h: usize, w: usize, cin: usize, cout: usize) -> MultCount {
    let cc = (cin * cout) as u64;
    MultCount {
        direct_mults: (h * w) as u64 * cc * 9,
        winograd_mults: (h.div_ceil(2) * w.div_ceil(2)) as u64 * cc * 16,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid_tile_conv(d: &[f64; 16], g: &[f64; 9]) -> [f64; 4] {
        let mut y = [0.0; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        y[2 * oy + ox] += d[4 * (oy + ky) + ox + kx] * g[3 * ky + kx];
                    }
                }
            }
        }
        y
    }

    #[test]
    fn transform_matrices_match_closed_forms() {
        // Check the hand-unrolled transforms against the matrix constants.
        let g: [f64; 9] = std::array::from_fn(|i| (i as f64 * 0.37).sin());
        let u = transform_filter(&g);
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += WinogradTransforms::G[r][i] * g[3 * i + j] * WinogradTransforms::G[c][j];
                    }
                }
                assert!((acc - u[4 * r + c]).abs() < 1e-15);
            }
        }
        let d: [f64; 16] = std::array::from_fn(|i| (i as f64 * 1.3).cos());
        let v = transform_input(&d);
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += WinogradTransforms::BT[r][i] * d[4 * i + j] * WinogradTransforms::BT[c][j];
                    }
                }
                assert!((acc - v[4 * r + c]).abs() < 1e-15);
            }
        }
        let y = transform_output(&d);
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += WinogradTransforms::AT[r][i] * d[4 * i + j] * WinogradTransforms::AT[c][j];
                    }
                }
                assert!((acc - y[2 * r + c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tile_identity_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d: [f64; 16] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let g: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let fast = tile_conv(&d, &g);
            let slow = valid_tile_conv(&d, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mult_count_small_layer() {
        let mc = winograd_mult_count(2, 2, 1, 1);
        assert_eq!(mc.direct_mults, 36);
        assert_eq!(mc.winograd_mults, 16);
        assert_eq!(mc.ratio(), Ratio::new(4, 9));
        assert_eq!(mc.saving(), Ratio::new(5, 9));
    }

    #[test]
    fn mult_ratio_is_channel_independent() {
        assert_eq!(winograd_mult_count(32, 32, 96, 96).ratio(), Ratio::new(4, 9));
        assert_eq!(winograd_mult_count(8, 16, 3, 1536).ratio(), Ratio::new(4, 9));
        // odd extents pay for padded tiles
        let odd = winograd_mult_count(3, 3, 1, 1);
        assert_eq!(odd.winograd_mults, 4 * 16);
        assert!(odd.ratio().to_f64() > 4.0 / 9.0);
    }

    #[test]
    fn ones_input_ones_kernel() {
        let x = Tensor::<f64>::full(vec![1, 1, 4, 4], 1.0);
        let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let y = winograd_conv3x3(&x, &k, None).unwrap();
        #[rustfmt::skip]
        let expect = [4., 6., 6., 4.,
                      6., 9., 9., 6.,
                      6., 9., 9., 6.,
                      4., 6., 6., 4.];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn dirac_kernel_is_identity_odd_sizes() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 5, 7], |i| (i as f64 * 0.71).sin());
        let mut k = Tensor::<f64>::zeros(vec![3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let y = winograd_conv3x3(&x, &k, None).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_tiny_and_mismatched_inputs() {
        let k = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(winograd_conv3x3(&Tensor::zeros(vec![1, 1, 1, 4]), &k, None).is_err());
        assert!(winograd_conv3x3(&Tensor::zeros(vec![1, 2, 4, 4]), &k, None).is_err());
    }
}
