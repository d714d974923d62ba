//! Slice-level forward and backward kernels.
//!
//! Everything here is single-threaded and sums in a fixed order, so results
//! are bitwise reproducible for identical inputs.

use super::Element;

/// Geometry of a 2-D convolution with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Multiply-accumulates of the full convolution (bias excluded).
    pub fn macs(&self) -> u64 {
        let (ho, wo) = self.out_hw();
        (self.n * self.cout * ho * wo * self.cin * self.k * self.k) as u64
    }
}

/// Zero-padded channels-last copy of one `[cin, h, w]` image.
fn to_padded_hwc<T: Element>(x: &[T], g: &ConvGeom, buf: &mut [T]) {
    let wp = g.w + 2 * g.pad;
    buf.fill(T::ZERO);
    for ci in 0..g.cin {
        for y in 0..g.h {
            let src = &x[(ci * g.h + y) * g.w..][..g.w];
            let base = (y + g.pad) * wp + g.pad;
            for (xx, &v) in src.iter().enumerate() {
                buf[(base + xx) * g.cin + ci] = v;
            }
        }
    }
}

/// Adds the interior of a padded channels-last gradient into a `[cin, h, w]` image.
fn add_from_padded_hwc<T: Element>(buf: &[T], g: &ConvGeom, dx: &mut [T]) {
    let wp = g.w + 2 * g.pad;
    for ci in 0..g.cin {
        for y in 0..g.h {
            let dst = &mut dx[(ci * g.h + y) * g.w..][..g.w];
            let base = (y + g.pad) * wp + g.pad;
            for (xx, d) in dst.iter_mut().enumerate() {
                *d += buf[(base + xx) * g.cin + ci];
            }
        }
    }
}

/// Zero-padded `[cin, h + 2p, w + 2p]` copy of one image.
fn to_padded_chw<T: Element>(x: &[T], g: &ConvGeom, buf: &mut [T]) {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    buf.fill(T::ZERO);
    for ci in 0..g.cin {
        for y in 0..g.h {
            let dst = &mut buf[(ci * hp + y + g.pad) * wp + g.pad..][..g.w];
            dst.copy_from_slice(&x[(ci * g.h + y) * g.w..][..g.w]);
        }
    }
}

/// Channel-major unfold: row `(ci, ky, kx)` holds that tap for every output
/// pixel. Rows are `ld` apart so several images can sit side by side.
fn im2col<T: Element>(xp: &[T], g: &ConvGeom, col: &mut [T], ld: usize) {
    let (ho, wo) = g.out_hw();
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * ld..][..ho * wo];
                for oy in 0..ho {
                    let src = &xp[(ci * hp + oy * g.stride + ky) * wp + kx..];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[..wo]);
                    } else {
                        dst.iter_mut().zip(src.iter().step_by(g.stride)).for_each(|(d, &v)| *d = v);
                    }
                }
            }
        }
    }
}

/// One row of `(ky, kx, ci)` taps per output pixel. Each `ky` is one contiguous copy.
fn im2row<T: Element>(xp: &[T], g: &ConvGeom, rows: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let wp = g.w + 2 * g.pad;
    let span = g.k * g.cin;
    let kdim = g.k * span;
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut rows[(oy * wo + ox) * kdim..][..kdim];
            for ky in 0..g.k {
                let off = ((oy * g.stride + ky) * wp + ox * g.stride) * g.cin;
                dst[ky * span..(ky + 1) * span].copy_from_slice(&xp[off..off + span]);
            }
        }
    }
}

fn row2im_add<T: Element>(rows: &[T], g: &ConvGeom, dxp: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let wp = g.w + 2 * g.pad;
    let span = g.k * g.cin;
    let kdim = g.k * span;
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &rows[(oy * wo + ox) * kdim..][..kdim];
            for ky in 0..g.k {
                let off = ((oy * g.stride + ky) * wp + ox * g.stride) * g.cin;
                for (d, &v) in dxp[off..off + span].iter_mut().zip(&src[ky * span..(ky + 1) * span]) {
                    *d += v;
                }
            }
        }
    }
}

/// `[cout, cin, k, k]` → `[cout, k, k, cin]`, matching the `im2row` tap order.
fn weight_to_taps<T: Element>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.k * g.k;
    let mut out = vec![T::ZERO; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                out[(co * kk + t) * g.cin + ci] = w[(co * g.cin + ci) * kk + t];
            }
        }
    }
    out
}

fn taps_to_weight<T: Element>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.k * g.k;
    let mut out = vec![T::ZERO; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                out[(co * g.cin + ci) * kk + t] = w[(co * kk + t) * g.cin + ci];
            }
        }
    }
    out
}

/// Batch items per GEMM, keeping the unfolded buffer around 4M elements.
fn batch_chunk(rows: usize, plane: usize, n: usize) -> usize {
    ((4 << 20) / (rows * plane).max(1)).clamp(1, n.max(1))
}

/// Cross-correlation with zero padding. `weight` is `[cout, cin, k, k]`.
///
/// Batch items are unfolded side by side so each chunk is a single GEMM. The
/// backward pass unfolds pixel-major instead, which suits its GEMM shapes.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kdim = g.cin * g.k * g.k;
    let in_plane = g.cin * g.h * g.w;
    let mut out = vec![T::ZERO; g.n * g.cout * plane];
    let chunk = batch_chunk(kdim.max(g.cout), plane, g.n);
    let mut xp = vec![T::ZERO; (g.h + 2 * g.pad) * (g.w + 2 * g.pad) * g.cin];
    let mut col = vec![T::ZERO; kdim * plane * chunk];
    let mut tmp = vec![T::ZERO; g.cout * plane * chunk];
    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let ld = nb * plane;
        for i in 0..nb {
            let b = b0 + i;
            to_padded_chw(&x[b * in_plane..(b + 1) * in_plane], g, &mut xp);
            im2col(&xp, g, &mut col[i * plane..], ld);
        }
        // tmpᵀ = colᵀ · wᵀ; the kernel packs fastest with the long pixel axis contiguous.
        T::gemm(ld, kdim, g.cout, T::ONE, &col, 1, ld as isize, weight, 1, kdim as isize, T::ZERO, &mut tmp, 1, ld as isize);
        for i in 0..nb {
            let ob = &mut out[(b0 + i) * g.cout * plane..(b0 + i + 1) * g.cout * plane];
            for (co, dst) in ob.chunks_mut(plane).enumerate() {
                let src = &tmp[co * ld + i * plane..][..plane];
                match bias {
                    Some(bias) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bias[co]),
                    None => dst.copy_from_slice(src),
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when not needed.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kdim = g.cin * g.k * g.k;
    let in_plane = g.cin * g.h * g.w;
    let taps = weight_to_taps(weight, g);
    let mut dx = need_dx.then(|| vec![T::ZERO; g.n * in_plane]);
    let mut dtaps = vec![T::ZERO; g.cout * kdim];
    let mut db = vec![T::ZERO; g.cout];
    let chunk = batch_chunk(kdim.max(g.cout), plane, g.n);
    let mut xp = vec![T::ZERO; (g.h + 2 * g.pad) * (g.w + 2 * g.pad) * g.cin];
    let mut rows = vec![T::ZERO; kdim * plane * chunk];
    let mut dyt = vec![T::ZERO; g.cout * plane * chunk];
    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let ld = nb * plane;
        for i in 0..nb {
            let b = b0 + i;
            let dyb = &dy[b * g.cout * plane..(b + 1) * g.cout * plane];
            for (co, src) in dyb.chunks(plane).enumerate() {
                db[co] += src.iter().copied().sum::<T>();
                dyt[co * ld + i * plane..][..plane].copy_from_slice(src);
            }
            to_padded_hwc(&x[b * in_plane..(b + 1) * in_plane], g, &mut xp);
            im2row(&xp, g, &mut rows[i * plane * kdim..]);
        }
        // dtaps += dy (cout × ld) · rows (ld × kdim)
        T::gemm(g.cout, ld, kdim, T::ONE, &dyt, ld as isize, 1, &rows, kdim as isize, 1, T::ONE, &mut dtaps, kdim as isize, 1);
        if let Some(dx) = dx.as_mut() {
            // drows = dyᵀ (ld × cout) · taps (cout × kdim), reusing `rows`.
            T::gemm(ld, g.cout, kdim, T::ONE, &dyt, 1, ld as isize, &taps, kdim as isize, 1, T::ZERO, &mut rows, kdim as isize, 1);
            for i in 0..nb {
                let b = b0 + i;
                xp.fill(T::ZERO);
                row2im_add(&rows[i * plane * kdim..], g, &mut xp);
                add_from_padded_hwc(&xp, g, &mut dx[b * in_plane..(b + 1) * in_plane]);
            }
        }
    }
    (dx, taps_to_weight(&dtaps, g), db)
}

/// Row-wise affine map: `x[m, din] · wᵀ + b` with `w` stored `[dout, din]`.
pub fn linear_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, m: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::ONE } else { T::ZERO };
    T::gemm(m, din, dout, T::ONE, x, din as isize, 1, w, 1, din as isize, beta, &mut out, dout as isize, 1);
    out
}

pub fn linear_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    m: usize,
    din: usize,
    dout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; m * din];
    T::gemm(m, dout, din, T::ONE, dy, dout as isize, 1, w, din as isize, 1, T::ZERO, &mut dx, din as isize, 1);
    let mut dw = vec![T::ZERO; dout * din];
    T::gemm(dout, m, din, T::ONE, dy, 1, dout as isize, x, din as isize, 1, T::ZERO, &mut dw, din as isize, 1);
    let mut db = vec![T::ZERO; dout];
    for row in dy.chunks(dout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

/// Per-(sample, group) statistics saved by [`group_norm_forward`].
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let m = cpg * hw;
    let mut out = vec![T::ZERO; x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cpg) * hw;
            let seg = &x[off..off + m];
            let mean = seg.iter().map(|v| v.to_f64()).sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let (mean_t, rstd_t) = (T::from_f64(mean), T::from_f64(rstd));
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let base = off + ci * hw;
                for i in base..base + hw {
                    out[i] = (x[i] - mean_t) * rstd_t * ga + be;
                }
            }
            stats.mean.push(mean_t);
            stats.rstd.push(rstd_t);
        }
    }
    (out, stats)
}

pub fn group_norm_backward<T: Element>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let m = (cpg * hw) as f64;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for b in 0..n {
        for gi in 0..groups {
            let si = b * groups + gi;
            let (mean, rstd) = (stats.mean[si], stats.rstd[si]);
            let off = (b * c + gi * cpg) * hw;
            // mean of dxhat and of dxhat·xhat over the group
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let base = off + ci * hw;
                let mut dg = T::ZERO;
                let mut db = T::ZERO;
                for i in base..base + hw {
                    let xhat = (x[i] - mean) * rstd;
                    dg += dy[i] * xhat;
                    db += dy[i];
                    let dxhat = (dy[i] * gamma[ch]).to_f64();
                    s1 += dxhat;
                    s2 += dxhat * xhat.to_f64();
                }
                dgamma[ch] += dg;
                dbeta[ch] += db;
            }
            let (m1, m2) = (T::from_f64(s1 / m), T::from_f64(s2 / m));
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let base = off + ci * hw;
                for i in base..base + hw {
                    let xhat = (x[i] - mean) * rstd;
                    dx[i] = rstd * (dy[i] * gamma[ch] - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF through `erf`.
pub fn normal_cdf<T: Element>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Element>(x: T) -> T {
    x * normal_cdf(x)
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

/// Channel concatenation of two NCHW buffers with equal N, H, W.
pub fn concat_channels<T: Element>(a: &[T], ca: usize, b: &[T], cb: usize, n: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}

pub fn split_channels<T: Element>(d: &[T], ca: usize, cb: usize, n: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut da = Vec::with_capacity(n * ca * hw);
    let mut db = Vec::with_capacity(n * cb * hw);
    let stride = (ca + cb) * hw;
    for i in 0..n {
        da.extend_from_slice(&d[i * stride..i * stride + ca * hw]);
        db.extend_from_slice(&d[i * stride + ca * hw..(i + 1) * stride]);
    }
    (da, db)
}

/// Nearest-neighbour ×2 upsampling over `planes` independent H×W planes.
pub fn upsample_nearest2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of nearest upsampling: 2×2 block sums.
pub fn upsample_nearest2x_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2; `h` and `w` are the input extents.
pub fn avg_pool2x2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[p * ho * wo + y * wo + xx] = s * quarter;
            }
        }
    }
    out
}

/// Depth-to-space: `[n, c·r², h, w]` → `[n, c, h·r, w·r]`.
pub fn pixel_shuffle<T: Element>(x: &[T], [n, c, h, w]: [usize; 4], r: usize) -> Vec<T> {
    let co = c / (r * r);
    let mut out = vec![T::ZERO; x.len()];
    let (ho, wo) = (h * r, w * r);
    for b in 0..n {
        for oc in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let ic = oc * r * r + (y % r) * r + xx % r;
                    out[((b * co + oc) * ho + y) * wo + xx] = x[((b * c + ic) * h + y / r) * w + xx / r];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pixel_shuffle`]; `dims` are the shuffle's input extents.
pub fn pixel_shuffle_backward<T: Element>(dy: &[T], [n, c, h, w]: [usize; 4], r: usize) -> Vec<T> {
    let co = c / (r * r);
    let mut dx = vec![T::ZERO; dy.len()];
    let (ho, wo) = (h * r, w * r);
    for b in 0..n {
        for oc in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let ic = oc * r * r + (y % r) * r + xx % r;
                    dx[((b * c + ic) * h + y / r) * w + xx / r] = dy[((b * co + oc) * ho + y) * wo + xx];
                }
            }
        }
    }
    dx
}
