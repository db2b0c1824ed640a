//! Raw forward/backward kernels on row-major slices. The tape and the
//! forward-only feature extractor both build on these.

use super::real::{gemm, Real};
use crate::error::{Error, Result};

/// Geometry of a 2D convolution with "same" padding over an NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        };
        if x_shape.len() != 4 || w_shape.len() != 4 || !(stride == 1 || stride == 2) {
            return Err(mismatch());
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin || kh != kw || kh % 2 == 0 || h == 0 || w == 0 {
            return Err(mismatch());
        }
        let k = kh;
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch());
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output-column range `[lo, hi)` whose input column `ox * stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let off = kj as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = (self.w as isize - off + s - 1) / s;
        let hi = hi_excl.clamp(0, self.wo as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw = g.out_spatial();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    for ox in lo..hi {
                        dst[ox] = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.out_spatial();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.out_spatial();
    let kdim = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * hw]
    };
    for s in 0..g.n {
        let xs = &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        let os = &mut out[s * g.cout * hw..(s + 1) * g.cout * hw];
        let colref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        gemm(
            g.cout,
            kdim,
            hw,
            weight,
            false,
            colref,
            false,
            T::zero(),
            os,
        );
        if let Some(b) = bias {
            for (co, row) in os.chunks_mut(hw).enumerate() {
                let bv = b[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; each is computed only when requested.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.out_spatial();
    let kdim = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_sz]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * kdim]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * hw }];
    let mut dcol = vec![
        T::zero();
        if g.is_pointwise() || !need_dx {
            0
        } else {
            kdim * hw
        }
    ];
    for s in 0..g.n {
        let gs = &grad_out[s * g.cout * hw..(s + 1) * g.cout * hw];
        if let Some(db) = db.as_mut() {
            for (co, row) in gs.chunks(hw).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            gemm(g.cout, hw, kdim, gs, false, colref, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                gemm(kdim, g.cout, hw, weight, true, gs, false, T::zero(), dxs);
            } else {
                gemm(
                    kdim,
                    g.cout,
                    hw,
                    weight,
                    true,
                    gs,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im_add(&dcol, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stable softmax over the middle axis of an `[outer, len, inner]` view.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xs, ys) in x.chunks(len).zip(y.chunks_mut(len)) {
            softmax_row(xs, ys);
        }
        return y;
    }
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner + i]);
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner + i] - m).fast_exp();
                y[base + j * inner + i] = e;
                z += e;
            }
            for j in 0..len {
                y[base + j * inner + i] /= z;
            }
        }
    }
    y
}

pub fn softmax_row<T: Real>(x: &[T], y: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = (xi - m).fast_exp();
        z += *yi;
    }
    let inv = T::one() / z;
    y.iter_mut().for_each(|v| *v *= inv);
}

pub fn softmax_backward<T: Real>(
    y: &[T],
    gy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for j in 0..len {
                let idx = base + j * inner + i;
                dot += y[idx] * gy[idx];
            }
            for j in 0..len {
                let idx = base + j * inner + i;
                dx[idx] = y[idx] * (gy[idx] - dot);
            }
        }
    }
    dx
}

/// Group normalization over `[n, c, s]`; returns `(y, xhat, rstd)` with `rstd` per `(n, group)`.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = cpg * s;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    for b in 0..n {
        for grp in 0..groups {
            let start = (b * c + grp * cpg) * s;
            let xs = &x[start..start + m];
            // Moments accumulate in f64 so float32 training matches the f64 path closely.
            let mean = xs.iter().map(|&v| v.to_f64()).sum::<f64>() / m as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[b * groups + grp] = T::from_f64(r);
            let (mean_t, r_t) = (T::from_f64(mean), T::from_f64(r));
            for ci in 0..cpg {
                let ch = grp * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + ci * s;
                for i in off..off + s {
                    let xh = (x[i] - mean_t) * r_t;
                    xhat[i] = xh;
                    y[i] = xh * ga + be;
                }
            }
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Real>(
    gy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = cpg * s;
    let mut dx = vec![T::zero(); gy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for grp in 0..groups {
            let start = (b * c + grp * cpg) * s;
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ci in 0..cpg {
                let ch = grp * cpg + ci;
                let off = start + ci * s;
                let mut dg = T::zero();
                let mut dbe = T::zero();
                for i in off..off + s {
                    dg += gy[i] * xhat[i];
                    dbe += gy[i];
                    let d = (gy[i] * gamma[ch]).to_f64();
                    sum_d += d;
                    sum_dx += d * xhat[i].to_f64();
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbe;
            }
            let r = rstd[b * groups + grp];
            let mean_d = T::from_f64(sum_d / m as f64);
            let mean_dx = T::from_f64(sum_dx / m as f64);
            for ci in 0..cpg {
                let ch = grp * cpg + ci;
                let off = start + ci * s;
                for i in off..off + s {
                    let d = gy[i] * gamma[ch];
                    dx[i] = r * (d - mean_d - xhat[i] * mean_dx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbour x2 upsampling of `[nc, h, w]` planes.
pub fn upsample2x_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); nc * h2 * w2];
    for p in 0..nc {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            let src = &xp[(i / 2) * w..(i / 2 + 1) * w];
            let dst = &mut yp[i * w2..(i + 1) * w2];
            for j in 0..w2 {
                dst[j] = src[j / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(gy: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let gp = &gy[p * h2 * w2..(p + 1) * h2 * w2];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dp[(i / 2) * w + j / 2] += gp[i * w2 + j];
            }
        }
    }
    dx
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// `out[idx] = x[permuted idx]` with `out.shape[i] = shape[axes[i]]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 {
        return (x.to_vec(), out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    while out.len() < total {
        for j in 0..last_len {
            out.push(x[src + j * last_stride]);
        }
        // Advance the multi-index over all but the last axis.
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Maximum with eight independent lanes; a plain fold is a serial dependency chain.
#[inline(always)]
fn max_lanes<T: Real>(x: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let xc = x.chunks_exact(8);
    let rest = xc
        .remainder()
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    for a in xc {
        for l in 0..8 {
            acc[l] = if a[l] > acc[l] { a[l] } else { acc[l] };
        }
    }
    acc.iter().copied().fold(rest, T::max)
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline(always)]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for (&a, &b) in xr.iter().zip(yr) {
        total += a * b;
    }
    total
}

#[inline(always)]
fn sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let rest = xc.remainder().iter().copied().sum::<T>();
    for a in xc {
        for l in 0..8 {
            acc[l] += a[l];
        }
    }
    acc.iter().copied().sum::<T>() + rest
}

/// `[rows, cols] -> [cols, rows]`.
#[inline(always)]
fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Runs `$body` with AVX2/FMA code generation when the CPU has it. The generic helpers
/// it calls are `inline(always)` so they are compiled under the same features. Results
/// are identical on both paths: reductions use a fixed order and nothing is contracted.
macro_rules! dispatch_avx2 {
    ($name:ident, $impl:ident, ($($arg:ident : $ty:ty),*) -> $ret:ty) => {
        pub fn $name<T: Real>($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<T: Real>($($arg: $ty),*) -> $ret {
                    $impl($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were just detected.
                    return unsafe { wide($($arg),*) };
                }
            }
            $impl($($arg),*)
        }
    };
}

const LANES: usize = 8;
const ROWS: usize = 4;

/// `out[r][j] = sum_c (a[r][c] * scale) * mt[c][j]` for `R` rows of `a` (`[R, m]`) against
/// `mt` (`[m, n]`). Accumulates over `c` in order for every `j`.
#[inline(always)]
fn rows_times<T: Real, const R: usize>(
    a: &[T],
    m: usize,
    mt: &[T],
    n: usize,
    scale: T,
    out: &mut [T],
) {
    assert!(a.len() >= R * m && mt.len() >= m * n && out.len() >= R * n);
    if m == LANES && R == 1 {
        return rows_times_8(a, mt, n, scale, out);
    }
    let full = n / LANES * LANES;
    let mut aq = [[T::zero(); LANES]; R];
    let mut c0 = 0;
    // The scaled coefficients are staged `LANES` at a time so they stay in registers.
    let mut first = true;
    while c0 < m {
        let cw = (m - c0).min(LANES);
        for r in 0..R {
            for c in 0..cw {
                aq[r][c] = a[r * m + c0 + c] * scale;
            }
        }
        for j0 in (0..full).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; R];
            if !first {
                for r in 0..R {
                    acc[r].copy_from_slice(&out[r * n + j0..r * n + j0 + LANES]);
                }
            }
            for c in 0..cw {
                // SAFETY: c0 + c < m and j0 + LANES <= n, checked by the assert above.
                let kv = unsafe { mt.get_unchecked((c0 + c) * n + j0..(c0 + c) * n + j0 + LANES) };
                for r in 0..R {
                    let qs = aq[r][c];
                    for l in 0..LANES {
                        acc[r][l] += qs * kv[l];
                    }
                }
            }
            for r in 0..R {
                out[r * n + j0..r * n + j0 + LANES].copy_from_slice(&acc[r]);
            }
        }
        for j in full..n {
            for r in 0..R {
                let mut x = if first { T::zero() } else { out[r * n + j] };
                for c in 0..cw {
                    x += aq[r][c] * mt[(c0 + c) * n + j];
                }
                out[r * n + j] = x;
            }
        }
        first = false;
        c0 += cw;
    }
}

/// [`rows_times`] for one row of width eight, with the coefficients held in registers.
#[inline(always)]
fn rows_times_8<T: Real>(a: &[T], mt: &[T], n: usize, scale: T, out: &mut [T]) {
    let mut aq = [T::zero(); LANES];
    for c in 0..LANES {
        aq[c] = a[c] * scale;
    }
    let full = n / LANES * LANES;
    let rows: [&[T]; LANES] = std::array::from_fn(|c| &mt[c * n..(c + 1) * n]);
    for j0 in (0..full).step_by(LANES) {
        let mut acc = [T::zero(); LANES];
        for c in 0..LANES {
            let kv = &rows[c][j0..j0 + LANES];
            for l in 0..LANES {
                acc[l] += aq[c] * kv[l];
            }
        }
        out[j0..j0 + LANES].copy_from_slice(&acc);
    }
    for j in full..n {
        let mut x = T::zero();
        for c in 0..LANES {
            x += aq[c] * rows[c][j];
        }
        out[j] = x;
    }
}

/// `out[r][e] = dot(p[r], mt[e])` for `R` rows of `p` (`[R, n]`) and `mt` (`[k, n]`).
#[inline(always)]
fn rows_dot<T: Real, const R: usize>(p: &[T], n: usize, mt: &[T], k: usize, out: &mut [T]) {
    assert!(p.len() >= R * n && mt.len() >= k * n && out.len() >= R * k);
    let full = n / LANES * LANES;
    for e in 0..k {
        let row = &mt[e * n..(e + 1) * n];
        let mut acc = [[T::zero(); LANES]; R];
        for j0 in (0..full).step_by(LANES) {
            let v = &row[j0..j0 + LANES];
            for r in 0..R {
                // SAFETY: r < R and j0 + LANES <= n, checked by the assert above.
                let pr = unsafe { p.get_unchecked(r * n + j0..r * n + j0 + LANES) };
                for l in 0..LANES {
                    acc[r][l] += pr[l] * v[l];
                }
            }
        }
        for r in 0..R {
            let mut total = acc[r].iter().copied().sum::<T>();
            for j in full..n {
                total += p[r * n + j] * row[j];
            }
            out[r * k + e] = total;
        }
    }
}

/// `acc[c][j] += sum_r coef[r][c] * p[r][j]` for `R` rows; `coef` is `[R, m]`, `p` is
/// `[R, n]` and `acc` is `[m, n]`.
#[inline(always)]
fn rows_outer_acc<T: Real, const R: usize>(coef: &[T], m: usize, p: &[T], n: usize, acc: &mut [T]) {
    for c in 0..m {
        let mut w = [T::zero(); R];
        for r in 0..R {
            w[r] = coef[r * m + c];
        }
        let dst = &mut acc[c * n..(c + 1) * n];
        for (j, x) in dst.iter_mut().enumerate() {
            let mut s = *x;
            for r in 0..R {
                s += w[r] * p[r * n + j];
            }
            *x = s;
        }
    }
}

/// Turns the scores in `p` (`R` rows of length `n`) into softmax weights, returning
/// `(max, 1/sum)` for each row.
#[inline(always)]
fn softmax_rows<T: Real>(p: &mut [T], n: usize, stats: &mut [T]) {
    for (row, st) in p.chunks_exact_mut(n).zip(stats.chunks_exact_mut(2)) {
        let m = max_lanes(row);
        row.iter_mut().for_each(|s| *s = (*s - m).fast_exp());
        let inv = T::one() / sum(row);
        row.iter_mut().for_each(|s| *s *= inv);
        st[0] = m;
        st[1] = inv;
    }
}

/// Recomputes softmax weights from saved statistics.
#[inline(always)]
fn reweight_rows<T: Real>(p: &mut [T], n: usize, stats: &[T]) {
    for (row, st) in p.chunks_exact_mut(n).zip(stats.chunks_exact(2)) {
        let (m, inv) = (st[0], st[1]);
        row.iter_mut().for_each(|s| *s = (*s - m).fast_exp() * inv);
    }
}

/// Row blocks `(start, len)` covering `0..lq`: blocks of [`ROWS`], then single rows.
fn row_blocks(lq: usize) -> impl Iterator<Item = (usize, usize)> {
    let full = lq / ROWS * ROWS;
    (0..full)
        .step_by(ROWS)
        .map(|i| (i, ROWS))
        .chain((full..lq).map(|i| (i, 1)))
}

#[inline(always)]
fn attention_forward_impl<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: [usize; 5],
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let [b, lq, lk, d, dv] = dims;
    let mut stats = vec![T::zero(); 2 * b * lq];
    let mut out = vec![T::zero(); b * lq * dv];
    let mut p = vec![T::zero(); ROWS * lk];
    for bi in 0..b {
        let kt = transpose(&k[bi * lk * d..(bi + 1) * lk * d], lk, d);
        let vt = transpose(&v[bi * lk * dv..(bi + 1) * lk * dv], lk, dv);
        for (i, nr) in row_blocks(lq) {
            let r = bi * lq + i;
            let qs = &q[r * d..(r + nr) * d];
            let p = &mut p[..nr * lk];
            let o = &mut out[r * dv..(r + nr) * dv];
            if nr == ROWS {
                rows_times::<T, ROWS>(qs, d, &kt, lk, scale, p);
            } else {
                rows_times::<T, 1>(qs, d, &kt, lk, scale, p);
            }
            softmax_rows(p, lk, &mut stats[2 * r..2 * (r + nr)]);
            if nr == ROWS {
                rows_dot::<T, ROWS>(p, lk, &vt, dv, o);
            } else {
                rows_dot::<T, 1>(p, lk, &vt, dv, o);
            }
        }
    }
    (out, stats)
}

dispatch_avx2!(attention_forward_dims, attention_forward_impl,
    (q: &[T], k: &[T], v: &[T], dims: [usize; 5], scale: T) -> (Vec<T>, Vec<T>));

/// Fused scaled dot-product attention over `[b, lq, d] x [b, lk, d] x [b, lk, dv]`,
/// a few query rows at a time. Returns the output and per-row softmax statistics
/// `(max, 1/sum)`, from which [`attention_backward`] recomputes the weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    attention_forward_dims(q, k, v, [b, lq, lk, d, dv], scale)
}

/// Softmax weights `[b, lq, lk]` for the statistics returned by [`attention_forward`].
pub fn attention_weights<T: Real>(
    q: &[T],
    k: &[T],
    stats: &[T],
    dims: [usize; 5],
    scale: T,
) -> Vec<T> {
    let [b, lq, lk, d, _] = dims;
    let mut probs = vec![T::zero(); b * lq * lk];
    for bi in 0..b {
        let kt = transpose(&k[bi * lk * d..(bi + 1) * lk * d], lk, d);
        for i in 0..lq {
            let r = bi * lq + i;
            let p = &mut probs[r * lk..(r + 1) * lk];
            rows_times::<T, 1>(&q[r * d..(r + 1) * d], d, &kt, lk, scale, p);
            reweight_rows(p, lk, &stats[2 * r..2 * r + 2]);
        }
    }
    probs
}

/// Backward for one block of `R` query rows starting at global row `r`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_rows<T: Real, const R: usize>(
    qs: &[T],
    g: &[T],
    stats: &[T],
    kt: &[T],
    vt: &[T],
    dims: [usize; 3],
    scale: T,
    p: &mut [T],
    ds: &mut [T],
    dq: &mut [T],
    dkt: &mut [T],
    dvt: &mut [T],
) {
    let [lk, d, dv] = dims;
    rows_times::<T, R>(qs, d, kt, lk, scale, p);
    reweight_rows(p, lk, stats);
    rows_outer_acc::<T, R>(g, dv, p, lk, dvt);
    rows_times::<T, R>(g, dv, vt, lk, T::one(), ds);
    for (dsr, pr) in ds.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
        let pd = dot(pr, dsr);
        for (x, &pj) in dsr.iter_mut().zip(pr) {
            *x = pj * (*x - pd) * scale;
        }
    }
    rows_dot::<T, R>(ds, lk, kt, d, dq);
    rows_outer_acc::<T, R>(qs, d, ds, lk, dkt);
}

#[inline(always)]
fn attention_backward_impl<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    stats: &[T],
    gout: &[T],
    dims: [usize; 5],
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, lq, lk, d, dv] = dims;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dvv = vec![T::zero(); v.len()];
    let mut p = vec![T::zero(); ROWS * lk];
    let mut ds = vec![T::zero(); ROWS * lk];
    for bi in 0..b {
        let kt = transpose(&k[bi * lk * d..(bi + 1) * lk * d], lk, d);
        let vt = transpose(&v[bi * lk * dv..(bi + 1) * lk * dv], lk, dv);
        let mut dkt = vec![T::zero(); lk * d];
        let mut dvt = vec![T::zero(); lk * dv];
        for (i, nr) in row_blocks(lq) {
            let r = bi * lq + i;
            let args = (
                &q[r * d..(r + nr) * d],
                &gout[r * dv..(r + nr) * dv],
                &stats[2 * r..2 * (r + nr)],
            );
            let (p, ds) = (&mut p[..nr * lk], &mut ds[..nr * lk]);
            let dqs = &mut dq[r * d..(r + nr) * d];
            if nr == ROWS {
                backward_rows::<T, ROWS>(
                    args.0,
                    args.1,
                    args.2,
                    &kt,
                    &vt,
                    [lk, d, dv],
                    scale,
                    p,
                    ds,
                    dqs,
                    &mut dkt,
                    &mut dvt,
                );
            } else {
                backward_rows::<T, 1>(
                    args.0,
                    args.1,
                    args.2,
                    &kt,
                    &vt,
                    [lk, d, dv],
                    scale,
                    p,
                    ds,
                    dqs,
                    &mut dkt,
                    &mut dvt,
                );
            }
        }
        dk[bi * lk * d..(bi + 1) * lk * d].copy_from_slice(&transpose(&dkt, d, lk));
        dvv[bi * lk * dv..(bi + 1) * lk * dv].copy_from_slice(&transpose(&dvt, dv, lk));
    }
    (dq, dk, dvv)
}

dispatch_avx2!(attention_backward_dims, attention_backward_impl,
    (q: &[T], k: &[T], v: &[T], stats: &[T], gout: &[T], dims: [usize; 5], scale: T) -> (Vec<T>, Vec<T>, Vec<T>));

/// Returns `(dq, dk, dv)` given the statistics saved by [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    stats: &[T],
    gout: &[T],
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    attention_backward_dims(q, k, v, stats, gout, [b, lq, lk, d, dv], scale)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).fast_exp())
    } else {
        let e = x.fast_exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}
