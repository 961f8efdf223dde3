//! Raw (non-differentiable) kernels behind the autograd ops.
//!
//! Convolution is expressed as three bilinear maps over the same geometry:
//! the forward correlation `y = conv(x, w)`, its input adjoint
//! `x = conv_input(y, w)` (a transposed convolution) and its weight adjoint
//! `w = conv_weight(x, y)`. Each map's derivatives are the other two, which is
//! what makes second-order gradients through convolutions work.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Upper bound on im2col scratch elements; outputs are processed in row bands.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial size on the correlation-input side.
    pub in_h: usize,
    pub in_w: usize,
    /// Spatial size on the correlation-output side.
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::TooSmall {
                got_h: in_h,
                got_w: in_w,
                min_h: k.saturating_sub(2 * pad).max(1),
                min_w: k.saturating_sub(2 * pad).max(1),
            });
        }
        Ok(ConvGeom {
            kh: k,
            kw: k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution producing `out_h × out_w` from an
    /// input of `in_h × in_w` (the roles of in/out swap relative to [`ConvGeom::new`]).
    pub fn transposed(in_h: usize, in_w: usize, out_h: usize, out_w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let g = ConvGeom::new(out_h, out_w, k, stride, pad)?;
        if g.out_h != in_h || g.out_w != in_w {
            return Err(Error::InvalidShape {
                op: "conv_transpose",
                reason: alloc::format!("{in_h}x{in_w} cannot be upsampled to {out_h}x{out_w} with k={k} s={stride} p={pad}"),
            });
        }
        Ok(g)
    }

    fn k(&self, cin: usize) -> usize {
        cin * self.kh * self.kw
    }

    fn band_rows(&self, cin: usize) -> usize {
        let per_row = self.k(cin) * self.out_w;
        (COL_BUDGET / per_row.max(1)).clamp(1, self.out_h)
    }
}

fn im2col<T: Real>(x: &[T], cin: usize, g: &ConvGeom, r0: usize, r1: usize, cols: &mut [T]) {
    let p = (r1 - r0) * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut i = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        for v in &mut dst[i..i + g.out_w] {
                            *v = T::zero();
                        }
                        i += g.out_w;
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[i] = if ix >= 0 && ix < g.in_w as isize { src[ix as usize] } else { T::zero() };
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], cin: usize, g: &ConvGeom, r0: usize, r1: usize, x: &mut [T]) {
    let p = (r1 - r0) * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                let mut i = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        i += g.out_w;
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[i];
                        }
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_weight(op: &'static str, w: Shape, g: &ConvGeom) -> Result<()> {
    if w.h() != g.kh || w.w() != g.kw {
        return Err(Error::InvalidShape { op, reason: alloc::format!("kernel {w} vs geometry {}x{}", g.kh, g.kw) });
    }
    Ok(())
}

/// `y[n, co] = Σ_ci x[n, ci] ⋆ w[co, ci]` (cross-correlation).
pub fn conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, wcin, _, _] = w.shape().0;
    check_weight("conv", w.shape(), g)?;
    if cin != wcin || h != g.in_h || wd != g.in_w {
        return Err(Error::ShapeMismatch { op: "conv", lhs: x.shape(), rhs: w.shape() });
    }
    let k = g.k(cin);
    let out_plane = g.out_h * g.out_w;
    let mut y = vec![T::zero(); n * cout * out_plane];
    let band = g.band_rows(cin);
    let mut cols = vec![T::zero(); k * band * g.out_w];
    let xd = x.data();
    for b in 0..n {
        let xb = &xd[b * cin * h * wd..(b + 1) * cin * h * wd];
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + band).min(g.out_h);
            let p = (r1 - r0) * g.out_w;
            im2col(xb, cin, g, r0, r1, &mut cols[..k * p]);
            let c_off = b * cout * out_plane + r0 * g.out_w;
            unsafe {
                T::gemm(
                    cout,
                    k,
                    p,
                    T::one(),
                    w.data().as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr().add(c_off),
                    out_plane as isize,
                    1,
                );
            }
            r0 = r1;
        }
    }
    Ok(Tensor::from_vec(Shape::new(n, cout, g.out_h, g.out_w), y))
}

/// Input adjoint of [`conv`]: maps an output-side tensor back to the input side.
/// As a layer this is a transposed convolution with weight `[c_in, c_out, k, k]`.
pub fn conv_input<T: Real>(y: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Result<Tensor<T>> {
    let [n, cout, oh, ow] = y.shape().0;
    let [wcout, cin, _, _] = w.shape().0;
    check_weight("conv_input", w.shape(), g)?;
    if cout != wcout || oh != g.out_h || ow != g.out_w {
        return Err(Error::ShapeMismatch { op: "conv_input", lhs: y.shape(), rhs: w.shape() });
    }
    let k = g.k(cin);
    let out_plane = oh * ow;
    let in_len = cin * g.in_h * g.in_w;
    let mut x = vec![T::zero(); n * in_len];
    let band = g.band_rows(cin);
    let mut cols = vec![T::zero(); k * band * ow];
    let yd = y.data();
    for b in 0..n {
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let p = (r1 - r0) * ow;
            let y_off = b * cout * out_plane + r0 * ow;
            // cols (k × p) = wᵀ (k × cout) · y_band (cout × p)
            unsafe {
                T::gemm(
                    k,
                    cout,
                    p,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    yd.as_ptr().add(y_off),
                    out_plane as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im_add(&cols[..k * p], cin, g, r0, r1, &mut x[b * in_len..(b + 1) * in_len]);
            r0 = r1;
        }
    }
    Ok(Tensor::from_vec(Shape::new(n, cin, g.in_h, g.in_w), x))
}

/// Weight adjoint of [`conv`]: `w[co, ci] = Σ_n x[n, ci] ⋆ y[n, co]`.
pub fn conv_weight<T: Real>(x: &Tensor<T>, y: &Tensor<T>, g: &ConvGeom) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.shape().0;
    let [yn, cout, oh, ow] = y.shape().0;
    if n != yn || h != g.in_h || wd != g.in_w || oh != g.out_h || ow != g.out_w {
        return Err(Error::ShapeMismatch { op: "conv_weight", lhs: x.shape(), rhs: y.shape() });
    }
    let k = g.k(cin);
    let out_plane = oh * ow;
    let mut gw = vec![T::zero(); cout * k];
    let band = g.band_rows(cin);
    let mut cols = vec![T::zero(); k * band * ow];
    let (xd, yd) = (x.data(), y.data());
    for b in 0..n {
        let xb = &xd[b * cin * h * wd..(b + 1) * cin * h * wd];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let p = (r1 - r0) * ow;
            im2col(xb, cin, g, r0, r1, &mut cols[..k * p]);
            let y_off = b * cout * out_plane + r0 * ow;
            // gw (cout × k) += y_band (cout × p) · colsᵀ (p × k)
            unsafe {
                T::gemm(
                    cout,
                    p,
                    k,
                    T::one(),
                    yd.as_ptr().add(y_off),
                    out_plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    gw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            r0 = r1;
        }
    }
    Ok(Tensor::from_vec(Shape::new(cout, cin, g.kh, g.kw), gw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        if in_h < kh || in_w < kw {
            return Err(Error::TooSmall { got_h: in_h, got_w: in_w, min_h: kh, min_w: kw });
        }
        Ok(PoolGeom { kh, kw, sh, sw, in_h, in_w, out_h: (in_h - kh) / sh + 1, out_w: (in_w - kw) / sw + 1 })
    }
}

/// Spatial average pooling without padding.
pub fn avg_pool<T: Real>(x: &Tensor<T>, g: &PoolGeom) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h != g.in_h || w != g.in_w {
        return Err(Error::InvalidShape { op: "avg_pool", reason: alloc::format!("{} vs window geometry {g:?}", x.shape()) });
    }
    let area = (g.kh * g.kw) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
    for plane in xd.chunks_exact(h * w) {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                // f64 accumulator, as in reduce_mean_hw.
                let mut acc = 0.0f64;
                for ky in 0..g.kh {
                    let row = &plane[(oy * g.sh + ky) * w + ox * g.sw..];
                    for v in &row[..g.kw] {
                        acc += v.as_f64();
                    }
                }
                out.push(T::lit(acc / area));
            }
        }
    }
    Ok(Tensor::from_vec(Shape::new(n, c, g.out_h, g.out_w), out))
}

/// Adjoint of [`avg_pool`]: spreads each pooled value uniformly over its window.
pub fn avg_pool_adjoint<T: Real>(y: &Tensor<T>, g: &PoolGeom) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = y.shape().0;
    if oh != g.out_h || ow != g.out_w {
        return Err(Error::InvalidShape { op: "avg_pool_adjoint", reason: alloc::format!("{} vs {g:?}", y.shape()) });
    }
    let inv = T::one() / T::lit((g.kh * g.kw) as f64);
    let plane = g.in_h * g.in_w;
    let mut x = vec![T::zero(); n * c * plane];
    for (yp, xp) in y.data().chunks_exact(oh * ow).zip(x.chunks_exact_mut(plane)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = yp[oy * ow + ox] * inv;
                for ky in 0..g.kh {
                    let base = (oy * g.sh + ky) * g.in_w + ox * g.sw;
                    for d in &mut xp[base..base + g.kw] {
                        *d = *d + v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(Shape::new(n, c, g.in_h, g.in_w), x))
}

/// 2×2-style max pooling; returns values and the flat in-plane argmax of each window.
pub fn max_pool<T: Real>(x: &Tensor<T>, g: &PoolGeom) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape().0;
    if h != g.in_h || w != g.in_w {
        return Err(Error::InvalidShape { op: "max_pool", reason: alloc::format!("{} vs {g:?}", x.shape()) });
    }
    let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
    let mut idx = Vec::with_capacity(out.capacity());
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let j = (oy * g.sh + ky) * w + ox * g.sw + kx;
                        if plane[j] > best {
                            best = plane[j];
                            arg = j;
                        }
                    }
                }
                out.push(best);
                idx.push(arg as u32);
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(n, c, g.out_h, g.out_w), out), idx))
}

/// Adds `y` into a zero tensor of shape `into` at per-plane positions `idx`.
pub fn scatter_planes<T: Real>(y: &Tensor<T>, idx: &[u32], into: Shape) -> Tensor<T> {
    let out_plane = y.shape().hw();
    let plane = into.hw();
    let mut x = vec![T::zero(); into.numel()];
    for (p, (yp, xp)) in y.data().chunks_exact(out_plane).zip(x.chunks_exact_mut(plane)).enumerate() {
        let ip = &idx[p * out_plane..(p + 1) * out_plane];
        for (v, &j) in yp.iter().zip(ip) {
            xp[j as usize] = xp[j as usize] + *v;
        }
    }
    Tensor::from_vec(into, x)
}

/// Reads per-plane positions `idx` out of `x`, producing shape `out`.
pub fn gather_planes<T: Real>(x: &Tensor<T>, idx: &[u32], out: Shape) -> Tensor<T> {
    let plane = x.shape().hw();
    let out_plane = out.hw();
    let mut y = Vec::with_capacity(out.numel());
    for (p, xp) in x.data().chunks_exact(plane).enumerate() {
        for &j in &idx[p * out_plane..(p + 1) * out_plane] {
            y.push(xp[j as usize]);
        }
    }
    Tensor::from_vec(out, y)
}

/// Per-(sample, channel) spatial mean, accumulated in double precision.
pub fn reduce_mean_hw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let hw = (h * w) as f64;
    let data = x.data().chunks_exact(h * w).map(|p| T::lit(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw)).collect();
    Tensor::from_vec(Shape::new(n, c, 1, 1), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape().0;
        let cout = w.shape().n();
        Tensor::from_fn([n, cout, g.out_h, g.out_w], |[b, co, oy, ox]| {
            let mut acc = 0.0;
            for ci in 0..cin {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at([b, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(k, s, p, h, w) in &[(3, 1, 1, 7, 5), (4, 2, 1, 8, 6), (3, 2, 1, 9, 9), (11, 1, 0, 12, 13)] {
            let g = ConvGeom::new(h, w, k, s, p).unwrap();
            let x = pseudo([2, 3, h, w], 1);
            let wt = pseudo([4, 3, k, k], 2);
            let fast = conv(&x, &wt, &g).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &wt, &g)) < 1e-12);
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x,w), y> = <x, conv_input(y,w)> = <w, conv_weight(x,y)>
        let g = ConvGeom::new(8, 6, 4, 2, 1).unwrap();
        let x = pseudo([2, 3, 8, 6], 3);
        let w = pseudo([5, 3, 4, 4], 4);
        let y = pseudo([2, 5, g.out_h, g.out_w], 5);
        let t0 = dot(&conv(&x, &w, &g).unwrap(), &y);
        let t1 = dot(&x, &conv_input(&y, &w, &g).unwrap());
        let t2 = dot(&w, &conv_weight(&x, &y, &g).unwrap());
        assert!((t0 - t1).abs() < 1e-10 && (t0 - t2).abs() < 1e-10, "{t0} {t1} {t2}");
    }

    #[test]
    fn pooling_adjoint_identity() {
        let g = PoolGeom::new(6, 4, 2, 2, 2, 2).unwrap();
        let x = pseudo([1, 2, 6, 4], 6);
        let y = pseudo([1, 2, 3, 2], 7);
        let lhs = dot(&avg_pool(&x, &g).unwrap(), &y);
        let rhs = dot(&x, &avg_pool_adjoint(&y, &g).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f64>::new([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]).unwrap();
        let g = PoolGeom::new(2, 4, 2, 2, 2, 2).unwrap();
        let (y, idx) = max_pool(&x, &g).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        assert_eq!(idx, vec![1, 6]);
        let back = scatter_planes(&y, &idx, x.shape());
        assert_eq!(back.data(), &[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
        assert_eq!(gather_planes(&back, &idx, y.shape()).data(), y.data());
    }

    #[test]
    fn banded_conv_matches_single_band() {
        // Large enough that im2col is split into several row bands.
        let g = ConvGeom::new(160, 200, 3, 1, 1).unwrap();
        assert!(g.band_rows(64) < g.out_h);
        let x = pseudo([1, 64, 160, 200], 8);
        let w = pseudo([2, 64, 3, 3], 9);
        let y = conv(&x, &w, &g).unwrap();
        let probe = |b: usize, co: usize, oy: usize, ox: usize| {
            let mut acc = 0.0;
            for ci in 0..64 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && iy < 160 && ix < 200 {
                            acc += x.at([b, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        };
        for &(oy, ox) in &[(0, 0), (80, 17), (159, 199), (101, 3)] {
            assert!((y.at([0, 1, oy, ox]) - probe(0, 1, oy, ox)).abs() < 1e-10);
        }
    }
}
