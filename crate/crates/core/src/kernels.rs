//! Forward and backward numeric kernels behind the autograd tape and the eager evaluator.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Self {
        let (h, w) = (input.h(), input.w());
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeometry { cin: input.c(), h, w, k, stride, pad, ho, wo }
    }

    #[inline]
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.wo).max(1)).clamp(1, self.ho)
    }
}

/// Lays out the receptive fields for output rows `[r0, r1)` as a `patch x ((r1-r0)*wo)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, r0: usize, r1: usize, cols: &mut [T]) {
    let band = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * band..(row + 1) * band];
                let mut o = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[o..o + g.wo];
                    o += g.wo;
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wo as isize)).max(lo as isize) as usize;
                        dst_row[..lo].fill(T::zero());
                        let s0 = (lo as isize + shift) as usize;
                        dst_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        dst_row[hi..].fill(T::zero());
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back into an input-shaped buffer (adjoint of [`im2col`]).
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, r0: usize, r1: usize, dx: &mut [T]) {
    let band = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * band..(row + 1) * band];
                let mut o = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let src_row = &src[o..o + g.wo];
                    o += g.wo;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `w` is `[cout, cin, k, k]`, `b` is `[1, cout, 1, 1]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let ws = w.shape();
    let (cout, k) = (ws.n(), ws.h());
    assert_eq!(ws.c(), x.shape().c(), "conv input channels {} vs weight {}", x.shape(), ws);
    let g = ConvGeometry::new(x.shape(), k, stride, pad);
    let n = x.shape().n();
    let out_plane = g.ho * g.wo;
    let mut y = Tensor::zeros(Shape::new(n, cout, g.ho, g.wo));
    let patch = g.patch();
    let rows = g.band_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * rows * g.wo] };
    for i in 0..n {
        let xi = x.item(i);
        let yi = y.item_mut(i);
        if g.is_pointwise() {
            T::gemm(
                cout, patch, out_plane, T::one(),
                w.data(), (patch as isize, 1),
                xi, (out_plane as isize, 1),
                T::zero(), yi, (out_plane as isize, 1),
            );
        } else {
            let mut r0 = 0;
            while r0 < g.ho {
                let r1 = (r0 + rows).min(g.ho);
                let band = (r1 - r0) * g.wo;
                let cols = &mut cols[..patch * band];
                im2col(xi, &g, r0, r1, cols);
                T::gemm(
                    cout, patch, band, T::one(),
                    w.data(), (patch as isize, 1),
                    cols, (band as isize, 1),
                    T::zero(), &mut yi[r0 * g.wo..], (out_plane as isize, 1),
                );
                r0 = r1;
            }
        }
        if let Some(b) = b {
            for (co, &bias) in b.data().iter().enumerate() {
                for v in &mut yi[co * out_plane..(co + 1) * out_plane] {
                    *v += bias;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let ws = w.shape();
    let (cout, k) = (ws.n(), ws.h());
    let g = ConvGeometry::new(x.shape(), k, stride, pad);
    let n = x.shape().n();
    let out_plane = g.ho * g.wo;
    let patch = g.patch();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(ws));
    let mut db = need_db.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1)));
    let rows = g.band_rows();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * rows * g.wo] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); patch * rows * g.wo] };

    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += dyi[co * out_plane..(co + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
        if pointwise {
            if let Some(dw) = dw.as_mut() {
                T::gemm(
                    cout, out_plane, patch, T::one(),
                    dyi, (out_plane as isize, 1),
                    x.item(i), (1, out_plane as isize),
                    T::one(), dw.data_mut(), (patch as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    patch, cout, out_plane, T::one(),
                    w.data(), (1, patch as isize),
                    dyi, (out_plane as isize, 1),
                    T::zero(), dx.item_mut(i), (out_plane as isize, 1),
                );
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < g.ho {
            let r1 = (r0 + rows).min(g.ho);
            let band = (r1 - r0) * g.wo;
            let dy_band = &dyi[r0 * g.wo..];
            if let Some(dw) = dw.as_mut() {
                let cols = &mut cols[..patch * band];
                im2col(x.item(i), &g, r0, r1, cols);
                T::gemm(
                    cout, band, patch, T::one(),
                    dy_band, (out_plane as isize, 1),
                    cols, (1, band as isize),
                    T::one(), dw.data_mut(), (patch as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut dcols[..patch * band];
                T::gemm(
                    patch, cout, band, T::one(),
                    w.data(), (1, patch as isize),
                    dy_band, (out_plane as isize, 1),
                    T::zero(), dcols, (band as isize, 1),
                );
                col2im(dcols, &g, r0, r1, dx.item_mut(i));
            }
            r0 = r1;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Half-pixel-centre bilinear sampling table for one axis.
fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, T::from_f64_lossy(frac))
        })
        .collect()
}

/// Bilinear resize (half-pixel centres, edge clamped) of every plane.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                let gy = T::one() - fy;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gx = T::one() - fx;
                    dst[oy * ow + ox] = gy * (gx * r0[x0] + fx * r0[x1]) + fy * (gx * r1[x0] + fx * r1[x1]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape().0;
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = Tensor::zeros(Shape::new(n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let gy = T::one() - fy;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gx = T::one() - fx;
                    let v = g[oy * ow + ox];
                    dst[y0 * w + x0] += gy * gx * v;
                    dst[y0 * w + x1] += gy * fx * v;
                    dst[y1 * w + x0] += fy * gx * v;
                    dst[y1 * w + x1] += fy * fx * v;
                }
            }
        }
    }
    dx
}

/// Strides used to read `b` while iterating over `a`'s shape; broadcast axes get stride 0.
pub fn broadcast_strides(a: Shape, b: Shape) -> Option<[usize; 4]> {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        let (da, db) = (a.0[axis], b.0[axis]);
        if db == da {
            strides[axis] = acc;
        } else if db == 1 {
            strides[axis] = 0;
        } else {
            return None;
        }
        acc *= db;
    }
    Some(strides)
}

/// Visits every element of `a`'s shape with the matching flat offset into a broadcast `b`.
#[inline]
pub fn for_each_broadcast(a: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = a.0;
    let mut ia = 0;
    for i in 0..n {
        for j in 0..c {
            let base = i * strides[0] + j * strides[1];
            if strides[2] == 0 && strides[3] == 0 {
                for _ in 0..h * w {
                    f(ia, base);
                    ia += 1;
                }
            } else {
                for y in 0..h {
                    let row = base + y * strides[2];
                    for x in 0..w {
                        f(ia, row + x * strides[3]);
                        ia += 1;
                    }
                }
            }
        }
    }
}

/// Elementwise product with `b` broadcast against `a`.
pub fn mul_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x * y).unwrap();
    }
    let strides = broadcast_strides(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {} onto {}", b.shape(), a.shape()));
    let mut out = Tensor::zeros(a.shape());
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(a.shape(), strides, |ia, ib| od[ia] = ad[ia] * bd[ib]);
    out
}

/// Sums `g` (shaped like the broadcast result) down to shape `target`.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let strides = broadcast_strides(g.shape(), target).expect("reduction target must broadcast");
    let mut out = Tensor::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(g.shape(), strides, |ig, io| od[io] += gd[ig]);
    out
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let denom = T::from_usize(h * w).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, c, 1, 1));
    for i in 0..n {
        for ch in 0..c {
            let s: T = x.plane(i, ch).iter().copied().sum();
            out.set([i, ch, 0, 0], s / denom);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
