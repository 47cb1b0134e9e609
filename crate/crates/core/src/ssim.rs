//! Structural similarity with an 11x11 Gaussian window (sigma 1.5), valid filtering,
//! and the usual stabilizers for a unit data range. Shared by the loss and the metric.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn gaussian_window<T: Scalar>() -> [T; WINDOW] {
    let mut taps = [0.0f64; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| T::from_f64_lossy(t / s))
}

/// Separable valid correlation of an `h x w` plane.
fn filter_valid<T: Scalar>(src: &[T], h: usize, w: usize, k: &[T; WINDOW]) -> Vec<T> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = T::zero();
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[x + t];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &kv) in k.iter().enumerate() {
            let row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += kv * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, k: &[T; WINDOW]) -> Vec<T> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        let src = &g[y * ow..(y + 1) * ow];
        for (t, &kv) in k.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += kv * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &v) in src.iter().enumerate() {
            for (t, &kv) in k.iter().enumerate() {
                dst[x + t] += kv * v;
            }
        }
    }
    out
}

struct PlaneStats<T> {
    mx: Vec<T>,
    my: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    b1: Vec<T>,
    b2: Vec<T>,
}

fn plane_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, k: &[T; WINDOW]) -> PlaneStats<T> {
    let c1 = T::from_f64_lossy((K1 * 1.0).powi(2));
    let c2 = T::from_f64_lossy((K2 * 1.0).powi(2));
    let two = T::from_f64_lossy(2.0);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let exx = filter_valid(&xx, h, w, k);
    let eyy = filter_valid(&yy, h, w, k);
    let exy = filter_valid(&xy, h, w, k);
    let len = mx.len();
    let (mut a1, mut a2, mut b1, mut b2) =
        (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
    for i in 0..len {
        let (ux, uy) = (mx[i], my[i]);
        a1.push(two * ux * uy + c1);
        a2.push(two * (exy[i] - ux * uy) + c2);
        b1.push(ux * ux + uy * uy + c1);
        b2.push((exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2);
    }
    PlaneStats { mx, my, a1, a2, b1, b2 }
}

fn check<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    x.expect_shape(y.shape())?;
    let s = x.shape();
    if s.h() < WINDOW || s.w() < WINDOW {
        return Err(Error::Validation(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            s.h(),
            s.w()
        )));
    }
    Ok(())
}

/// Mean SSIM over every plane of the two tensors.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check(x, y)?;
    let k = gaussian_window::<T>();
    let s = x.shape();
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..s.n() {
        for c in 0..s.c() {
            let st = plane_stats(x.plane(i, c), y.plane(i, c), s.h(), s.w(), &k);
            for j in 0..st.a1.len() {
                total += st.a1[j] * st.a2[j] / (st.b1[j] * st.b2[j]);
            }
            count += st.a1.len();
        }
    }
    Ok(total / T::from_usize(count).unwrap())
}

/// Gradient of mean SSIM with respect to `x`, scaled by `upstream`.
pub fn ssim_grad_x<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, upstream: T) -> Result<Tensor<T>> {
    check(x, y)?;
    let k = gaussian_window::<T>();
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let count = s.n() * s.c() * (h + 1 - WINDOW) * (w + 1 - WINDOW);
    let scale = upstream / T::from_usize(count).unwrap();
    let two = T::from_f64_lossy(2.0);
    let mut dx = Tensor::zeros(s);
    for i in 0..s.n() {
        for c in 0..s.c() {
            let xp = x.plane(i, c);
            let yp = y.plane(i, c);
            let st = plane_stats(xp, yp, h, w, &k);
            let len = st.a1.len();
            let (mut g_mx, mut g_exx, mut g_exy) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
            for j in 0..len {
                let den = st.b1[j] * st.b2[j];
                let sv = st.a1[j] * st.a2[j] / den;
                let (ux, uy) = (st.mx[j], st.my[j]);
                // d/d(E[xx]) = -S/B2, d/d(E[xy]) = 2 A1 / (B1 B2)
                let d_exx = -sv / st.b2[j];
                let d_exy = two * st.a1[j] / den;
                // partial through mx only, then chain E[xx] and E[xy] dependence on mx
                let d_mx_direct = two * uy * (st.a2[j] - st.a1[j]) / den - sv * two * ux * (st.b2[j] - st.b1[j]) / den;
                g_mx[j] = scale * d_mx_direct;
                g_exx[j] = scale * d_exx;
                g_exy[j] = scale * d_exy;
            }
            let back_mx = filter_valid_adjoint(&g_mx, h, w, &k);
            let back_exx = filter_valid_adjoint(&g_exx, h, w, &k);
            let back_exy = filter_valid_adjoint(&g_exy, h, w, &k);
            let dst = dx.plane_mut(i, c);
            for p in 0..h * w {
                dst[p] = back_mx[p] + two * xp[p] * back_exx[p] + yp[p] * back_exy[p];
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let k = gaussian_window::<f64>();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn filter_adjoint_identity() {
        let (h, w) = (14, 17);
        let k = gaussian_window::<f64>();
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = filter_valid(&x, h, w, &k);
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let back = filter_valid_adjoint(&g, h, w, &k);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn too_small_is_rejected() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 40));
        assert!(ssim(&t, &t).is_err());
    }
}
