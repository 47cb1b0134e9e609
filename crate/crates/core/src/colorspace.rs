//! sRGB <-> CIELAB (D65) conversion and the network-side scaling of the Lab planes.
//!
//! All arithmetic is carried out in `f64`; results are stored in the caller's scalar type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Symmetric bound of the a and b axes.
pub const AB_BOUND: f64 = 110.0;
pub const L_MAX: f64 = 100.0;

/// sRGB primaries to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Reference white as the image of RGB (1,1,1), so the neutral axis maps exactly onto a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

#[inline]
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

/// One sRGB triple (each in `[0,1]`) to `(L, a, b)`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / WHITE[i]);
    }
    let l = (116.0 * f[1] - 16.0).clamp(0.0, L_MAX);
    [l, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// `(L, a, b)` to unclipped linear RGB.
pub fn lab_to_linear(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    let m = invert3(RGB_TO_XYZ);
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m.iter()) {
        *o = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
    }
    out
}

/// `(L, a, b)` to sRGB, clipped to `[0,1]`.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    lab_to_linear(lab).map(|c| linear_to_srgb(c.clamp(0.0, 1.0)).clamp(0.0, 1.0))
}

/// Whether a Lab colour lies inside the sRGB cube without clipping.
pub fn in_srgb_gamut(lab: [f64; 3]) -> bool {
    lab_to_linear(lab).iter().all(|&c| (0.0..=1.0).contains(&c))
}

/// Row-major `H x W x 3` image with channels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation("image must be at least 1x1".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Validation(format!(
                "{} values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Validation(format!("channel value {bad} outside [0,1]")));
        }
        Ok(RgbImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |[_, c, y, x]| {
            self.pixels[(y * self.width + x) * 3 + c]
        })
    }

    /// Reads item `n` of a `[N, 3, H, W]` tensor, clipping into `[0,1]`.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c() != 3 {
            return Err(Error::Shape(format!("RGB tensor needs 3 channels, got {s}")));
        }
        Self::from_fn(s.h(), s.w(), |y, x| {
            [0, 1, 2].map(|c| t.at([n, c, y, x]).max(T::zero()).min(T::one()))
        })
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Rotates by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(w, h, |y, x| self.pixel(x, w - 1 - y)).unwrap(),
            2 => Self::from_fn(h, w, |y, x| self.pixel(h - 1 - y, w - 1 - x)).unwrap(),
            _ => Self::from_fn(w, h, |y, x| self.pixel(h - 1 - x, y)).unwrap(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Validation(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, |y, x| self.pixel(top + y, left + x))
    }

    /// Replicates border pixels so both sides become multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        Self::from_fn(h, w, |y, x| self.pixel(y.min(self.height - 1), x.min(self.width - 1))).unwrap()
    }
}

/// Lightness plane `L` (`H x W`) and chrominance planes `a`, `b` (`2 x H x W`, planar).
#[derive(Debug, Clone, PartialEq)]
pub struct LabPlanes<T> {
    height: usize,
    width: usize,
    lightness: Vec<T>,
    chroma: Vec<T>,
}

impl<T: Scalar> LabPlanes<T> {
    pub fn new(height: usize, width: usize, lightness: Vec<T>, chroma: Vec<T>) -> Result<Self> {
        if lightness.len() != height * width || chroma.len() != 2 * height * width {
            return Err(Error::Shape(format!("Lab planes do not match {height}x{width}")));
        }
        if lightness.iter().chain(&chroma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Lab planes".into()));
        }
        Ok(LabPlanes { height, width, lightness, chroma })
    }

    /// Builds from `[1,1,H,W]` lightness and `[1,2,H,W]` chrominance tensors (item `n`).
    pub fn from_tensors(l: &Tensor<T>, c: &Tensor<T>, n: usize) -> Result<Self> {
        let (h, w) = (l.shape().h(), l.shape().w());
        if c.shape().c() != 2 || (c.shape().h(), c.shape().w()) != (h, w) {
            return Err(Error::Shape(format!("lightness {} vs chroma {}", l.shape(), c.shape())));
        }
        let mut chroma = c.plane(n, 0).to_vec();
        chroma.extend_from_slice(c.plane(n, 1));
        Self::new(h, w, l.plane(n, 0).to_vec(), chroma)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lightness(&self) -> &[T] {
        &self.lightness
    }

    pub fn chroma(&self) -> &[T] {
        &self.chroma
    }

    pub fn a(&self) -> &[T] {
        &self.chroma[..self.height * self.width]
    }

    pub fn b(&self) -> &[T] {
        &self.chroma[self.height * self.width..]
    }

    pub fn lightness_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.lightness.clone()).unwrap()
    }

    pub fn chroma_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::new(1, 2, self.height, self.width), self.chroma.clone()).unwrap()
    }

    pub fn with_chroma(&self, chroma: Vec<T>) -> Result<Self> {
        Self::new(self.height, self.width, self.lightness.clone(), chroma)
    }

    /// Checks the CIELAB-range invariants (L in `[0,100]`, a/b in `[-110,110]`).
    pub fn validate_lab_range(&self) -> Result<()> {
        let lmax = T::from_f64_lossy(L_MAX);
        let ab = T::from_f64_lossy(AB_BOUND);
        if self.lightness.iter().any(|&v| v < T::zero() || v > lmax) {
            return Err(Error::Validation("lightness outside [0,100]".into()));
        }
        if self.chroma.iter().any(|&v| v < -ab || v > ab) {
            return Err(Error::Validation("chrominance outside [-110,110]".into()));
        }
        Ok(())
    }
}

pub fn rgb_to_lab<T: Scalar>(img: &RgbImage<T>) -> LabPlanes<T> {
    let n = img.height * img.width;
    let mut lightness = Vec::with_capacity(n);
    let mut chroma = vec![T::zero(); 2 * n];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        let lab = srgb_to_lab([px[0].to_f64_lossy(), px[1].to_f64_lossy(), px[2].to_f64_lossy()]);
        lightness.push(T::from_f64_lossy(lab[0]));
        chroma[i] = T::from_f64_lossy(lab[1]);
        chroma[n + i] = T::from_f64_lossy(lab[2]);
    }
    LabPlanes { height: img.height, width: img.width, lightness, chroma }
}

/// Inverse conversion; colours outside the sRGB gamut are clipped into `[0,1]`.
pub fn lab_to_rgb<T: Scalar>(lab: &LabPlanes<T>) -> RgbImage<T> {
    let n = lab.height * lab.width;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        let rgb = lab_to_srgb([
            lab.lightness[i].to_f64_lossy(),
            lab.chroma[i].to_f64_lossy(),
            lab.chroma[n + i].to_f64_lossy(),
        ]);
        pixels.extend(rgb.map(T::from_f64_lossy));
    }
    RgbImage { height: lab.height, width: lab.width, pixels }
}

/// Scales L to `[0,1]` (divide by 100) and a/b to `[-1,1]` (divide by 110).
pub fn to_network_range<T: Scalar>(lab: &LabPlanes<T>) -> LabPlanes<T> {
    let (sl, sc) = (T::from_f64_lossy(L_MAX), T::from_f64_lossy(AB_BOUND));
    LabPlanes {
        height: lab.height,
        width: lab.width,
        lightness: lab.lightness.iter().map(|&v| v / sl).collect(),
        chroma: lab.chroma.iter().map(|&v| v / sc).collect(),
    }
}

pub fn from_network_range<T: Scalar>(planes: &LabPlanes<T>) -> LabPlanes<T> {
    let (sl, sc) = (T::from_f64_lossy(L_MAX), T::from_f64_lossy(AB_BOUND));
    LabPlanes {
        height: planes.height,
        width: planes.width,
        lightness: planes.lightness.iter().map(|&v| v * sl).collect(),
        chroma: planes.chroma.iter().map(|&v| v * sc).collect(),
    }
}
