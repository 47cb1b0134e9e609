//! Single-image enhancement: decomposition, padding, customization, network pass and
//! recomposition to sRGB.

use crate::autograd::{Backend, Eager};
use crate::colorspace::{lab_to_rgb, rgb_to_lab, LabPlanes, RgbImage, AB_BOUND, L_MAX};
use crate::customize::{customize_guidance, CustomizeParams};
use crate::error::{Error, Result};
use crate::network::{Bcnet, NetInput, Outputs, SIZE_MULTIPLE};
use crate::quantizer::{decode_probs, ColorGamut};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Edge-replicating pad of every plane to `h x w` (bottom/right).
pub fn pad_replicate<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    if (s.h(), s.w()) == (h, w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |[n, c, y, x]| t.at([n, c, y.min(s.h() - 1), x.min(s.w() - 1)]))
}

fn crop_planes<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    if (s.h(), s.w()) == (h, w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |idx| t.at(idx))
}

fn padded(v: usize) -> usize {
    v.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE
}

/// Builds network inputs for a batch of equally sized images (already multiples of 16).
pub fn batch_input<T: Scalar>(images: &[RgbImage<T>]) -> Result<NetInput<T>> {
    let mut rgb = Vec::new();
    let mut light = Vec::new();
    let mut chroma = Vec::new();
    let inv_l = T::from_f64_lossy(1.0 / L_MAX);
    let inv_c = T::from_f64_lossy(1.0 / AB_BOUND);
    for img in images {
        let lab = rgb_to_lab(img);
        rgb.push(img.to_tensor());
        light.push(lab.lightness_tensor().map(|v| v * inv_l));
        chroma.push(lab.chroma_tensor().map(|v| v * inv_c));
    }
    Ok(NetInput {
        rgb: Tensor::stack(&rgb)?,
        lightness: Tensor::stack(&light)?,
        chroma: Tensor::stack(&chroma)?,
        reference: None,
        gamma: 0.0,
    })
}

/// Result of enhancing one image, cropped back to the input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced<T> {
    pub rgb: RgbImage<T>,
    /// Predicted lightness `[1, 1, H, W]` in `[0, 100]` (fused variant: derived from `rgb`).
    pub lightness: Tensor<T>,
    /// Predicted chrominance `[1, 2, H, W]` in Lab units.
    pub chroma: Tensor<T>,
    /// Class scores at quarter resolution of the padded input, when the head exists.
    pub logits: Option<Tensor<T>>,
}

impl<T: Scalar> Enhanced<T> {
    /// Mean `sqrt(a^2 + b^2)` of the predicted chrominance.
    pub fn mean_chroma_magnitude(&self) -> f64 {
        let plane = self.chroma.shape().plane();
        let (a, b) = (self.chroma.plane(0, 0), self.chroma.plane(0, 1));
        a.iter().zip(b).map(|(x, y)| (x.to_f64_lossy().powi(2) + y.to_f64_lossy().powi(2)).sqrt()).sum::<f64>()
            / plane as f64
    }

    /// Annealed-mean decoding of the class scores into chrominance (Lab units, quarter size).
    pub fn decoded_classes(&self, gamut: &ColorGamut, temperature: f64) -> Result<Option<Tensor<T>>> {
        let Some(z) = &self.logits else { return Ok(None) };
        let [n, k, h, w] = z.shape().0;
        let plane = h * w;
        let mut probs = z.clone();
        for i in 0..n {
            let item = probs.item_mut(i);
            for p in 0..plane {
                let m = (0..k).map(|c| item[c * plane + p]).fold(T::neg_infinity(), |a, b| a.max(b));
                let mut s = T::zero();
                for c in 0..k {
                    let e = (item[c * plane + p] - m).exp();
                    item[c * plane + p] = e;
                    s += e;
                }
                for c in 0..k {
                    item[c * plane + p] /= s;
                }
            }
        }
        decode_probs(&probs, gamut, temperature).map(Some)
    }
}

impl<T: Scalar> Bcnet<T> {
    /// Enhances one image with optional customization. Any size is accepted; the image is
    /// padded to a multiple of 16 internally.
    pub fn enhance(&self, img: &RgbImage<T>, params: &CustomizeParams<T>) -> Result<Enhanced<T>> {
        params.validate()?;
        let (h, w) = (img.height(), img.width());
        let (ph, pw) = (padded(h), padded(w));
        let lab = rgb_to_lab(img);
        let guidance = customize_guidance(&lab.chroma_tensor(), params)?;
        let inv_l = T::from_f64_lossy(1.0 / L_MAX);
        let inv_c = T::from_f64_lossy(1.0 / AB_BOUND);
        let input = NetInput {
            rgb: pad_replicate(&img.to_tensor(), ph, pw),
            lightness: pad_replicate(&lab.lightness_tensor().map(|v| v * inv_l), ph, pw),
            chroma: pad_replicate(&guidance.chroma.map(|v| v * inv_c), ph, pw),
            reference: guidance.reference.map(|r| pad_replicate(&r.map(|v| v * inv_c), ph, pw)),
            gamma: guidance.gamma,
        };
        let mut bk = Eager;
        match self.forward(&mut bk, &input)? {
            Outputs::Decoupled { lightness, chroma, logits } => {
                let (sl, sc) = (T::from_f64_lossy(L_MAX), T::from_f64_lossy(AB_BOUND));
                let l = crop_planes(bk.value(&lightness), h, w).map(|v| v * sl);
                let c = crop_planes(bk.value(&chroma), h, w).map(|v| v * sc);
                let planes = LabPlanes::from_tensors(&l, &c, 0)?;
                Ok(Enhanced { rgb: lab_to_rgb(&planes), lightness: l, chroma: c, logits: logits.map(|z| z.as_ref().clone()) })
            }
            Outputs::Fused { rgb } => {
                let out = RgbImage::from_tensor(&crop_planes(bk.value(&rgb), h, w), 0)?;
                let lab = rgb_to_lab(&out);
                Ok(Enhanced { lightness: lab.lightness_tensor(), chroma: lab.chroma_tensor(), rgb: out, logits: None })
            }
        }
    }

    /// Enhances a batch of same-size images without customization.
    pub fn enhance_batch(&self, images: &[RgbImage<T>]) -> Result<Vec<RgbImage<T>>> {
        let Some(first) = images.first() else { return Ok(Vec::new()) };
        if images.iter().any(|i| (i.height(), i.width()) != (first.height(), first.width())) {
            return Err(Error::Shape("batch images must share a size".into()));
        }
        images.iter().map(|img| self.enhance(img, &CustomizeParams::default()).map(|e| e.rgb)).collect()
    }
}
