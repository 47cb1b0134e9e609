//! Inference-time edits of the colour guidance: reference style transfer by matching
//! chroma statistics, and saturation amplification.

use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_lab, RgbImage, AB_BOUND};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Blend weight used for reference guidance at inference.
pub const DEFAULT_GAMMA: f64 = 0.7;

/// Which statistics transfer to use for reference guidance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Centre, scale by `std(ref)/std(in)`, add the reference mean.
    #[default]
    Standard,
    /// Centre and scale by `std(in)/std(ref)` without re-adding a mean.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomizeParams<T> {
    pub omega: f64,
    pub gamma: f64,
    pub reference: Option<RgbImage<T>>,
    pub adapt: AdaptMode,
}

impl<T> Default for CustomizeParams<T> {
    fn default() -> Self {
        CustomizeParams { omega: 0.0, gamma: 0.0, reference: None, adapt: AdaptMode::Standard }
    }
}

impl<T> CustomizeParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() {
            return Err(Error::Validation(format!("omega {} is not finite", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.gamma > 0.0 && self.reference.is_none() {
            return Err(Error::Validation("gamma > 0 requires a reference image".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            log::warn!("omega {} outside [0, 1] may give dull or oversaturated colours", self.omega);
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn clip<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v.clamp(-AB_BOUND, AB_BOUND))
}

/// Per-item, per-channel statistics transfer of `[N, 2, H, W]` chroma (Lab units).
/// The reference may have different spatial size; item `n` of `reference` (or item 0 if it
/// holds one) serves item `n` of `chroma`.
pub fn reinhard_adapt<T: Scalar>(chroma: &Tensor<T>, reference: &Tensor<T>, mode: AdaptMode) -> Result<Tensor<T>> {
    let (s, r) = (chroma.shape(), reference.shape());
    if s.c() != 2 || r.c() != 2 {
        return Err(Error::Shape(format!("chroma {s} and reference {r} need 2 channels")));
    }
    if s.numel() == 0 || r.numel() == 0 {
        return Err(Error::Validation("empty chroma map".into()));
    }
    if r.n() != 1 && r.n() != s.n() {
        return Err(Error::Shape(format!("reference batch {} vs {}", r.n(), s.n())));
    }
    let mut out = chroma.clone();
    for n in 0..s.n() {
        let rn = if r.n() == 1 { 0 } else { n };
        for c in 0..2 {
            let x: Vec<f64> = chroma.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let y: Vec<f64> = reference.plane(rn, c).iter().map(|v| v.to_f64_lossy()).collect();
            let (mx, sx) = mean_std(&x);
            let (my, sy) = mean_std(&y);
            let dst = out.plane_mut(n, c);
            match mode {
                AdaptMode::Standard => {
                    let scale = if sx > 0.0 { sy / sx } else { 1.0 };
                    for (d, &v) in dst.iter_mut().zip(&x) {
                        *d = clip((v - mx) * scale + my);
                    }
                }
                AdaptMode::Printed => {
                    let scale = if sy > 0.0 { sx / sy } else { 1.0 };
                    for (d, &v) in dst.iter_mut().zip(&x) {
                        *d = clip((v - mx) * scale);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `C * (1 + omega)`, clipped to the ab box.
pub fn amplify_saturation<T: Scalar>(chroma: &Tensor<T>, omega: f64) -> Tensor<T> {
    chroma.map(|v| clip(v.to_f64_lossy() * (1.0 + omega)))
}

/// Guidance handed to the colorization path, in Lab units.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance<T> {
    pub chroma: Tensor<T>,
    pub reference: Option<Tensor<T>>,
    pub gamma: f64,
}

/// Applies saturation control to `chroma` and, with a reference image, builds the adapted
/// reference guidance. The reference is adapted against the original (unamplified) chroma.
pub fn customize_guidance<T: Scalar>(chroma: &Tensor<T>, params: &CustomizeParams<T>) -> Result<Guidance<T>> {
    params.validate()?;
    let amplified = if params.omega == 0.0 { chroma.clone() } else { amplify_saturation(chroma, params.omega) };
    let reference = match &params.reference {
        Some(img) if params.gamma > 0.0 => {
            let ref_chroma = rgb_to_lab(img).chroma_tensor();
            Some(reinhard_adapt(chroma, &ref_chroma, params.adapt)?)
        }
        _ => None,
    };
    let gamma = if reference.is_some() { params.gamma } else { 0.0 };
    Ok(Guidance { chroma: amplified, reference, gamma })
}
