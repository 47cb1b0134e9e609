//! The six-term training objective and a frozen convolutional feature extractor for the
//! perceptual term.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Graph, Var};
use crate::colorspace::AB_BOUND;
use crate::error::{Error, Result};
use crate::kernels;
use crate::quantizer::{soft_encode, ColorGamut};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
/// Seed of the default perceptual extractor.
pub const EXTRACTOR_SEED: u64 = 0x5eed_0f_fea7;

pub const TERM_NAMES: [&str; 6] = ["rec_l", "ssim", "tv", "rec_c", "perceptual", "class"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec_l: f64,
    pub ssim: f64,
    pub tv: f64,
    pub rec_c: f64,
    pub perceptual: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec_l: 1.0, ssim: 0.1, tv: 0.01, rec_c: 1.0, perceptual: 0.01, class: 0.01 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.rec_l, self.ssim, self.tv, self.rec_c, self.perceptual, self.class]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Per-term values and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: [f64; 6],
    pub weights: [f64; 6],
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        TERM_NAMES.iter().position(|&n| n == name).map(|i| self.terms[i])
    }
}

/// Weighted sum of the six terms, refusing non-finite values.
pub fn total_loss(terms: [f64; 6], weights: &LossWeights) -> Result<LossReport> {
    for (name, t) in TERM_NAMES.iter().zip(terms) {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let w = weights.as_array();
    let total = terms.iter().zip(w).map(|(t, w)| t * w).sum();
    Ok(LossReport { terms, weights: w, total })
}

/// Frozen conv pyramid; features are tapped after every layer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    layers: Vec<ExtractorLayer<T>>,
}

#[derive(Debug, Clone)]
struct ExtractorLayer<T> {
    weight: Arc<Tensor<T>>,
    bias: Arc<Tensor<T>>,
    stride: usize,
    activate: bool,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Three seeded 3x3 layers (widths 16, 32, 64, strides 1, 2, 2) with leaky ReLU.
    pub fn seeded(cin: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c = cin;
        for (cout, stride) in [(16, 1), (32, 2), (64, 2)] {
            let normal = Normal::new(0.0, (2.0 / (c * 9) as f64).sqrt()).unwrap();
            let weight = Tensor::from_fn(Shape::new(cout, c, 3, 3), |_| T::from_f64_lossy(normal.sample(&mut rng)));
            layers.push(ExtractorLayer {
                weight: Arc::new(weight),
                bias: Arc::new(Tensor::zeros(Shape::new(1, cout, 1, 1))),
                stride,
                activate: true,
            });
            c = cout;
        }
        FeatureExtractor { layers }
    }

    /// One linear 1x1 identity layer; the perceptual term then reduces to MSE.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(Shape::new(c, c, 1, 1), |[o, i, _, _]| if o == i { T::one() } else { T::zero() });
        FeatureExtractor {
            layers: vec![ExtractorLayer {
                weight: Arc::new(weight),
                bias: Arc::new(Tensor::zeros(Shape::new(1, c, 1, 1))),
                stride: 1,
                activate: false,
            }],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let w = g.frozen(layer.weight.clone());
            let b = g.frozen(layer.bias.clone());
            let k = layer.weight.shape().h();
            h = g.conv2d(&h, &w, Some(&b), layer.stride, k / 2);
            if layer.activate {
                h = g.leaky_relu(&h, T::from_f64_lossy(0.2));
            }
            out.push(h);
        }
        out
    }

    /// Mean over depths of the feature-space MSE.
    pub fn distance(&self, g: &mut Graph<T>, pred: Var, target: Var) -> Var {
        let fp = self.features(g, pred);
        let ft = self.features(g, target);
        let depth = T::from_usize(fp.len()).unwrap();
        let terms = fp.into_iter().zip(ft).map(|(a, b)| (g.mse(a, b), T::one() / depth)).collect();
        g.weighted_sum(terms)
    }
}

/// Soft-encoded class targets at quarter resolution from network-range chrominance.
pub fn class_targets<T: Scalar>(chroma: &Tensor<T>, gamut: &ColorGamut) -> Result<Tensor<T>> {
    let s = chroma.shape();
    let small = kernels::resize_bilinear(chroma, s.h() / 4, s.w() / 4);
    let scale = T::from_f64_lossy(AB_BOUND);
    Ok(soft_encode(&small.map(|v| v * scale), gamut)?.into_tensor())
}

/// Training targets for one batch, in network range.
#[derive(Debug, Clone)]
pub struct Targets<T> {
    /// `[N, 3, H, W]` sRGB, used by the fused variant.
    pub rgb: Tensor<T>,
    pub lightness: Tensor<T>,
    pub chroma: Tensor<T>,
    /// Precomputed class distributions (`None` when the class term is off).
    pub classes: Option<Tensor<T>>,
}

fn checked<T: Scalar>(g: &Graph<T>, v: Var, name: &str) -> Result<Var> {
    if g.scalar(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {name}")))
    }
}

/// Builds the weighted objective on `g` for decoupled outputs.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    lightness: Var,
    chroma: Var,
    logits: Option<Var>,
    targets: &Targets<T>,
    weights: &LossWeights,
    extractor: &FeatureExtractor<T>,
) -> Result<(Var, LossReport)> {
    let lt = g.input(targets.lightness.clone());
    let ct = g.input(targets.chroma.clone());
    let eps = T::from_f64_lossy(CHARBONNIER_EPS);
    let rec_l = g.charbonnier(lightness, lt, eps);
    let rec_l = checked(g, rec_l, TERM_NAMES[0])?;
    let ssim = g.ssim_loss(lightness, lt)?;
    let ssim = checked(g, ssim, TERM_NAMES[1])?;
    let tv = g.total_variation(lightness);
    let tv = checked(g, tv, TERM_NAMES[2])?;
    let rec_c = g.l1(chroma, ct);
    let rec_c = checked(g, rec_c, TERM_NAMES[3])?;
    let stacked_p = g.concat(&lightness, &chroma);
    let stacked_t = g.concat(&lt, &ct);
    let per = extractor.distance(g, stacked_p, stacked_t);
    let per = checked(g, per, TERM_NAMES[4])?;
    let mut vars = vec![rec_l, ssim, tv, rec_c, per];
    let class = match (logits, &targets.classes) {
        (Some(z), Some(q)) if weights.class > 0.0 => {
            let qv = g.input(q.clone());
            let v = g.soft_cross_entropy(z, qv);
            Some(checked(g, v, TERM_NAMES[5])?)
        }
        _ => None,
    };
    let mut terms = [0.0; 6];
    for (i, v) in vars.iter().enumerate() {
        terms[i] = g.scalar(*v).to_f64_lossy();
    }
    if let Some(c) = class {
        terms[5] = g.scalar(c).to_f64_lossy();
        vars.push(c);
    }
    let report = total_loss(terms, weights)?;
    let w = weights.as_array();
    let total = g.weighted_sum(vars.iter().enumerate().map(|(i, &v)| (v, T::from_f64_lossy(w[i]))).collect());
    Ok((total, report))
}

/// Objective of the fused-RGB variant: the lightness terms and the perceptual term on RGB.
pub fn objective_rgb<T: Scalar>(
    g: &mut Graph<T>,
    rgb: Var,
    targets: &Targets<T>,
    weights: &LossWeights,
    extractor: &FeatureExtractor<T>,
) -> Result<(Var, LossReport)> {
    let t = g.input(targets.rgb.clone());
    let eps = T::from_f64_lossy(CHARBONNIER_EPS);
    let rec = g.charbonnier(rgb, t, eps);
    let rec = checked(g, rec, TERM_NAMES[0])?;
    let ssim = g.ssim_loss(rgb, t)?;
    let ssim = checked(g, ssim, TERM_NAMES[1])?;
    let tv = g.total_variation(rgb);
    let tv = checked(g, tv, TERM_NAMES[2])?;
    let per = extractor.distance(g, rgb, t);
    let per = checked(g, per, TERM_NAMES[4])?;
    let vars = [(rec, 0), (ssim, 1), (tv, 2), (per, 4)];
    let mut terms = [0.0; 6];
    for &(v, i) in &vars {
        terms[i] = g.scalar(v).to_f64_lossy();
    }
    let report = total_loss(terms, weights)?;
    let w = weights.as_array();
    let total = g.weighted_sum(vars.iter().map(|&(v, i)| (v, T::from_f64_lossy(w[i]))).collect());
    Ok((total, report))
}

fn eval2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>) -> Result<T> {
    a.expect_shape(b.shape())?;
    let mut g = Graph::new();
    let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let v = f(&mut g, x, y)?;
    Ok(g.scalar(v))
}

pub fn charbonnier<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    eval2(pred, target, |g, x, y| Ok(g.charbonnier(x, y, T::from_f64_lossy(CHARBONNIER_EPS))))
}

pub fn ssim_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    eval2(pred, target, |g, x, y| g.ssim_loss(x, y))
}

pub fn tv_loss<T: Scalar>(pred: &Tensor<T>) -> T {
    let mut g = Graph::new();
    let x = g.leaf(pred.clone());
    let v = g.total_variation(x);
    g.scalar(v)
}

pub fn l1_chroma<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    eval2(pred, target, |g, x, y| Ok(g.l1(x, y)))
}

pub fn perceptual<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, extractor: &FeatureExtractor<T>) -> Result<T> {
    eval2(pred, target, |g, x, y| Ok(extractor.distance(g, x, y)))
}

/// Cross-entropy between class logits and a soft target; the target must be a simplex.
pub fn class_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let target = crate::quantizer::QuantDistribution::new(target.clone())?;
    eval2(logits, target.probs(), |g, x, y| Ok(g.soft_cross_entropy(x, y)))
}
