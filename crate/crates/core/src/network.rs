//! The two-branch enhancement network: a shared lightness encoder feeding a brightening
//! decoder (modulated by lightness priors) and a colorization decoder guided by the input's
//! own chrominance, plus the fused-RGB ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Backend;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Every encoder level halves resolution; inputs must be divisible by this.
pub const SIZE_MULTIPLE: usize = 16;

// Init gains: ahead of a leaky unit, linear, and for residual branch ends and output heads.
const HE: f64 = std::f64::consts::SQRT_2;
const LINEAR: f64 = 1.0;
const SMALL: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub use_lam: bool,
    pub use_cem: bool,
    pub use_class_head: bool,
    pub shared_encoder: bool,
    pub decouple: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            num_scales: 4,
            use_lam: true,
            use_cem: true,
            use_class_head: true,
            shared_encoder: true,
            decouple: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.num_scales != 4 {
            return Err(Error::Config(format!("num_scales must be 4, got {}", self.num_scales)));
        }
        Ok(())
    }

    /// Channel width at pyramid level `level` (0 = full resolution, 4 = bottleneck).
    pub fn width(&self, level: usize) -> usize {
        (self.base_channels << level).min(8 * self.base_channels)
    }

    fn widths(&self, divisor: usize) -> [usize; 5] {
        std::array::from_fn(|l| (self.width(l) / divisor).max(1))
    }
}

/// Inverted lightness and Sobel edge magnitude at full resolution, `[N, 1, H, W]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMaps<T> {
    pub inverted: Tensor<T>,
    pub edges: Tensor<T>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r as usize
}

/// `B = 1 - L` and `E = |sobel(L)|` with reflective borders. `lightness` is in `[0, 1]`.
pub fn compute_priors<T: Scalar>(lightness: &Tensor<T>) -> Result<PriorMaps<T>> {
    let s = lightness.shape();
    if s.c() != 1 {
        return Err(Error::Shape(format!("lightness must have one channel, got {s}")));
    }
    let inverted = lightness.map(|v| T::one() - v);
    let (h, w) = (s.h(), s.w());
    let mut edges = Tensor::zeros(s);
    let two = T::from_f64_lossy(2.0);
    for n in 0..s.n() {
        let src = lightness.plane(n, 0);
        let dst = edges.plane_mut(n, 0);
        for y in 0..h {
            let ys = [reflect(y as isize - 1, h), y, reflect(y as isize + 1, h)];
            for x in 0..w {
                let xs = [reflect(x as isize - 1, w), x, reflect(x as isize + 1, w)];
                let p = |r: usize, c: usize| src[ys[r] * w + xs[c]];
                let gx = (p(0, 2) + two * p(1, 2) + p(2, 2)) - (p(0, 0) + two * p(1, 0) + p(2, 0));
                let gy = (p(2, 0) + two * p(2, 1) + p(2, 2)) - (p(0, 0) + two * p(0, 1) + p(0, 2));
                dst[y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    Ok(PriorMaps { inverted, edges })
}

/// Prior tensors placed on a backend. The edge map is stored as `1 + E`.
#[derive(Debug, Clone)]
pub struct PriorValues<V> {
    inverted: V,
    edge_gain: V,
}

impl<V: Clone> PriorValues<V> {
    pub fn new<T: Scalar, B: Backend<T, Value = V>>(bk: &mut B, priors: &PriorMaps<T>) -> Self {
        PriorValues {
            inverted: bk.input(priors.inverted.clone()),
            edge_gain: bk.input(priors.edges.map(|e| T::one() + e)),
        }
    }
}

/// Lightness adjustment: `F * resize(B) * (1 + resize(E))`, priors broadcast over channels.
pub fn lam_apply<T: Scalar, B: Backend<T>>(bk: &mut B, features: &B::Value, priors: &PriorValues<B::Value>) -> B::Value {
    let s = bk.shape(features);
    let at_scale = |bk: &mut B, v: &B::Value| {
        if bk.shape(v).h() == s.h() && bk.shape(v).w() == s.w() {
            v.clone()
        } else {
            bk.resize(v, s.h(), s.w())
        }
    };
    let inv = at_scale(bk, &priors.inverted);
    let gain = at_scale(bk, &priors.edge_gain);
    let y = bk.mul(features, &inv);
    bk.mul(&y, &gain)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.conv_kernel(&format!("{name}.weight"), cout, cin, k, gain, rng);
        let b = ps.zeros(&format!("{name}.bias"), Shape::new(1, cout, 1, 1));
        Conv { w, b, stride, pad: k / 2 }
    }

    fn apply<T: Scalar, B: Backend<T>>(&self, bk: &mut B, ps: &ParamStore<T>, x: &B::Value) -> B::Value {
        let w = bk.param(ps, self.w);
        let b = bk.param(ps, self.b);
        bk.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

/// Residual block: two 3x3 convs, squeeze-style channel gate, identity shortcut.
#[derive(Debug, Clone)]
struct Rcb {
    conv1: Conv,
    conv2: Conv,
    squeeze: Conv,
    excite: Conv,
}

impl Rcb {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = (c / 4).max(1);
        Rcb {
            conv1: Conv::new(ps, &format!("{name}.conv1"), c, c, 3, 1, HE, rng),
            conv2: Conv::new(ps, &format!("{name}.conv2"), c, c, 3, 1, SMALL, rng),
            squeeze: Conv::new(ps, &format!("{name}.squeeze"), c, r, 1, 1, HE, rng),
            excite: Conv::new(ps, &format!("{name}.excite"), r, c, 1, 1, HE, rng),
        }
    }

    fn apply<T: Scalar, B: Backend<T>>(&self, bk: &mut B, ps: &ParamStore<T>, x: &B::Value) -> B::Value {
        let h = self.conv1.apply(bk, ps, x);
        let h = bk.leaky_relu(&h, T::from_f64_lossy(LEAKY_SLOPE));
        let h = self.conv2.apply(bk, ps, &h);
        let a = bk.global_avg_pool(&h);
        let a = self.squeeze.apply(bk, ps, &a);
        let a = bk.leaky_relu(&a, T::zero());
        let a = self.excite.apply(bk, ps, &a);
        let a = bk.sigmoid(&a);
        let h = bk.mul(&h, &a);
        bk.add(&h, x)
    }
}

/// Feature pyramid: per-level outputs (full resolution first) and an optional bottleneck.
#[derive(Debug, Clone)]
pub struct Pyramid<V> {
    pub levels: Vec<V>,
    pub bottom: Option<V>,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv,
    blocks: Vec<Rcb>,
    downs: Vec<Conv>,
    bottleneck: Option<Rcb>,
}

impl Encoder {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        widths: [usize; 5],
        with_bottleneck: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv::new(ps, &format!("{name}.stem"), cin, widths[0], 3, 1, HE, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..4 {
            blocks.push(Rcb::new(ps, &format!("{name}.block{l}"), widths[l], rng));
            if l < 3 || with_bottleneck {
                downs.push(Conv::new(ps, &format!("{name}.down{l}"), widths[l], widths[l + 1], 3, 2, LINEAR, rng));
            }
        }
        let bottleneck = with_bottleneck.then(|| Rcb::new(ps, &format!("{name}.bottleneck"), widths[4], rng));
        Encoder { stem, blocks, downs, bottleneck }
    }

    fn apply<T: Scalar, B: Backend<T>>(&self, bk: &mut B, ps: &ParamStore<T>, x: &B::Value) -> Pyramid<B::Value> {
        let mut x = self.stem.apply(bk, ps, x);
        let mut levels = Vec::with_capacity(4);
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.apply(bk, ps, &x);
            levels.push(x.clone());
            if let Some(down) = self.downs.get(l) {
                x = down.apply(bk, ps, &x);
            }
        }
        let bottom = self.bottleneck.as_ref().map(|b| b.apply(bk, ps, &x));
        Pyramid { levels, bottom }
    }
}

/// Upsample by bilinear resize to `(h, w)` followed by a 1x1 conv.
fn upsample<T: Scalar, B: Backend<T>>(
    bk: &mut B,
    ps: &ParamStore<T>,
    conv: &Conv,
    x: &B::Value,
    h: usize,
    w: usize,
) -> B::Value {
    let x = bk.resize(x, h, w);
    conv.apply(bk, ps, &x)
}

#[derive(Debug, Clone)]
struct LightDecoder {
    use_lam: bool,
    ups: Vec<Conv>,
    blocks: Vec<Rcb>,
    head: Conv,
}

impl LightDecoder {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        widths: [usize; 5],
        out: usize,
        use_lam: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ups = (0..4).map(|l| Conv::new(ps, &format!("{name}.up{l}"), widths[l + 1], widths[l], 1, 1, LINEAR, rng)).collect();
        let blocks = (0..4).map(|l| Rcb::new(ps, &format!("{name}.block{l}"), widths[l], rng)).collect();
        let head = Conv::new(ps, &format!("{name}.head"), widths[0], out, 1, 1, SMALL, rng);
        LightDecoder { use_lam, ups, blocks, head }
    }

    fn apply<T: Scalar, B: Backend<T>>(
        &self,
        bk: &mut B,
        ps: &ParamStore<T>,
        features: &Pyramid<B::Value>,
        priors: &PriorValues<B::Value>,
    ) -> B::Value {
        let mut x = features.bottom.clone().expect("main encoder has a bottleneck");
        if self.use_lam {
            x = lam_apply(bk, &x, priors);
        }
        for l in (0..4).rev() {
            let mut skip = features.levels[l].clone();
            if self.use_lam {
                skip = lam_apply(bk, &skip, priors);
            }
            let s = bk.shape(&skip);
            x = upsample(bk, ps, &self.ups[l], &x, s.h(), s.w());
            x = bk.add(&x, &skip);
            x = self.blocks[l].apply(bk, ps, &x);
        }
        let y = self.head.apply(bk, ps, &x);
        bk.sigmoid(&y)
    }
}

/// How the colorization decoder merges guidance features into the lightness path.
#[derive(Debug, Clone)]
enum Fusion {
    Cem { gate_l: Conv, gate_c: Conv },
    Concat(Conv),
}

/// Gated embedding: `F_l * sigmoid(conv_l(F_l + F_c)) + F_c * sigmoid(conv_c(F_l + F_c))`.
pub fn cem_fuse<T: Scalar, B: Backend<T>>(
    bk: &mut B,
    fl: &B::Value,
    fc: &B::Value,
    gate_l: (&B::Value, &B::Value),
    gate_c: (&B::Value, &B::Value),
) -> Result<B::Value> {
    if bk.shape(fl) != bk.shape(fc) {
        return Err(Error::Shape(format!("CEM operands {} vs {}", bk.shape(fl), bk.shape(fc))));
    }
    let sum = bk.add(fl, fc);
    let al = bk.conv2d(&sum, gate_l.0, Some(gate_l.1), 1, 0);
    let al = bk.sigmoid(&al);
    let ac = bk.conv2d(&sum, gate_c.0, Some(gate_c.1), 1, 0);
    let ac = bk.sigmoid(&ac);
    let yl = bk.mul(fl, &al);
    let yc = bk.mul(fc, &ac);
    Ok(bk.add(&yl, &yc))
}

impl Fusion {
    fn apply<T: Scalar, B: Backend<T>>(&self, bk: &mut B, ps: &ParamStore<T>, fl: &B::Value, fc: &B::Value) -> B::Value {
        match self {
            Fusion::Cem { gate_l, gate_c } => {
                let gl = (bk.param(ps, gate_l.w), bk.param(ps, gate_l.b));
                let gc = (bk.param(ps, gate_c.w), bk.param(ps, gate_c.b));
                cem_fuse(bk, fl, fc, (&gl.0, &gl.1), (&gc.0, &gc.1)).expect("decoder widths agree")
            }
            Fusion::Concat(conv) => {
                let x = bk.concat(fl, fc);
                conv.apply(bk, ps, &x)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ColorDecoder {
    ups: Vec<Conv>,
    projections: Vec<Conv>,
    fusions: Vec<Fusion>,
    blocks: Vec<Rcb>,
    class_head: Option<Conv>,
    head: Conv,
}

/// Pyramid level (1/4 resolution) the class logits branch from.
const CLASS_LEVEL: usize = 2;

impl ColorDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        widths: [usize; 5],
        guide_widths: [usize; 5],
        use_cem: bool,
        bins: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut ups = Vec::new();
        let mut projections = Vec::new();
        let mut fusions = Vec::new();
        let mut blocks = Vec::new();
        for l in 0..4 {
            let c = widths[l];
            ups.push(Conv::new(ps, &format!("{name}.up{l}"), widths[l + 1], c, 1, 1, LINEAR, rng));
            projections.push(Conv::new(ps, &format!("{name}.proj{l}"), guide_widths[l], c, 1, 1, LINEAR, rng));
            fusions.push(if use_cem {
                Fusion::Cem {
                    gate_l: Conv::new(ps, &format!("{name}.cem{l}.gate_l"), c, c, 1, 1, LINEAR, rng),
                    gate_c: Conv::new(ps, &format!("{name}.cem{l}.gate_c"), c, c, 1, 1, LINEAR, rng),
                }
            } else {
                Fusion::Concat(Conv::new(ps, &format!("{name}.cat{l}"), 2 * c, c, 1, 1, LINEAR, rng))
            });
            blocks.push(Rcb::new(ps, &format!("{name}.block{l}"), c, rng));
        }
        let class_head = bins.map(|k| Conv::new(ps, &format!("{name}.class_head"), widths[CLASS_LEVEL], k, 1, 1, SMALL, rng));
        let head = Conv::new(ps, &format!("{name}.head"), widths[0], 2, 1, 1, SMALL, rng);
        ColorDecoder { ups, projections, fusions, blocks, class_head, head }
    }

    fn apply<T: Scalar, B: Backend<T>>(
        &self,
        bk: &mut B,
        ps: &ParamStore<T>,
        features: &Pyramid<B::Value>,
        guidance: &[B::Value],
    ) -> (B::Value, Option<B::Value>) {
        let mut x = features.bottom.clone().expect("main encoder has a bottleneck");
        let mut logits = None;
        for l in (0..4).rev() {
            let skip = &features.levels[l];
            let s = bk.shape(skip);
            x = upsample(bk, ps, &self.ups[l], &x, s.h(), s.w());
            x = bk.add(&x, skip);
            let g = self.projections[l].apply(bk, ps, &guidance[l]);
            x = self.fusions[l].apply(bk, ps, &x, &g);
            x = self.blocks[l].apply(bk, ps, &x);
            if l == CLASS_LEVEL {
                logits = self.class_head.as_ref().map(|h| h.apply(bk, ps, &x));
            }
        }
        let c = self.head.apply(bk, ps, &x);
        (bk.tanh(&c), logits)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Decoupled {
        encoder: Encoder,
        color_encoder: Option<Encoder>,
        guide: Encoder,
        light: LightDecoder,
        color: ColorDecoder,
    },
    Fused {
        encoder: Encoder,
        decoder: LightDecoder,
    },
}

/// Network inputs for a batch, all in network range.
#[derive(Debug, Clone)]
pub struct NetInput<T> {
    /// `[N, 3, H, W]` sRGB, consumed only by the fused variant.
    pub rgb: Tensor<T>,
    /// `[N, 1, H, W]` lightness of the low-light image.
    pub lightness: Tensor<T>,
    /// `[N, 2, H, W]` chrominance guidance (possibly amplified).
    pub chroma: Tensor<T>,
    /// Adapted reference chrominance for feature blending.
    pub reference: Option<Tensor<T>>,
    /// Blend weight of reference guidance features.
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub enum Outputs<V> {
    Decoupled {
        /// `[N, 1, H, W]` in `[0, 1]`.
        lightness: V,
        /// `[N, 2, H, W]` in `[-1, 1]`.
        chroma: V,
        /// `[N, bins, H/4, W/4]` unnormalized class scores.
        logits: Option<V>,
    },
    Fused {
        /// `[N, 3, H, W]` in `[0, 1]`.
        rgb: V,
    },
}

/// Weights plus structure for one network variant.
#[derive(Debug, Clone)]
pub struct Bcnet<T> {
    config: ModelConfig,
    bins: usize,
    params: ParamStore<T>,
    arch: Arch,
}

pub fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!("spatial dims {h}x{w} must be positive multiples of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

impl<T: Scalar> Bcnet<T> {
    /// Builds a freshly initialised network with `bins` class outputs.
    pub fn new(config: ModelConfig, bins: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let widths = config.widths(1);
        let arch = if config.decouple {
            let encoder = Encoder::new(&mut ps, "encoder", 1, widths, true, &mut rng);
            let color_encoder =
                (!config.shared_encoder).then(|| Encoder::new(&mut ps, "color_encoder", 1, widths, true, &mut rng));
            let guide_widths = config.widths(2);
            let guide = Encoder::new(&mut ps, "guide", 2, guide_widths, false, &mut rng);
            let light = LightDecoder::new(&mut ps, "brighten", widths, 1, config.use_lam, &mut rng);
            let class_bins = config.use_class_head.then_some(bins);
            let color = ColorDecoder::new(&mut ps, "colorize", widths, guide_widths, config.use_cem, class_bins, &mut rng);
            Arch::Decoupled { encoder, color_encoder, guide, light, color }
        } else {
            let encoder = Encoder::new(&mut ps, "encoder", 3, widths, true, &mut rng);
            let decoder = LightDecoder::new(&mut ps, "decoder", widths, 3, config.use_lam, &mut rng);
            Arch::Fused { encoder, decoder }
        };
        Ok(Bcnet { config, bins, params: ps, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar count of lightness-encoder weights (both encoders when unshared).
    pub fn encoder_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.") || n.starts_with("color_encoder."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Number of lightness adjustment sites in the brightening path.
    pub fn lam_count(&self) -> usize {
        let decoder = match &self.arch {
            Arch::Decoupled { light, .. } => light,
            Arch::Fused { decoder, .. } => decoder,
        };
        if decoder.use_lam {
            decoder.blocks.len() + 1
        } else {
            0
        }
    }

    /// Number of gated embedding modules in the colorization path.
    pub fn cem_count(&self) -> usize {
        match &self.arch {
            Arch::Decoupled { color, .. } => color.fusions.iter().filter(|f| matches!(f, Fusion::Cem { .. })).count(),
            Arch::Fused { .. } => 0,
        }
    }

    /// Number of concatenation fusions in the colorization path.
    pub fn concat_fusion_count(&self) -> usize {
        match &self.arch {
            Arch::Decoupled { color, .. } => color.fusions.iter().filter(|f| matches!(f, Fusion::Concat(_))).count(),
            Arch::Fused { .. } => 0,
        }
    }

    pub fn encoder_count(&self) -> usize {
        match &self.arch {
            Arch::Decoupled { color_encoder, .. } => 1 + color_encoder.is_some() as usize,
            Arch::Fused { .. } => 1,
        }
    }

    pub fn has_class_head(&self) -> bool {
        matches!(&self.arch, Arch::Decoupled { color, .. } if color.class_head.is_some())
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.arch, Arch::Decoupled { .. })
    }

    /// Runs the network on a backend. Customization happens before this call, on `input`.
    pub fn forward<B: Backend<T>>(&self, bk: &mut B, input: &NetInput<T>) -> Result<Outputs<B::Value>> {
        let ls = input.lightness.shape();
        if ls.c() != 1 {
            return Err(Error::Shape(format!("lightness input {ls}")));
        }
        check_dims(ls.h(), ls.w())?;
        let n = ls.n();
        input.chroma.expect_shape(Shape::new(n, 2, ls.h(), ls.w()))?;
        if !(0.0..=1.0).contains(&input.gamma) {
            return Err(Error::Validation(format!("gamma {} outside [0, 1]", input.gamma)));
        }
        if input.gamma > 0.0 && input.reference.is_none() {
            return Err(Error::Validation("gamma > 0 requires a reference".into()));
        }
        let priors = compute_priors(&input.lightness)?;
        let pv = PriorValues::new(bk, &priors);
        let ps = &self.params;
        match &self.arch {
            Arch::Decoupled { encoder, color_encoder, guide, light, color } => {
                let l_in = bk.input(input.lightness.clone());
                let features = encoder.apply(bk, ps, &l_in);
                let lightness = light.apply(bk, ps, &features, &pv);
                let color_features = match color_encoder {
                    Some(e) => e.apply(bk, ps, &l_in),
                    None => features,
                };
                let c_in = bk.input(input.chroma.clone());
                let mut g = guide.apply(bk, ps, &c_in).levels;
                if input.gamma > 0.0 {
                    let reference = input.reference.as_ref().expect("checked above");
                    reference.expect_shape(input.chroma.shape())?;
                    let c_ref = bk.input(reference.clone());
                    let gr = guide.apply(bk, ps, &c_ref).levels;
                    let gm = T::from_f64_lossy(input.gamma);
                    for (own, other) in g.iter_mut().zip(&gr) {
                        let a = bk.scale(own, T::one() - gm);
                        let b = bk.scale(other, gm);
                        *own = bk.add(&a, &b);
                    }
                }
                let (chroma, logits) = color.apply(bk, ps, &color_features, &g);
                Ok(Outputs::Decoupled { lightness, chroma, logits })
            }
            Arch::Fused { encoder, decoder } => {
                input.rgb.expect_shape(Shape::new(n, 3, ls.h(), ls.w()))?;
                let x = bk.input(input.rgb.clone());
                let features = encoder.apply(bk, ps, &x);
                let rgb = decoder.apply(bk, ps, &features, &pv);
                Ok(Outputs::Fused { rgb })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eager, Graph};
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn input(n: usize, h: usize, w: usize, seed: u64) -> NetInput<f64> {
        NetInput {
            rgb: rand_tensor(Shape::new(n, 3, h, w), seed, 0.0, 1.0),
            lightness: rand_tensor(Shape::new(n, 1, h, w), seed + 1, 0.0, 1.0),
            chroma: rand_tensor(Shape::new(n, 2, h, w), seed + 2, -0.5, 0.5),
            reference: None,
            gamma: 0.0,
        }
    }

    fn small(config: ModelConfig) -> Bcnet<f64> {
        Bcnet::new(ModelConfig { base_channels: 4, ..config }, 7, 3).unwrap()
    }

    #[test]
    fn sobel_matches_direct_convolution() {
        let (h, w) = (5, 6);
        let l = Tensor::<f64>::from_fn(Shape::new(1, 1, h, w), |[_, _, _, x]| if x >= 3 { 1.0 } else { 0.0 });
        let p = compute_priors(&l).unwrap();
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let pad = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let v = l.at([0, 0, pad(y + dy, h as isize) as usize, pad(x + dx, w as isize) as usize]);
                        gx += kx[(dy + 1) as usize][(dx + 1) as usize] * v;
                        gy += kx[(dx + 1) as usize][(dy + 1) as usize] * v;
                    }
                }
                let e = (gx * gx + gy * gy).sqrt();
                assert!((p.edges.at([0, 0, y as usize, x as usize]) - e).abs() < 1e-12);
            }
        }
        // the step lies between columns 2 and 3
        assert_eq!(p.edges.at([0, 0, 2, 2]), 4.0);
        assert_eq!(p.edges.at([0, 0, 2, 0]), 0.0);
        let flat = compute_priors(&Tensor::<f64>::full(Shape::new(1, 1, 4, 4), 1.0)).unwrap();
        assert!(flat.edges.data().iter().all(|&e| e == 0.0));
        assert!(flat.inverted.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lam_identity_and_annihilation() {
        let f = rand_tensor(Shape::new(2, 3, 4, 4), 1, -1.0, 1.0);
        let identity = PriorMaps { inverted: Tensor::full(Shape::new(2, 1, 8, 8), 1.0), edges: Tensor::zeros(Shape::new(2, 1, 8, 8)) };
        let mut bk = Eager;
        let pv = PriorValues::new(&mut bk, &identity);
        let fv = bk.input(f.clone());
        assert_eq!(*lam_apply(&mut bk, &fv, &pv), f);
        let dark = PriorMaps { inverted: Tensor::zeros(Shape::new(2, 1, 8, 8)), edges: rand_tensor(Shape::new(2, 1, 8, 8), 2, 0.0, 3.0) };
        let pv = PriorValues::new(&mut bk, &dark);
        assert!(lam_apply(&mut bk, &fv, &pv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lam_matches_elementwise_product() {
        let f = rand_tensor(Shape::new(1, 2, 8, 8), 4, -1.0, 1.0);
        let b = rand_tensor(Shape::new(1, 1, 8, 8), 5, 0.0, 1.0);
        let e = rand_tensor(Shape::new(1, 1, 8, 8), 6, 0.0, 2.0);
        let mut bk = Eager;
        let pv = PriorValues::new(&mut bk, &PriorMaps { inverted: b.clone(), edges: e.clone() });
        let fv = bk.input(f.clone());
        let out = lam_apply(&mut bk, &fv, &pv);
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = f.at([0, c, y, x]) * b.at([0, 0, y, x]) * (1.0 + e.at([0, 0, y, x]));
                    assert!((out.at([0, c, y, x]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cem_zero_gates_average_and_step_oracle() {
        let s = Shape::new(1, 3, 4, 4);
        let fl = rand_tensor(s, 7, -1.0, 1.0);
        let fc = rand_tensor(s, 8, -1.0, 1.0);
        let mut bk = Eager;
        let (a, b) = (bk.input(fl.clone()), bk.input(fc.clone()));
        let zw = bk.input(Tensor::zeros(Shape::new(3, 3, 1, 1)));
        let zb = bk.input(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let out = cem_fuse(&mut bk, &a, &b, (&zw, &zb), (&zw, &zb)).unwrap();
        let want = fl.zip_map(&fc, |x, y| 0.5 * (x + y)).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);

        let wl = rand_tensor(Shape::new(3, 3, 1, 1), 9, -1.0, 1.0);
        let bl = rand_tensor(Shape::new(1, 3, 1, 1), 10, -1.0, 1.0);
        let wc = rand_tensor(Shape::new(3, 3, 1, 1), 11, -1.0, 1.0);
        let bc = rand_tensor(Shape::new(1, 3, 1, 1), 12, -1.0, 1.0);
        let vals: Vec<_> = [&wl, &bl, &wc, &bc].iter().map(|t| bk.input((*t).clone())).collect();
        let out = cem_fuse(&mut bk, &a, &b, (&vals[0], &vals[1]), (&vals[2], &vals[3])).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for y in 0..4 {
            for x in 0..4 {
                let sum: Vec<f64> = (0..3).map(|c| fl.at([0, c, y, x]) + fc.at([0, c, y, x])).collect();
                for co in 0..3 {
                    let mut zl = bl.at([0, co, 0, 0]);
                    let mut zc = bc.at([0, co, 0, 0]);
                    for ci in 0..3 {
                        zl += wl.at([co, ci, 0, 0]) * sum[ci];
                        zc += wc.at([co, ci, 0, 0]) * sum[ci];
                    }
                    let (al, ac) = (sig(zl), sig(zc));
                    assert!(al > 0.0 && al < 1.0 && ac > 0.0 && ac < 1.0);
                    let want = fl.at([0, co, y, x]) * al + fc.at([0, co, y, x]) * ac;
                    assert!((out.at([0, co, y, x]) - want).abs() < 1e-12);
                }
            }
        }
        let other = bk.input(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(cem_fuse(&mut bk, &a, &other, (&zw, &zb), (&zw, &zb)).is_err());
    }

    #[test]
    fn encoder_shapes_follow_channel_schedule() {
        let net = Bcnet::<f32>::new(ModelConfig::default(), 10, 0).unwrap();
        let Arch::Decoupled { encoder, .. } = &net.arch else { unreachable!() };
        let mut bk = Eager;
        let x = bk.input(Tensor::<f32>::full(Shape::new(1, 1, 64, 64), 0.3));
        let p = encoder.apply(&mut bk, &net.params, &x);
        let dims: Vec<_> = p.levels.iter().map(|v| (v.shape().c(), v.shape().h())).collect();
        assert_eq!(dims, vec![(16, 64), (32, 32), (64, 16), (128, 8)]);
        assert_eq!(p.bottom.unwrap().shape(), Shape::new(1, 128, 4, 4));
    }

    #[test]
    fn output_shapes_ranges_and_batch_consistency() {
        let net = small(ModelConfig::default());
        let x = input(2, 32, 16, 20);
        let mut bk = Eager;
        let Outputs::Decoupled { lightness, chroma, logits } = net.forward(&mut bk, &x).unwrap() else { unreachable!() };
        assert_eq!(lightness.shape(), Shape::new(2, 1, 32, 16));
        assert_eq!(chroma.shape(), Shape::new(2, 2, 32, 16));
        assert_eq!(logits.as_ref().unwrap().shape(), Shape::new(2, 7, 8, 4));
        assert!(lightness.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(chroma.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        for i in 0..2 {
            let one = NetInput {
                rgb: x.rgb.narrow_batch(i, 1),
                lightness: x.lightness.narrow_batch(i, 1),
                chroma: x.chroma.narrow_batch(i, 1),
                reference: None,
                gamma: 0.0,
            };
            let Outputs::Decoupled { lightness: l1, chroma: c1, .. } = net.forward(&mut bk, &one).unwrap() else { unreachable!() };
            assert!(l1.max_abs_diff(&lightness.narrow_batch(i, 1)) < 1e-12);
            assert!(c1.max_abs_diff(&chroma.narrow_batch(i, 1)) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_dims_and_missing_reference() {
        let net = small(ModelConfig::default());
        let mut bk = Eager;
        assert!(net.forward(&mut bk, &input(1, 24, 16, 0)).is_err());
        let mut x = input(1, 16, 16, 0);
        x.gamma = 0.7;
        assert!(net.forward(&mut bk, &x).is_err());
    }

    #[test]
    fn gamma_zero_ignores_reference_and_equal_operands_cancel() {
        let net = small(ModelConfig::default());
        let mut bk = Eager;
        let base = input(1, 16, 16, 30);
        let chroma_of = |o: Outputs<std::rc::Rc<Tensor<f64>>>| match o {
            Outputs::Decoupled { chroma, .. } => chroma.as_ref().clone(),
            _ => unreachable!(),
        };
        let plain = chroma_of(net.forward(&mut bk, &base).unwrap());
        let mut with_ref = base.clone();
        with_ref.reference = Some(rand_tensor(base.chroma.shape(), 99, -1.0, 1.0));
        assert_eq!(chroma_of(net.forward(&mut bk, &with_ref).unwrap()), plain);
        let mut same = base.clone();
        same.reference = Some(base.chroma.clone());
        same.gamma = 1.0;
        assert!(chroma_of(net.forward(&mut bk, &same).unwrap()).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn ablation_structure() {
        let base = small(ModelConfig::default());
        assert_eq!(base.lam_count(), 5);
        assert_eq!(base.cem_count(), 4);
        let no_lam = small(ModelConfig { use_lam: false, ..Default::default() });
        assert_eq!(no_lam.lam_count(), 0);
        let no_cem = small(ModelConfig { use_cem: false, ..Default::default() });
        assert_eq!((no_cem.cem_count(), no_cem.concat_fusion_count()), (0, 4));
        let no_head = small(ModelConfig { use_class_head: false, ..Default::default() });
        assert!(!no_head.has_class_head());
        let no_share = small(ModelConfig { shared_encoder: false, ..Default::default() });
        assert_eq!(no_share.encoder_count(), 2);
        assert_eq!(no_share.encoder_parameters(), 2 * base.encoder_parameters());
        assert!(no_share.num_parameters() > base.num_parameters());
        let fused = small(ModelConfig { decouple: false, ..Default::default() });
        assert!(!fused.is_decoupled());
        let mut bk = Eager;
        let Outputs::Fused { rgb } = fused.forward(&mut bk, &input(1, 16, 16, 1)).unwrap() else { unreachable!() };
        assert_eq!(rgb.shape(), Shape::new(1, 3, 16, 16));
    }

    #[test]
    fn eval_is_deterministic_and_backends_agree() {
        let net = small(ModelConfig::default());
        let x = input(1, 16, 16, 5);
        let run = || {
            let Outputs::Decoupled { lightness, chroma, .. } = net.forward(&mut Eager, &x).unwrap() else { unreachable!() };
            (lightness.as_ref().clone(), chroma.as_ref().clone())
        };
        assert_eq!(run(), run());
        let mut g = Graph::new();
        let Outputs::Decoupled { lightness, .. } = net.forward(&mut g, &x).unwrap() else { unreachable!() };
        assert_eq!(*g.value(&lightness), run().0);
    }
}
