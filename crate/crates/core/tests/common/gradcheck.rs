// Central finite-difference oracle for the gradient suite. Shared by the core gradient
// tests and the acceptance target.
#![allow(dead_code)]


use bcnet::autograd::{Backend, Eager, Graph, Var};
use bcnet::losses::{class_targets, FeatureExtractor, EXTRACTOR_SEED};
use bcnet::network::{cem_fuse, compute_priors, lam_apply, Bcnet, ModelConfig, NetInput, Outputs, PriorValues};
use bcnet::quantizer::ColorGamut;
use bcnet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

pub fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `max |analytic - numeric| / max(|numeric|)` over the compared entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let err = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().chain(analytic).map(|v| v.abs()).fold(1e-8, f64::max);
    err / scale
}

/// Compares the gradient of a scalar graph function of one tensor against central differences
/// at every entry.
pub fn leaf_error(x: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = build(&mut g, v);
    let grads = g.backward(out);
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let o = build(&mut g, v);
        g.scalar(o)
    };
    let mut numeric = vec![0.0; x.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        *n = (eval(&xp) - eval(&xm)) / (2.0 * STEP);
    }
    relative_error(analytic.data(), &numeric)
}

/// Like [`leaf_error`] for piecewise-smooth functions. When an entry's central difference
/// changes under a tenfold smaller step its stencil straddles a kink, and the entry is
/// re-measured with a step a hundred times smaller. Returns the error and the count re-measured.
pub fn piecewise_error(x: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> (f64, usize) {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = build(&mut g, v);
    let grads = g.backward(out);
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let scale = analytic.data().iter().fold(1e-8, |m: f64, v| m.max(v.abs()));
    let central = |i: usize, h: f64| {
        let eval = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += d;
            let mut g = Graph::new();
            let v = g.leaf(t);
            let o = build(&mut g, v);
            g.scalar(o)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    };
    let mut refined = 0;
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let coarse = central(i, STEP);
            if (coarse - central(i, STEP / 10.0)).abs() > 0.1 * TOLERANCE * scale {
                refined += 1;
                central(i, STEP / 100.0)
            } else {
                coarse
            }
        })
        .collect();
    (relative_error(analytic.data(), &numeric), refined)
}

pub fn charbonnier_error() -> f64 {
    let target = random(Shape::new(2, 1, 8, 8), 2, 0.0, 1.0);
    leaf_error(&random(Shape::new(2, 1, 8, 8), 1, 0.0, 1.0), |g, p| {
        let t = g.input(target.clone());
        g.charbonnier(p, t, 1e-3)
    })
}

/// The SSIM window spans 11 pixels, so this term runs on 16x16 maps.
pub fn ssim_error() -> f64 {
    let target = random(Shape::new(2, 1, 16, 16), 4, 0.0, 1.0);
    leaf_error(&random(Shape::new(2, 1, 16, 16), 3, 0.0, 1.0), |g, p| {
        let t = g.input(target.clone());
        g.ssim_loss(p, t).unwrap()
    })
}

/// On a 0.02 lattice every neighbour difference is zero or far wider than the step, so no
/// stencil crosses the kink of the absolute value.
pub fn tv_error() -> f64 {
    let x = random(Shape::new(2, 1, 8, 8), 5, 0.0, 1.0).map(|v| (v * 50.0).round() / 50.0);
    leaf_error(&x, |g, p| g.total_variation(p))
}

pub fn l1_chroma_error() -> f64 {
    // keep every residual well away from the kink at zero
    let pred = random(Shape::new(2, 2, 8, 8), 6, -0.8, 0.8);
    let offset = random(pred.shape(), 7, -0.25, 0.25).map(|v| v + 0.05 * v.signum());
    let target = pred.zip_map(&offset, |p, o| p + o).unwrap();
    leaf_error(&pred, |g, p| {
        let t = g.input(target.clone());
        g.l1(p, t)
    })
}

pub fn class_error() -> f64 {
    let gamut = ColorGamut::shipped();
    let chroma = random(Shape::new(1, 2, 8, 8), 8, -0.5, 0.5);
    let q = class_targets(&chroma, &gamut).unwrap();
    leaf_error(&random(q.shape(), 9, -2.0, 2.0), |g, z| {
        let t = g.input(q.clone());
        g.soft_cross_entropy(z, t)
    })
}

/// The extractor's leaky units make this piecewise smooth; see [`piecewise_error`].
pub fn perceptual_error() -> f64 {
    let extractor = FeatureExtractor::<f64>::seeded(3, EXTRACTOR_SEED);
    let x = random(Shape::new(1, 3, 8, 8), 10, -0.5, 0.5);
    let target = random(Shape::new(1, 3, 8, 8), 11, -0.5, 0.5);
    piecewise_error(&x, |g, p| {
        let t = g.input(target.clone());
        extractor.distance(g, p, t)
    })
    .0
}

/// Feature maps at full and half prior resolution, so the prior resize path is covered.
pub fn lam_error() -> f64 {
    let lightness = random(Shape::new(2, 1, 8, 8), 12, 0.0, 1.0);
    let priors = compute_priors(&lightness).unwrap();
    [Shape::new(2, 3, 8, 8), Shape::new(2, 3, 4, 4)]
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let target = random(s, 20 + i as u64, -1.0, 1.0);
            leaf_error(&random(s, 13 + i as u64, -1.0, 1.0), |g, f| {
                let pv = PriorValues::new(g, &priors);
                let y = lam_apply(g, &f, &pv);
                let t = g.input(target.clone());
                g.mse(y, t)
            })
        })
        .fold(0.0, f64::max)
}

/// Gradients with respect to both feature maps and all four gate tensors.
pub fn cem_error() -> f64 {
    let s = Shape::new(2, 4, 8, 8);
    let operands = [
        random(s, 30, -1.0, 1.0),
        random(s, 31, -1.0, 1.0),
        random(Shape::new(4, 4, 1, 1), 32, -0.8, 0.8),
        random(Shape::new(1, 4, 1, 1), 33, -0.3, 0.3),
        random(Shape::new(4, 4, 1, 1), 34, -0.8, 0.8),
        random(Shape::new(1, 4, 1, 1), 35, -0.3, 0.3),
    ];
    let target = random(s, 36, -1.0, 1.0);
    (0..operands.len())
        .map(|which| {
            leaf_error(&operands[which].clone(), |g, v| {
                let vars: Vec<Var> =
                    (0..operands.len()).map(|i| if i == which { v } else { g.input(operands[i].clone()) }).collect();
                let y = cem_fuse(g, &vars[0], &vars[1], (&vars[2], &vars[3]), (&vars[4], &vars[5])).unwrap();
                let t = g.input(target.clone());
                g.mse(y, t)
            })
        })
        .fold(0.0, f64::max)
}

fn decoder_input(seed: u64) -> NetInput<f64> {
    let s = |c| Shape::new(2, c, 16, 16);
    NetInput {
        rgb: random(s(3), seed, 0.0, 1.0),
        lightness: random(s(1), seed + 1, 0.0, 0.6),
        chroma: random(s(2), seed + 2, -0.3, 0.3),
        reference: None,
        gamma: 0.0,
    }
}

/// Loss over one decoder's outputs, on whichever backend.
fn decoder_loss<B: Backend<f64>>(
    bk: &mut B,
    out: &Outputs<B::Value>,
    colorize: bool,
    targets: &(Tensor<f64>, Tensor<f64>, Tensor<f64>),
    mse: impl Fn(&mut B, &B::Value, &B::Value) -> B::Value,
) -> B::Value {
    let Outputs::Decoupled { lightness, chroma, logits } = out else { panic!("decoupled model expected") };
    if !colorize {
        let t = bk.input(targets.0.clone());
        return mse(bk, lightness, &t);
    }
    let t = bk.input(targets.1.clone());
    let a = mse(bk, chroma, &t);
    let z = logits.as_ref().expect("class head present");
    let tz = bk.input(targets.2.clone());
    let b = mse(bk, z, &tz);
    bk.add(&a, &b)
}

/// Gradient of a decoder loss with respect to that decoder's parameters (a fixed sample of
/// entries from every tensor) on a 16x16 batch, the smallest size the four-level pyramid takes.
pub fn decoder_error(colorize: bool) -> f64 {
    let gamut = ColorGamut::shipped();
    let model = Bcnet::<f64>::new(ModelConfig { base_channels: 4, ..Default::default() }, gamut.len(), 5).unwrap();
    let input = decoder_input(40);
    let targets = (
        random(Shape::new(2, 1, 16, 16), 50, 0.0, 1.0),
        random(Shape::new(2, 2, 16, 16), 51, -0.5, 0.5),
        random(Shape::new(2, gamut.len(), 4, 4), 52, -0.1, 0.1),
    );
    let prefix = if colorize { "colorize." } else { "brighten." };

    let mut g = Graph::new();
    let out = model.forward(&mut g, &input).unwrap();
    let loss = decoder_loss(&mut g, &out, colorize, &targets, |g, a, b| g.mse(*a, *b));
    let grads = g.backward(loss);
    let analytic: Vec<_> =
        g.param_grads(&grads).into_iter().filter(|(id, _)| model.params().name(*id).starts_with(prefix)).collect();
    assert!(!analytic.is_empty());

    let eval = |m: &Bcnet<f64>| {
        let mut bk = Eager;
        let out = m.forward(&mut bk, &input).unwrap();
        let mse = |_: &mut Eager, a: &std::rc::Rc<Tensor<f64>>, b: &std::rc::Rc<Tensor<f64>>| {
            let n = a.len() as f64;
            let v = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
            std::rc::Rc::new(Tensor::scalar(v))
        };
        let v = decoder_loss(&mut bk, &out, colorize, &targets, mse);
        v.data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
    for (id, grad) in &analytic {
        for _ in 0..4 {
            let i = rng.random_range(0..grad.len());
            let mut plus = model.clone();
            plus.params_mut().get_mut(*id).data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.params_mut().get_mut(*id).data_mut()[i] -= STEP;
            a_all.push(grad.data()[i]);
            n_all.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
        }
    }
    relative_error(&a_all, &n_all)
}

/// Every case of the suite with its relative error.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("charbonnier", charbonnier_error()),
        ("ssim_loss", ssim_error()),
        ("tv_loss", tv_error()),
        ("l1_chroma", l1_chroma_error()),
        ("class_loss", class_error()),
        ("perceptual", perceptual_error()),
        ("lam_apply", lam_error()),
        ("cem_fuse", cem_error()),
        ("brightening decoder", decoder_error(false)),
        ("colorization decoder", decoder_error(true)),
    ]
}
