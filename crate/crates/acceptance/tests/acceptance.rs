//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported, not fatal, so the workspace test run completes; set `ACCEPTANCE_STRICT=1`
//! to turn any FAIL into a non-zero exit.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use bcnet::autograd::{Backend, Eager};
use bcnet::colorspace::{lab_to_srgb, rgb_to_lab, srgb_to_lab, RgbImage};
use bcnet::customize::{amplify_saturation, customize_guidance, reinhard_adapt, AdaptMode, CustomizeParams};
use bcnet::data::{synthetic_pairs, DegradeParams, ImagePair};
use bcnet::image_io::{encode_png, BitDepth};
use bcnet::losses::{charbonnier, l1_chroma, perceptual, ssim_loss, total_loss, FeatureExtractor, LossWeights, EXTRACTOR_SEED};
use bcnet::network::{lam_apply, Bcnet, ModelConfig, NetInput, Outputs, PriorMaps, PriorValues};
use bcnet::quantizer::{build_gamut, decode, soft_encode, ColorGamut, GamutParams};
use bcnet::trainer::{train, Ablation, TrainConfig};
use bcnet::{Model, Shape, Tensor};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---- gamut -------------------------------------------------------------------------------

/// Lab to sRGB, written out independently of the crate's converter.
fn oracle_representable(l: f64, a: f64, b: f64) -> bool {
    let fy = (l + 16.0) / 116.0;
    let (fx, fz) = (fy + a / 500.0, fy - b / 200.0);
    let finv = |t: f64| if t > 6.0 / 29.0 { t * t * t } else { 3.0 * (6.0f64 / 29.0).powi(2) * (t - 4.0 / 29.0) };
    let (x, y, z) = (0.95047 * finv(fx), finv(fy), 1.08883 * finv(fz));
    let rgb = [
        3.2404542 * x - 1.5371385 * y - 0.4985314 * z,
        -0.9692660 * x + 1.8760108 * y + 0.0415560 * z,
        0.0556434 * x - 0.2040259 * y + 1.0572252 * z,
    ];
    rgb.iter().all(|&c| (-1e-6..=1.0 + 1e-6).contains(&c))
}

/// Brute-force search of a cell at half-unit spacing in L, a and b.
fn oracle_cell_has_colour(center: [f64; 2], grid: f64) -> bool {
    let n = (grid / 0.5) as i32;
    (0..=200).any(|il| {
        let l = il as f64 * 0.5;
        (0..=n).any(|ia| (0..=n).any(|ib| oracle_representable(l, center[0] - grid / 2.0 + ia as f64 * 0.5, center[1] - grid / 2.0 + ib as f64 * 0.5)))
    })
}

fn gamut_fidelity() -> Verdict {
    let start = Instant::now();
    let gamut = match build_gamut(&GamutParams::default()) {
        Ok(g) => g,
        Err(e) => return verdict(false, format!("build failed: {e}")),
    };
    let elapsed = start.elapsed();
    let bad: Vec<_> = gamut.centers().iter().filter(|&&c| !oracle_cell_has_colour(c, gamut.grid())).collect();
    let shipped = gamut == ColorGamut::shipped();
    verdict(
        gamut.len() == 313 && bad.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} bins (required 313), {} centers failing the sRGB oracle, build {}, matches shipped fixture: {shipped}",
            gamut.len(),
            bad.len(),
            secs(elapsed)
        ),
    )
}

// ---- colour space ------------------------------------------------------------------------

fn colorspace_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let back = lab_to_srgb(srgb_to_lab(rgb));
        worst = (0..3).map(|c| (back[c] - rgb[c]).abs()).fold(worst, f64::max);
    }
    // the image path in f32, as used by the network
    let img = RgbImage::<f32>::from_fn(100, 100, |_, _| std::array::from_fn(|_| rng.random_range(0.0..=1.0))).unwrap();
    let back = bcnet::colorspace::lab_to_rgb(&rgb_to_lab(&img));
    let worst_f32 = img.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    let neutral = (0..=1000)
        .map(|i| {
            let v = i as f64 / 1000.0;
            let lab = srgb_to_lab([v, v, v]);
            lab[1].abs().max(lab[2].abs())
        })
        .fold(0.0, f64::max);
    verdict(
        worst <= 1e-4 && worst_f32 <= 1e-4 && neutral <= 1e-6,
        format!("max error {worst:.2e} (f64), {worst_f32:.2e} (f32 images); grey-axis chroma {neutral:.2e}"),
    )
}

// ---- quantizer ---------------------------------------------------------------------------

fn quantizer_round_trip() -> Verdict {
    let gamut = ColorGamut::shipped();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let img = RgbImage::<f64>::from_fn(8, 8, |_, _| std::array::from_fn(|_| rng.random_range(0.0..=1.0))).unwrap();
        let c = rgb_to_lab(&img).chroma_tensor();
        let back = match soft_encode(&c, &gamut).and_then(|q| decode(&q, &gamut, 0.01)) {
            Ok(b) => b,
            Err(e) => return verdict(false, e.to_string()),
        };
        worst = worst.max(back.max_abs_diff(&c));
    }
    verdict(worst <= 5.0, format!("max per-channel error {worst:.3} over 100 maps (limit 5.0)"))
}

// ---- gradients ---------------------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let cases = gradcheck::suite();
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let failing: Vec<_> = cases.iter().filter(|c| c.1 > gradcheck::TOLERANCE).map(|c| c.0).collect();
    let listing: Vec<String> = cases.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        failing.is_empty() && elapsed < Duration::from_secs(300),
        format!("worst relative error {worst:.2e} in {}; failing {failing:?} [{}]", secs(elapsed), listing.join(", ")),
    )
}

// ---- identities --------------------------------------------------------------------------

fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    gradcheck::random(shape, seed, lo, hi)
}

fn identities() -> Verdict {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    let f = random(Shape::new(2, 6, 16, 16), 1, -2.0, 2.0);
    let neutral = PriorMaps { inverted: Tensor::full(Shape::new(2, 1, 16, 16), 1.0), edges: Tensor::zeros(Shape::new(2, 1, 16, 16)) };
    let mut bk = Eager;
    let pv = PriorValues::new(&mut bk, &neutral);
    let x = bk.input(f.clone());
    let y = lam_apply(&mut bk, &x, &pv);
    check("LAM identity", bk.value(&y) == &f);

    let model = Bcnet::<f64>::new(ModelConfig { base_channels: 4, ..Default::default() }, ColorGamut::shipped().len(), 3).unwrap();
    let input = NetInput {
        rgb: random(Shape::new(1, 3, 16, 16), 2, 0.0, 1.0),
        lightness: random(Shape::new(1, 1, 16, 16), 3, 0.0, 0.5),
        chroma: random(Shape::new(1, 2, 16, 16), 4, -0.2, 0.2),
        reference: None,
        gamma: 0.0,
    };
    let with_ref = NetInput { reference: Some(random(Shape::new(1, 2, 16, 16), 5, -0.5, 0.5)), ..input.clone() };
    let run = |i: &NetInput<f64>| match model.forward(&mut Eager, i).unwrap() {
        Outputs::Decoupled { lightness, chroma, .. } => (lightness.as_ref().clone(), chroma.as_ref().clone()),
        Outputs::Fused { rgb } => (rgb.as_ref().clone(), rgb.as_ref().clone()),
    };
    check("gamma=0 reference no-op", run(&input) == run(&with_ref));

    let img = RgbImage::<f64>::from_fn(8, 8, |y, x| [0.1 + 0.05 * y as f64, 0.3, 0.02 * x as f64]).unwrap();
    let c = rgb_to_lab(&img).chroma_tensor();
    let g = customize_guidance(&c, &CustomizeParams::default()).unwrap();
    check("omega=0 no-op", amplify_saturation(&c, 0.0) == c && g.chroma == c);
    check("Reinhard self-transfer", reinhard_adapt(&c, &c, AdaptMode::Standard).unwrap().max_abs_diff(&c) < 1e-9);

    let p = random(Shape::new(1, 1, 16, 16), 6, 0.0, 1.0);
    let chroma = random(Shape::new(1, 2, 16, 16), 7, -1.0, 1.0);
    let rgb = random(Shape::new(1, 3, 16, 16), 8, 0.0, 1.0);
    let ex = FeatureExtractor::<f64>::seeded(3, EXTRACTOR_SEED);
    let zero_terms = (charbonnier(&p, &p).unwrap() - bcnet::losses::CHARBONNIER_EPS).abs() < 1e-15
        && ssim_loss(&p, &p).unwrap().abs() < 1e-12
        && l1_chroma(&chroma, &chroma).unwrap() == 0.0
        && perceptual(&rgb, &rgb, &ex).unwrap() == 0.0;
    check("loss terms vanish at the target", zero_terms);

    let weights = LossWeights { rec_l: 0.5, ssim: 0.2, tv: 0.03, rec_c: 1.5, perceptual: 0.1, class: 0.02 };
    let terms = [0.31, 0.12, 0.05, 0.22, 0.7, 2.4];
    let report = total_loss(terms, &weights).unwrap();
    let expected: f64 = terms.iter().zip(weights.as_array()).map(|(t, w)| t * w).sum();
    check("total is the weighted sum", (report.total - expected).abs() < 1e-15);

    verdict(failed.is_empty(), if failed.is_empty() { "all six hold".to_string() } else { format!("violated: {failed:?}") })
}

// ---- ablations ---------------------------------------------------------------------------

fn ablation_structure() -> Verdict {
    let gamut = ColorGamut::shipped();
    let base = TrainConfig::default();
    let build = |c: &TrainConfig| Model::new(c.model, gamut.len(), 0).unwrap();
    let baseline = build(&base);
    let mut notes = Vec::new();
    let mut ok = baseline.lam_count() == 5 && baseline.cem_count() == 4 && baseline.has_class_head();
    for ab in Ablation::ALL {
        let cfg = ab.apply(&base);
        let m = build(&cfg);
        let (pass, note) = match ab {
            Ablation::NoLam => (m.lam_count() == 0, format!("LAMs {}", m.lam_count())),
            Ablation::NoCem => (
                m.cem_count() == 0 && m.concat_fusion_count() == 4,
                format!("CEMs {}, concat fusions {}", m.cem_count(), m.concat_fusion_count()),
            ),
            Ablation::NoLq => (
                cfg.weights.class == 0.0 && !m.has_class_head(),
                format!("class weight {}, head {}", cfg.weights.class, m.has_class_head()),
            ),
            Ablation::NoShare => (
                m.num_parameters() > baseline.num_parameters() && m.encoder_count() == 2,
                format!("{} > {} parameters", m.num_parameters(), baseline.num_parameters()),
            ),
            Ablation::NoDecouple => (
                !m.is_decoupled() && m.encoder_count() == 1,
                format!("decoupled {}, encoders {}", m.is_decoupled(), m.encoder_count()),
            ),
        };
        ok &= pass;
        notes.push(format!("{ab}: {note}"));
    }
    verdict(ok, notes.join("; "))
}

// ---- overfit -----------------------------------------------------------------------------

struct OverfitRun {
    seed: u64,
    psnr: f64,
    delta_e: f64,
    steps: u64,
    elapsed: Duration,
    model: Model,
    bytes: Vec<u8>,
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, eval_every: 100, stop_psnr: Some(30.0), stop_delta_e: Some(5.0), log_every: 0, ..TrainConfig::default() }
}

fn overfit() -> (Verdict, Option<OverfitRun>) {
    let start = Instant::now();
    let handles: Vec<_> = (0..3u64)
        .map(|seed| {
            std::thread::spawn(move || -> bcnet::Result<OverfitRun> {
                let t0 = Instant::now();
                let config = overfit_config(seed);
                let pairs = config.data.load::<f32>()?;
                let out = train(config, pairs, ColorGamut::shipped(), None)?;
                let eval = out.summary.eval.clone().expect("final evaluation");
                Ok(OverfitRun {
                    seed,
                    psnr: eval.mean.psnr,
                    delta_e: eval.mean.delta_e,
                    steps: out.summary.steps_run,
                    elapsed: t0.elapsed(),
                    bytes: out.checkpoint.to_bytes()?,
                    model: out.checkpoint.model,
                })
            })
        })
        .collect();
    let mut runs = Vec::new();
    for h in handles {
        match h.join().expect("training thread") {
            Ok(r) => runs.push(r),
            Err(e) => return (verdict(false, format!("training failed: {e}")), None),
        }
    }
    let wall = start.elapsed();
    runs.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
    let mut de: Vec<f64> = runs.iter().map(|r| r.delta_e).collect();
    de.sort_by(f64::total_cmp);
    let (median_psnr, median_de) = (runs[1].psnr, de[1]);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.2} dB dE {:.2} after {} steps in {}", r.seed, r.psnr, r.delta_e, r.steps, secs(r.elapsed)))
        .collect();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = median_psnr >= 30.0 && median_de <= 5.0 && wall <= Duration::from_secs(20 * 60);
    let detail = format!(
        "median PSNR {median_psnr:.2} dB (>= 30), median dE {median_de:.2} (<= 5), wall {} on {cores} core(s) [{}]",
        secs(wall),
        per_seed.join("; ")
    );
    (verdict(pass, detail), Some(runs.swap_remove(1)))
}

// ---- customization -----------------------------------------------------------------------

fn fixture_images() -> Vec<ImagePair<f32>> {
    synthetic_pairs(5, 64, 4242, &DegradeParams::default()).expect("fixture synthesis")
}

fn mean_output_chroma(img: &RgbImage<f32>) -> f64 {
    let lab = rgb_to_lab(&img.cast::<f64>());
    let (a, b) = (lab.a(), lab.b());
    a.iter().zip(b).map(|(x, y)| x.hypot(*y)).sum::<f64>() / a.len() as f64
}

fn customization(model: &Model) -> Verdict {
    let references = [
        None,
        Some(RgbImage::<f32>::from_fn(32, 32, |y, _| [0.9, 0.35 + 0.01 * y as f32, 0.1]).unwrap()),
        Some(RgbImage::<f32>::from_fn(24, 40, |_, x| [0.1, 0.3, 0.5 + 0.01 * x as f32]).unwrap()),
    ];
    let mut identical = true;
    let mut monotone = 0;
    let mut trends = Vec::new();
    for pair in fixture_images() {
        let base = model.enhance(&pair.low, &CustomizeParams::default()).unwrap();
        let mut chroma = Vec::new();
        for omega in [0.0, 0.5, 1.0] {
            for reference in &references {
                let gamma = if reference.is_some() { 0.7 } else { 0.0 };
                let params = CustomizeParams { omega, gamma, reference: reference.clone(), ..Default::default() };
                let out = model.enhance(&pair.low, &params).unwrap();
                identical &= out.lightness == base.lightness;
                if reference.is_none() {
                    chroma.push(mean_output_chroma(&out.rgb));
                }
            }
        }
        if chroma.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
        trends.push(chroma.iter().map(|c| format!("{c:.1}")).collect::<Vec<_>>().join("/"));
    }
    verdict(
        identical && monotone >= 4,
        format!(
            "lightness bit-identical across omega and references: {identical}; chroma non-decreasing in omega on {monotone}/5 images [{}]",
            trends.join(", ")
        ),
    )
}

// ---- service -----------------------------------------------------------------------------

fn service_determinism(checkpoint: &[u8]) -> Verdict {
    let state = bcnet_service::AppState::new(ColorGamut::shipped(), Default::default());
    if let Err(e) = state.load_bytes(checkpoint) {
        return verdict(false, format!("checkpoint refused: {e}"));
    }
    let app = bcnet_service::router(state);
    let png = encode_png(&fixture_images()[0].low, BitDepth::Eight).unwrap();
    let request = |omega: &str| {
        let boundary = "acceptanceBoundary";
        let mut body = format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n").into_bytes();
        body.extend_from_slice(&png);
        body.extend_from_slice(format!("\r\n--{boundary}\r\nContent-Disposition: form-data; name=\"omega\"\r\n\r\n{omega}\r\n--{boundary}--\r\n").as_bytes());
        Request::post("/api/enhance")
            .header("content-type", format!("multipart/form-data; boundary={boundary}"))
            .body(Body::from(body))
            .unwrap()
    };
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let responses: Vec<(StatusCode, Vec<u8>, String)> = runtime.block_on(async {
        let mut out = Vec::new();
        for omega in ["0.5", "0.5", "0.5", "0"] {
            let resp = app.clone().oneshot(request(omega)).await.unwrap();
            let status = resp.status();
            let digest = resp
                .headers()
                .get(bcnet_service::METADATA_HEADER)
                .and_then(|v| serde_json::from_slice::<bcnet_service::EnhanceMetadata>(v.as_bytes()).ok())
                .map(|m| m.lightness_sha256)
                .unwrap_or_default();
            out.push((status, resp.into_body().collect().await.unwrap().to_bytes().to_vec(), digest));
        }
        out
    });
    let all_ok = responses.iter().all(|r| r.0 == StatusCode::OK && !r.2.is_empty());
    let same = responses[..3].windows(2).all(|w| w[0].1 == w[1].1);
    let differs = responses[3].1 != responses[0].1;
    let lightness_kept = responses.iter().all(|r| r.2 == responses[0].2);
    verdict(
        all_ok && same && lightness_kept,
        format!(
            "3 identical requests byte-identical: {same}; lightness digest unchanged across omega: {lightness_kept}; \
             other omega changes the PNG: {differs}; studio not built"
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("gamut fidelity", gamut_fidelity());
    report("colorspace round trip", colorspace_round_trip());
    report("quantizer round trip", quantizer_round_trip());
    report("gradient suite", gradient_suite());
    report("exact identities", identities());
    report("ablation structure", ablation_structure());
    let (v, run) = overfit();
    report("overfit sanity", v);
    match run {
        Some(run) => {
            report("customization behaviour", customization(&run.model));
            report("service determinism", service_determinism(&run.bytes));
        }
        None => {
            report("customization behaviour", verdict(false, "no trained model"));
            report("service determinism", verdict(false, "no trained model"));
        }
    }
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
