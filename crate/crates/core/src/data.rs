//! Paired low/normal-light datasets: directory loading, procedural synthetic pairs, and
//! aligned crop/rotate augmentation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_rgb, rgb_to_lab, RgbImage};
use crate::error::{Error, Result};
use crate::image_io::{read_png, write_png, BitDepth};
use crate::network::SIZE_MULTIPLE;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub id: String,
    pub low: RgbImage<T>,
    pub normal: RgbImage<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(id: impl Into<String>, low: RgbImage<T>, normal: RgbImage<T>) -> Result<Self> {
        let id = id.into();
        if (low.height(), low.width()) != (normal.height(), normal.width()) {
            return Err(Error::Validation(format!(
                "pair {id}: low {}x{} vs normal {}x{}",
                low.height(),
                low.width(),
                normal.height(),
                normal.width()
            )));
        }
        Ok(ImagePair { id, low, normal })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub low: PathBuf,
    pub high: PathBuf,
    pub split: String,
}

/// Pairs either held in memory or read from disk on demand, in a fixed order.
#[derive(Debug, Clone)]
pub enum Dataset<T> {
    Files(Vec<PairEntry>),
    Memory(Vec<ImagePair<T>>),
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Files(e) => e.len(),
            Dataset::Memory(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self, i: usize) -> &str {
        match self {
            Dataset::Files(e) => &e[i].id,
            Dataset::Memory(p) => &p[i].id,
        }
    }

    pub fn get(&self, i: usize) -> Result<ImagePair<T>> {
        match self {
            Dataset::Files(e) => {
                let e = &e[i];
                ImagePair::new(e.id.clone(), read_png(&e.low)?, read_png(&e.high)?)
            }
            Dataset::Memory(p) => Ok(p[i].clone()),
        }
    }

    /// Reads every pair into memory.
    pub fn materialize(&self) -> Result<Vec<ImagePair<T>>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Decode { path: dir.to_path_buf(), message: e.to_string() })?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Matches PNG files by name across the two directories, sorted by name.
pub fn load_pairs<T: Scalar>(low_dir: &Path, high_dir: &Path) -> Result<Dataset<T>> {
    let low = png_names(low_dir)?;
    let high = png_names(high_dir)?;
    let orphans: Vec<String> = low
        .symmetric_difference(&high)
        .map(|n| if low.contains(n) { low_dir.join(n) } else { high_dir.join(n) })
        .map(|p| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans));
    }
    let entries = low
        .iter()
        .map(|name| PairEntry {
            id: name.trim_end_matches(".png").trim_end_matches(".PNG").to_string(),
            low: low_dir.join(name),
            high: high_dir.join(name),
            split: "train".into(),
        })
        .collect();
    Ok(Dataset::Files(entries))
}

/// Parameters of the synthetic low-light degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    /// Per-image exponent drawn uniformly from this range (values above 1 darken).
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub noise_sigma: f64,
    /// Fraction of chrominance removed, in `[0, 1]`.
    pub desat: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams { gamma_min: 1.8, gamma_max: 2.6, noise_sigma: 0.002, desat: 0.3 }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_min > 0.0
            && self.gamma_max >= self.gamma_min
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.desat);
        if !ok {
            return Err(Error::Config(format!("invalid degradation parameters {self:?}")));
        }
        Ok(())
    }
}

/// Darkens by a power curve, adds Gaussian noise, then scales Lab chrominance by `1 - desat`.
pub fn synth_darken<T: Scalar>(img: &RgbImage<T>, params: &DegradeParams, seed: u64) -> Result<ImagePair<T>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = if params.gamma_max > params.gamma_min {
        rng.random_range(params.gamma_min..=params.gamma_max)
    } else {
        params.gamma_min
    };
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| {
            let mut x = v.to_f64_lossy().powf(gamma);
            if params.noise_sigma > 0.0 {
                x += noise.sample(&mut rng);
            }
            T::from_f64_lossy(x.clamp(0.0, 1.0))
        })
        .collect();
    let mut low = RgbImage::new(img.height(), img.width(), pixels)?;
    if params.desat > 0.0 {
        let lab = rgb_to_lab(&low);
        let keep = T::from_f64_lossy(1.0 - params.desat);
        let chroma = lab.chroma().iter().map(|&c| c * keep).collect();
        low = lab_to_rgb(&lab.with_chroma(chroma)?);
    }
    ImagePair::new(format!("synth-{seed:016x}"), low, img.clone())
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum Shape2d {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

/// Colourful piecewise-smooth test scene: a two-colour gradient with discs and boxes,
/// some carrying a sinusoidal texture.
pub fn procedural_scene<T: Scalar>(height: usize, width: usize, seed: u64) -> RgbImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| hsv(rng.random(), rng.random_range(0.35..0.95), rng.random_range(0.35..1.0));
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let count = rng.random_range(3..=6);
    let mut shapes = Vec::new();
    for _ in 0..count {
        let (h, w) = (height as f64, width as f64);
        let shape = if rng.random_bool(0.5) {
            Shape2d::Disc { cy: rng.random_range(0.0..h), cx: rng.random_range(0.0..w), r: rng.random_range(0.08..0.3) * h.min(w) }
        } else {
            let (y0, x0) = (rng.random_range(0.0..h * 0.8), rng.random_range(0.0..w * 0.8));
            Shape2d::Rect { y0, x0, y1: y0 + rng.random_range(0.1..0.5) * h, x1: x0 + rng.random_range(0.1..0.5) * w }
        };
        let fill = color(&mut rng);
        let texture = rng.random_bool(0.4).then(|| (rng.random_range(0.2..0.8), rng.random_range(0.0..3.0), rng.random_range(0.04..0.12)));
        shapes.push((shape, fill, texture));
    }
    RgbImage::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = ((fy / height as f64 - 0.5) * dy + (fx / width as f64 - 0.5) * dx + 0.5).clamp(0.0, 1.0);
        let mut px = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        for (shape, fill, texture) in &shapes {
            let inside = match *shape {
                Shape2d::Disc { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
                Shape2d::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
            };
            if inside {
                let wave = texture.map_or(0.0, |(freq, phase, amp)| amp * (freq * (fy + fx) + phase).sin());
                px = fill.map(|c| c + wave);
            }
        }
        px.map(|v| T::from_f64_lossy(v.clamp(0.0, 1.0)))
    })
    .expect("procedural scene is valid")
}

/// Seed of item `index` in a dataset generated from `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// `count` procedural scenes of `size x size` with their degraded counterparts.
pub fn synthetic_pairs<T: Scalar>(count: usize, size: usize, seed: u64, params: &DegradeParams) -> Result<Vec<ImagePair<T>>> {
    (0..count)
        .map(|i| {
            let s = item_seed(seed, i);
            let scene = procedural_scene(size, size, s);
            let mut pair = synth_darken(&scene, params, s ^ 0x9e37_79b9_7f4a_7c15)?;
            pair.id = format!("{i:04}");
            Ok(pair)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub degrade: DegradeParams,
    pub pairs: Vec<PairEntry>,
}

/// Writes `low/` and `high/` 16-bit PNGs plus `manifest.json` under `out`.
pub fn write_synthetic_dataset(out: &Path, count: usize, size: usize, seed: u64, params: &DegradeParams) -> Result<Manifest> {
    let pairs = synthetic_pairs::<f64>(count, size, seed, params)?;
    let (low_dir, high_dir) = (out.join("low"), out.join("high"));
    std::fs::create_dir_all(&low_dir)?;
    std::fs::create_dir_all(&high_dir)?;
    let mut entries = Vec::new();
    for p in &pairs {
        let name = format!("{}.png", p.id);
        write_png(&p.low, &low_dir.join(&name), BitDepth::Sixteen)?;
        write_png(&p.normal, &high_dir.join(&name), BitDepth::Sixteen)?;
        entries.push(PairEntry {
            id: p.id.clone(),
            low: PathBuf::from("low").join(&name),
            high: PathBuf::from("high").join(&name),
            split: "train".into(),
        });
    }
    let manifest = Manifest { seed, size, degrade: *params, pairs: entries };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Same random crop window and quarter-turn rotation applied to both images.
pub fn augment<T: Scalar>(pair: &ImagePair<T>, crop: usize, seed: u64) -> Result<ImagePair<T>> {
    let (h, w) = (pair.low.height(), pair.low.width());
    if crop == 0 || crop > h.min(w) || crop % SIZE_MULTIPLE != 0 {
        return Err(Error::Validation(format!(
            "crop {crop} must be a multiple of {SIZE_MULTIPLE} no larger than {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let turns = rng.random_range(0..4);
    let t = |img: &RgbImage<T>| img.crop(top, left, crop, crop).map(|c| c.rotate90(turns));
    Ok(ImagePair { id: pair.id.clone(), low: t(&pair.low)?, normal: t(&pair.normal)? })
}
