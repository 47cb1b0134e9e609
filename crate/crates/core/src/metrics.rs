//! Full-reference image quality: PSNR, SSIM and mean CIELAB distance.

use serde::{Deserialize, Serialize};

use crate::colorspace::{srgb_to_lab, RgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_dims<T: Scalar>(a: &RgbImage<T>, b: &RgbImage<T>) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all RGB samples in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &RgbImage<T>, b: &RgbImage<T>) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over the three RGB channels.
pub fn ssim_metric<T: Scalar>(a: &RgbImage<T>, b: &RgbImage<T>) -> Result<f64> {
    same_dims(a, b)?;
    let (x, y) = (a.cast::<f64>().to_tensor(), b.cast::<f64>().to_tensor());
    crate::ssim::ssim(&x, &y)
}

/// Mean per-pixel Euclidean distance between CIELAB triples.
pub fn delta_e_ab<T: Scalar>(a: &RgbImage<T>, b: &RgbImage<T>) -> Result<f64> {
    same_dims(a, b)?;
    let mut total = 0.0;
    let pa = a.pixels().chunks_exact(3);
    let pb = b.pixels().chunks_exact(3);
    let n = pa.len();
    for (p, q) in pa.zip(pb) {
        let la = srgb_to_lab([0, 1, 2].map(|i| p[i].to_f64_lossy()));
        let lb = srgb_to_lab([0, 1, 2].map(|i| q[i].to_f64_lossy()));
        total += (0..3).map(|i| (la[i] - lb[i]).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl ImageScores {
    pub fn compute<T: Scalar>(id: &str, output: &RgbImage<T>, reference: &RgbImage<T>) -> Result<Self> {
        Ok(ImageScores {
            id: id.to_string(),
            psnr: psnr(output, reference)?,
            ssim: ssim_metric(output, reference)?,
            delta_e: delta_e_ab(output, reference)?,
        })
    }
}

/// Per-image rows plus their means. LPIPS and CSE are not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ImageScores>,
    pub mean: ImageScores,
    pub omitted_metrics: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ImageScores>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = ImageScores {
            id: "mean".into(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            delta_e: rows.iter().map(|r| r.delta_e).sum::<f64>() / n,
        };
        EvalReport { rows, mean, omitted_metrics: vec!["lpips".into(), "cse".into()] }
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut s = format!("{:<width$}  {:>8}  {:>7}  {:>8}\n", "id", "PSNR", "SSIM", "dE_ab");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!("{:<width$}  {:>8.3}  {:>7.4}  {:>8.3}\n", r.id, r.psnr, r.ssim, r.delta_e));
        }
        s.push_str(&format!("not computed: {}\n", self.omitted_metrics.join(", ")));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(seed: u64, size: usize) -> RgbImage<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn psnr_cap_and_uniform_offset() {
        let a = RgbImage::<f64>::filled(16, 16, [0.2, 0.4, 0.6]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = RgbImage::<f64>::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (a, b) = (noise(1, 12), noise(2, 12));
        let mut se = 0.0;
        for y in 0..12 {
            for x in 0..12 {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                se += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
            }
        }
        let want = 10.0 * (12.0 * 12.0 * 3.0 / se).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_noise() {
        let (a, b) = (noise(3, 64), noise(4, 64));
        assert!((ssim_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_metric(&a, &b).unwrap(), ssim_metric(&b, &a).unwrap());
        assert!(ssim_metric(&a, &b).unwrap().abs() < 0.1);
    }

    #[test]
    fn delta_e_axis_and_identity() {
        let black = RgbImage::<f64>::filled(4, 4, [0.0; 3]).unwrap();
        let white = RgbImage::<f64>::filled(4, 4, [1.0; 3]).unwrap();
        assert!((delta_e_ab(&black, &white).unwrap() - 100.0).abs() < 1e-9);
        let a = noise(5, 8);
        assert_eq!(delta_e_ab(&a, &a).unwrap(), 0.0);
        assert!(delta_e_ab(&a, &noise(6, 9)).is_err());
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let rows = vec![
            ImageScores { id: "a".into(), psnr: 20.0, ssim: 0.5, delta_e: 4.0 },
            ImageScores { id: "b".into(), psnr: 30.0, ssim: 0.7, delta_e: 2.0 },
        ];
        let r = EvalReport::from_rows(rows);
        assert_eq!((r.mean.psnr, r.mean.delta_e), (25.0, 3.0));
        assert!((r.mean.ssim - 0.6).abs() < 1e-12);
        assert!(r.to_table().lines().count() == 5);
    }
}
