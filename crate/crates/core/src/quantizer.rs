//! Quantized ab gamut, soft-encoding of chrominance into per-pixel bin distributions,
//! and annealed-mean decoding back to chrominance.
//!
//! Chrominance handled here is in CIELAB units (not network range).

use sha2::{Digest, Sha256};

use crate::colorspace::{in_srgb_gamut, AB_BOUND, L_MAX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Neighbours that receive mass during soft-encoding.
pub const SOFT_NEIGHBOURS: usize = 5;
/// Gaussian kernel width (ab units) for soft-encoding.
pub const SOFT_SIGMA: f64 = 5.0;
/// Default annealed-mean temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.38;

const SHIPPED_FIXTURE: &str = include_str!("../fixtures/gamut_v1.txt");

/// Sampling used to decide whether a lattice cell holds an sRGB colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GamutParams {
    pub grid: f64,
    pub l_step: f64,
    pub ab_step: f64,
}

impl Default for GamutParams {
    fn default() -> Self {
        GamutParams { grid: 10.0, l_step: 1.0, ab_step: 1.0 }
    }
}

/// Lattice points of the ab plane whose cells contain sRGB-representable colours.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorGamut {
    grid: f64,
    centers: Vec<[f64; 2]>,
    /// lattice side length and lattice -> bin lookup
    side: usize,
    lattice: Vec<Option<u16>>,
}

impl ColorGamut {
    fn from_centers(grid: f64, centers: Vec<[f64; 2]>) -> Result<Self> {
        let side = (2.0 * AB_BOUND / grid).round() as usize + 1;
        let mut lattice = vec![None; side * side];
        for (i, c) in centers.iter().enumerate() {
            let (ia, ib) = lattice_coords(grid, *c);
            let (Some(ia), Some(ib)) = (ia, ib) else {
                return Err(Error::Validation(format!("center {c:?} is off the lattice")));
            };
            let slot = &mut lattice[ia * side + ib];
            if slot.is_some() {
                return Err(Error::Validation(format!("duplicate center {c:?}")));
            }
            *slot = Some(i as u16);
        }
        Ok(ColorGamut { grid, centers, side, lattice })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn grid(&self) -> f64 {
        self.grid
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn center(&self, bin: usize) -> [f64; 2] {
        self.centers[bin]
    }

    /// The gamut bundled with the crate (regenerable with [`build_gamut`]).
    pub fn shipped() -> Self {
        Self::from_fixture(SHIPPED_FIXTURE).expect("bundled gamut fixture parses")
    }

    pub fn from_fixture(text: &str) -> Result<Self> {
        let mut grid = None;
        let mut centers = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    if let Some(g) = kv.strip_prefix("grid=") {
                        grid = g.parse::<f64>().ok();
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => centers.push([a, b]),
                _ => return Err(Error::Validation(format!("gamut fixture line {}: {line:?}", no + 1))),
            }
        }
        let grid = grid.ok_or_else(|| Error::Validation("gamut fixture lacks grid= header".into()))?;
        Self::from_centers(grid, centers)
    }

    /// Text table: a header line then one `a b` pair per line.
    pub fn to_fixture(&self) -> String {
        let mut s = format!(
            "# bcnet ab gamut v1 grid={} l_step=1 ab_step=1 white=D65 bins={}\n",
            self.grid,
            self.centers.len()
        );
        for [a, b] in &self.centers {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    /// SHA-256 of the fixture text, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_fixture().as_bytes()))
    }

    /// Index of the Euclidean-nearest center; ties go to the lowest index.
    pub fn nearest_bin(&self, ab: [f64; 2]) -> usize {
        self.k_nearest(ab, 1)[0].0
    }

    /// `k` nearest centers as `(bin, squared distance)`, closest first, ties by index.
    pub fn k_nearest(&self, ab: [f64; 2], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.centers.len());
        let g = self.grid;
        let half = (self.side / 2) as isize;
        let ca = (ab[0] / g).round() as isize + half;
        let cb = (ab[1] / g).round() as isize + half;
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let push = |best: &mut Vec<(usize, f64)>, bin: usize, d: f64| {
            let pos = best
                .iter()
                .position(|&(b2, d2)| d < d2 || (d == d2 && bin < b2))
                .unwrap_or(best.len());
            if pos < k {
                best.insert(pos, (bin, d));
                best.truncate(k);
            }
        };
        let max_ring = 2 * self.side as isize;
        for ring in 0..=max_ring {
            if best.len() == k {
                // every point on this ring is at least (ring - 1/2) * grid away along one axis
                let lower = ((ring as f64 - 0.5) * g).max(0.0);
                if lower * lower > best[k - 1].1 {
                    break;
                }
            }
            for ia in (ca - ring)..=(ca + ring) {
                for ib in (cb - ring)..=(cb + ring) {
                    if (ia - ca).abs() != ring && (ib - cb).abs() != ring {
                        continue;
                    }
                    if ia < 0 || ib < 0 || ia >= self.side as isize || ib >= self.side as isize {
                        continue;
                    }
                    if let Some(bin) = self.lattice[ia as usize * self.side + ib as usize] {
                        let c = self.centers[bin as usize];
                        let d = (c[0] - ab[0]).powi(2) + (c[1] - ab[1]).powi(2);
                        push(&mut best, bin as usize, d);
                    }
                }
            }
        }
        best
    }
}

fn lattice_coords(grid: f64, c: [f64; 2]) -> (Option<usize>, Option<usize>) {
    let side = (2.0 * AB_BOUND / grid).round() as usize + 1;
    let idx = |v: f64| {
        let q = (v + AB_BOUND) / grid;
        let r = q.round();
        ((q - r).abs() < 1e-9 && r >= 0.0 && (r as usize) < side).then_some(r as usize)
    };
    (idx(c[0]), idx(c[1]))
}

/// Whether the `grid`-wide cell around `center` holds an sRGB colour at the given sampling.
pub fn cell_in_gamut(center: [f64; 2], params: &GamutParams) -> bool {
    let half = params.grid / 2.0;
    let steps = |span: f64, step: f64| (span / step).round() as usize;
    let n_ab = steps(params.grid, params.ab_step);
    let n_l = steps(L_MAX, params.l_step);
    for ia in 0..=n_ab {
        let a = center[0] - half + ia as f64 * params.ab_step;
        for ib in 0..=n_ab {
            let b = center[1] - half + ib as f64 * params.ab_step;
            for il in 0..=n_l {
                if in_srgb_gamut([il as f64 * params.l_step, a, b]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Enumerates lattice cells over `[-110,110]^2` (a-major order) that hold an sRGB colour.
pub fn build_gamut(params: &GamutParams) -> Result<ColorGamut> {
    if params.grid <= 0.0 || (2.0 * AB_BOUND / params.grid).fract().abs() > 1e-9 {
        return Err(Error::Validation(format!("grid {} must divide the ab box", params.grid)));
    }
    let side = (2.0 * AB_BOUND / params.grid).round() as usize + 1;
    let mut centers = Vec::new();
    for ia in 0..side {
        for ib in 0..side {
            let c = [-AB_BOUND + ia as f64 * params.grid, -AB_BOUND + ib as f64 * params.grid];
            if cell_in_gamut(c, params) {
                centers.push(c);
            }
        }
    }
    ColorGamut::from_centers(params.grid, centers)
}

/// `[N, bins, h, w]` per-pixel probability vectors over gamut bins.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantDistribution<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> QuantDistribution<T> {
    /// Wraps a tensor after checking every pixel is a probability simplex (tolerance `1e-6`).
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let [n, k, h, w] = probs.shape().0;
        let plane = h * w;
        let tol = T::from_f64_lossy(1e-6);
        for i in 0..n {
            let item = probs.item(i);
            for p in 0..plane {
                let mut s = T::zero();
                for c in 0..k {
                    let v = item[c * plane + p];
                    if !v.is_finite() {
                        return Err(Error::NonFinite("bin probabilities".into()));
                    }
                    if v < T::zero() {
                        return Err(Error::Validation("negative bin probability".into()));
                    }
                    s += v;
                }
                if (s - T::one()).abs() > tol {
                    return Err(Error::Validation(format!("pixel distribution sums to {s}")));
                }
            }
        }
        Ok(QuantDistribution { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.probs
    }
}

/// Soft-encodes a `[N, 2, h, w]` chrominance tensor (Lab units) onto the gamut.
pub fn soft_encode<T: Scalar>(chroma: &Tensor<T>, gamut: &ColorGamut) -> Result<QuantDistribution<T>> {
    let [n, c, h, w] = chroma.shape().0;
    if c != 2 {
        return Err(Error::Shape(format!("chrominance needs 2 channels, got {}", chroma.shape())));
    }
    let plane = h * w;
    let bins = gamut.len();
    let mut probs = Tensor::zeros(Shape::new(n, bins, h, w));
    let denom = 2.0 * SOFT_SIGMA * SOFT_SIGMA;
    for i in 0..n {
        let (pa, pb) = (chroma.plane(i, 0), chroma.plane(i, 1));
        let item = probs.item_mut(i);
        for p in 0..plane {
            let ab = [pa[p].to_f64_lossy(), pb[p].to_f64_lossy()];
            if !(ab[0].is_finite() && ab[1].is_finite()) {
                return Err(Error::NonFinite("chrominance".into()));
            }
            let near = gamut.k_nearest(ab, SOFT_NEIGHBOURS);
            // shift by the closest distance so far-away points do not underflow
            let d0 = near[0].1;
            let weights: Vec<f64> = near.iter().map(|&(_, d)| (-(d - d0) / denom).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (&(bin, _), wgt) in near.iter().zip(weights) {
                item[bin * plane + p] = T::from_f64_lossy(wgt / total);
            }
        }
    }
    Ok(QuantDistribution { probs })
}

/// Annealed-mean decoding: sharpen by `p^(1/T)`, renormalize, take the expectation of centers.
pub fn decode<T: Scalar>(q: &QuantDistribution<T>, gamut: &ColorGamut, temperature: f64) -> Result<Tensor<T>> {
    decode_probs(q.probs(), gamut, temperature)
}

pub(crate) fn decode_probs<T: Scalar>(probs: &Tensor<T>, gamut: &ColorGamut, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    let [n, k, h, w] = probs.shape().0;
    if k != gamut.len() {
        return Err(Error::Shape(format!("{k} bins vs gamut of {}", gamut.len())));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(Shape::new(n, 2, h, w));
    let mut logits = vec![0.0f64; k];
    for i in 0..n {
        let item = probs.item(i);
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for (c, l) in logits.iter_mut().enumerate() {
                let v = item[c * plane + p].to_f64_lossy();
                if !v.is_finite() {
                    return Err(Error::NonFinite("bin probabilities".into()));
                }
                *l = if v > 0.0 { v.ln() / temperature } else { f64::NEG_INFINITY };
                m = m.max(*l);
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::Validation("all-zero distribution".into()));
            }
            let (mut sa, mut sb, mut z) = (0.0, 0.0, 0.0);
            for (c, &l) in logits.iter().enumerate() {
                let e = (l - m).exp();
                let [ca, cb] = gamut.center(c);
                sa += e * ca;
                sb += e * cb;
                z += e;
            }
            let o = out.item_mut(i);
            o[p] = T::from_f64_lossy(sa / z);
            o[plane + p] = T::from_f64_lossy(sb / z);
        }
    }
    Ok(out)
}
