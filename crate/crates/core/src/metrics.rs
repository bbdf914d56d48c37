//! Evaluation metrics for intrinsic components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::blur_valid;

pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const WHDR_DELTA: f64 = 0.10;
const LIGHTNESS_FLOOR: f64 = 1e-6;

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} and ground truth {}x{}x{} differ",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    Ok(())
}

fn mse_slices(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Optimal rescaling `⟨p,g⟩/⟨p,p⟩`, 0 for an all-zero prediction.
pub fn optimal_scale(pred: &[f64], gt: &[f64]) -> f64 {
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    if pp == 0.0 {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| p * g).sum::<f64>() / pp
}

fn smse_slices(pred: &[f64], gt: &[f64]) -> f64 {
    let a = optimal_scale(pred, gt);
    pred.iter().zip(gt).map(|(p, g)| (a * p - g).powi(2)).sum::<f64>() / pred.len() as f64
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mse_slices(pred.data(), gt.data()))
}

/// MSE after the best global rescaling of `pred`.
pub fn smse(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(smse_slices(pred.data(), gt.data()))
}

/// Window origins along an axis of length `n`: every `stride`, plus a final
/// window flush with the far edge.
fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().expect("n >= window") != n - window {
        starts.push(n - window);
    }
    starts
}

/// Local MSE: mean of per-window scale-invariant MSE, per channel, then
/// averaged over channels.
pub fn lmse(pred: &Image, gt: &Image, window: usize, stride: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    if window == 0 || stride == 0 {
        return Err(Error::Domain("window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::Size(format!("{h}x{w} image is smaller than the {window}-pixel window")));
    }
    let (rows, cols) = (window_starts(h, window, stride), window_starts(w, window, stride));
    let mut total = 0.0;
    for ch in 0..pred.channels() {
        let (pp, gp) = (pred.plane(ch), gt.plane(ch));
        let mut acc = 0.0;
        let mut bp = Vec::with_capacity(window * window);
        let mut bg = Vec::with_capacity(window * window);
        for &r in &rows {
            for &c in &cols {
                bp.clear();
                bg.clear();
                for y in r..r + window {
                    bp.extend_from_slice(&pp[y * w + c..y * w + c + window]);
                    bg.extend_from_slice(&gp[y * w + c..y * w + c + window]);
                }
                acc += smse_slices(&bp, &bg);
            }
        }
        total += acc / (rows.len() * cols.len()) as f64;
    }
    Ok(total / pred.channels() as f64)
}

pub fn lmse_default(pred: &Image, gt: &Image) -> Result<f64> {
    lmse(pred, gt, LMSE_WINDOW, LMSE_STRIDE)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}-pixel SSIM window")));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..pred.channels() {
        let (x, y) = (pred.plane(ch), gt.plane(ch));
        let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        let mx = blur_valid(&x, h, w, &k);
        let my = blur_valid(&y, h, w, &k);
        let mxx = blur_valid(&prod(&x, &x), h, w, &k);
        let myy = blur_valid(&prod(&y, &y), h, w, &k);
        let mxy = blur_valid(&prod(&x, &y), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
            acc += (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / pred.channels() as f64)
}

/// `(1 − SSIM) / 2`.
pub fn dssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok((1.0 - ssim(pred, gt)?) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalLabel {
    ADarker,
    BDarker,
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalJudgment {
    /// `(row, col)` of the first point.
    pub point_a: (usize, usize),
    pub point_b: (usize, usize),
    pub label: OrdinalLabel,
    pub weight: f64,
}

fn lightness(img: &Image, (r, c): (usize, usize)) -> f64 {
    let s: f64 = (0..img.channels()).map(|ch| img.get(r, c, ch)).sum();
    (s / img.channels() as f64).max(LIGHTNESS_FLOOR)
}

/// Ordinal relation of two lightness values under tolerance `delta`.
pub fn ordinal_label(la: f64, lb: f64, delta: f64) -> OrdinalLabel {
    let ratio = la / lb;
    if ratio >= 1.0 / (1.0 + delta) && ratio <= 1.0 + delta {
        OrdinalLabel::Equal
    } else if la < lb {
        OrdinalLabel::ADarker
    } else {
        OrdinalLabel::BDarker
    }
}

/// Weighted fraction of judgments the prediction disagrees with.
pub fn whdr(pred_reflectance: &Image, judgments: &[OrdinalJudgment], delta: f64) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::EmptyDomain("no ordinal judgments".into()));
    }
    let (h, w) = (pred_reflectance.height(), pred_reflectance.width());
    let mut wrong = 0.0;
    let mut total = 0.0;
    for j in judgments {
        for (r, c) in [j.point_a, j.point_b] {
            if r >= h || c >= w {
                return Err(Error::Size(format!("judgment point ({r}, {c}) outside {h}x{w}")));
            }
        }
        if !(j.weight > 0.0) {
            return Err(Error::Domain(format!("judgment weight must be positive, got {}", j.weight)));
        }
        let label = ordinal_label(lightness(pred_reflectance, j.point_a), lightness(pred_reflectance, j.point_b), delta);
        if label != j.label {
            wrong += j.weight;
        }
        total += j.weight;
    }
    Ok(wrong / total)
}

/// Unit-weight judgments on uniformly drawn pixel pairs, labelled from `gt`.
pub fn synth_judgments(gt_reflectance: &Image, n_pairs: usize, seed: u64, delta: f64) -> Result<Vec<OrdinalJudgment>> {
    if n_pairs == 0 {
        return Err(Error::Domain("n_pairs must be at least 1".into()));
    }
    let (h, w) = (gt_reflectance.height(), gt_reflectance.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs)
        .map(|_| {
            let a = (rng.random_range(0..h), rng.random_range(0..w));
            let b = (rng.random_range(0..h), rng.random_range(0..w));
            let label = ordinal_label(lightness(gt_reflectance, a), lightness(gt_reflectance, b), delta);
            OrdinalJudgment { point_a: a, point_b: b, label, weight: 1.0 }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentMetrics {
    pub mse: f64,
    pub smse: f64,
    pub lmse: f64,
    pub dssim: f64,
}

impl ComponentMetrics {
    pub fn compute(pred: &Image, gt: &Image) -> Result<Self> {
        Ok(Self { mse: mse(pred, gt)?, smse: smse(pred, gt)?, lmse: lmse_default(pred, gt)?, dssim: dssim(pred, gt)? })
    }

    fn mean(items: impl Iterator<Item = Self>) -> Self {
        let mut acc = Self::default();
        let mut n = 0usize;
        for m in items {
            acc.mse += m.mse;
            acc.smse += m.smse;
            acc.lmse += m.lmse;
            acc.dssim += m.dssim;
            n += 1;
        }
        let n = n.max(1) as f64;
        Self { mse: acc.mse / n, smse: acc.smse / n, lmse: acc.lmse / n, dssim: acc.dssim / n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub reflectance: ComponentMetrics,
    pub shading: ComponentMetrics,
    pub whdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_reflectance: ComponentMetrics,
    pub mean_shading: ComponentMetrics,
    pub mean_whdr: Option<f64>,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let mean_reflectance = ComponentMetrics::mean(images.iter().map(|m| m.reflectance));
        let mean_shading = ComponentMetrics::mean(images.iter().map(|m| m.shading));
        let w: Vec<f64> = images.iter().filter_map(|m| m.whdr).collect();
        let mean_whdr = (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64);
        Self { images, mean_reflectance, mean_shading, mean_whdr }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_the_edge() {
        assert_eq!(window_starts(20, 20, 10), vec![0]);
        assert_eq!(window_starts(32, 20, 10), vec![0, 10, 12]);
        assert_eq!(window_starts(40, 20, 10), vec![0, 10, 20]);
    }

    #[test]
    fn gaussian_is_normalised_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn ordinal_rule() {
        assert_eq!(ordinal_label(1.0, 1.05, 0.1), OrdinalLabel::Equal);
        assert_eq!(ordinal_label(0.5, 1.0, 0.1), OrdinalLabel::ADarker);
        assert_eq!(ordinal_label(1.0, 0.5, 0.1), OrdinalLabel::BDarker);
    }
}
