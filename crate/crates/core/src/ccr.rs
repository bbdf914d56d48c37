//! Log-domain cross color ratios.
//!
//! For a pixel `p1` and its neighbour `p2` the cross color ratio of the
//! channel pair `(C1, C2)` is `C1(p1)·C2(p2) / (C1(p2)·C2(p1))`. Any scalar
//! factor shared by all channels of a pixel cancels, so under white
//! illumination the ratio depends on reflectance alone.

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const CCR_CHANNELS: usize = 6;

/// Channel pairs in storage order: RG, RB, GB.
pub const CHANNEL_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Six-channel log cross color ratio field: RG, RB, GB against the right
/// neighbour, then the same three against the down neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct CcrMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl CcrMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixel-interleaved values, `CCR_CHANNELS` per pixel.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * CCR_CHANNELS + ch]
    }

    /// Row-major plane for one channel.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(CCR_CHANNELS).copied().collect()
    }

    /// Channel-major `[6, H, W]` layout, the network's input convention.
    pub fn to_planar(&self) -> Vec<f64> {
        (0..CCR_CHANNELS).flat_map(|ch| self.plane(ch)).collect()
    }
}

/// Single log cross color ratio for channels `(c1, c2)` between two pixels.
#[inline]
pub fn log_ratio(p1: &[f64], p2: &[f64], c1: usize, c2: usize, epsilon: f64) -> f64 {
    let l = |v: f64| v.max(epsilon).ln();
    l(p1[c1]) + l(p2[c2]) - l(p2[c1]) - l(p1[c2])
}

pub fn log_ccr_map(img: &Image, epsilon: f64) -> Result<CcrMap> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("cross color ratios need 3 channels, got {}", img.channels())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let (h, w) = (img.height(), img.width());
    let px = |r: usize, c: usize| {
        let i = (r * w + c) * 3;
        &img.data()[i..i + 3]
    };
    let mut data = Vec::with_capacity(h * w * CCR_CHANNELS);
    for r in 0..h {
        for c in 0..w {
            let p1 = px(r, c);
            // The last column/row pairs a pixel with itself, which yields 0;
            // written directly so rounding cannot leave a residue.
            let right = (c + 1 < w).then(|| px(r, c + 1));
            let down = (r + 1 < h).then(|| px(r + 1, c));
            for p2 in [right, down] {
                for &(c1, c2) in &CHANNEL_PAIRS {
                    data.push(p2.map_or(0.0, |p2| log_ratio(p1, p2, c1, c2, epsilon)));
                }
            }
        }
    }
    Ok(CcrMap { height: h, width: w, data })
}

/// Largest `|image_ccr − reflectance_ccr|` over pixels not marked in `exclusion_mask`.
pub fn invariance_residual(image_ccr: &CcrMap, reflectance_ccr: &CcrMap, exclusion_mask: &Image) -> Result<f64> {
    if image_ccr.height != reflectance_ccr.height
        || image_ccr.width != reflectance_ccr.width
        || exclusion_mask.height() != image_ccr.height
        || exclusion_mask.width() != image_ccr.width
    {
        return Err(Error::Size("ccr maps and mask must share dimensions".into()));
    }
    if exclusion_mask.channels() != 1 {
        return Err(Error::Shape("exclusion mask must be single-channel".into()));
    }
    let mut worst: Option<f64> = None;
    for (i, &m) in exclusion_mask.data().iter().enumerate() {
        if m >= 0.5 {
            continue;
        }
        let a = &image_ccr.data[i * CCR_CHANNELS..(i + 1) * CCR_CHANNELS];
        let b = &reflectance_ccr.data[i * CCR_CHANNELS..(i + 1) * CCR_CHANNELS];
        let local = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = Some(worst.map_or(local, |w: f64| w.max(local)));
    }
    worst.ok_or_else(|| Error::EmptyDomain("every pixel is excluded".into()))
}
