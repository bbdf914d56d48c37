//! Canny edges and the ground-truth edge maps that supervise the edge decoders.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{avg_downsample, Image, IntrinsicTriple};

/// Single-channel edge map in `[0, 1]`; binary at full resolution.
pub type EdgeMap = Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the image's maximum gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.0, low: 0.1, high: 0.2 }
    }
}

/// How shading edges are simulated from the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSubtraction {
    /// `canny(S) − canny(R)`.
    #[default]
    ShadingMinusReflectance,
    /// `canny(I) − canny(R)`.
    ImageMinusReflectance,
}

pub fn canny(img: &Image, sigma: f64, low: f64, high: f64) -> Result<EdgeMap> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("canny sigma must be positive, got {sigma}")));
    }
    if !(0.0 < low && low < high && high <= 1.0) {
        return Err(Error::Config(format!("canny thresholds need 0 < low < high <= 1, got {low}, {high}")));
    }
    let lum = img.luminance();
    let (h, w) = (lum.height(), lum.width());
    let blurred = gaussian_blur_replicate(lum.data(), h, w, sigma);

    let at = |r: i64, c: i64| blurred[(r.clamp(0, h as i64 - 1) as usize) * w + c.clamp(0, w as i64 - 1) as usize];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![(0i64, 0i64); h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
            let gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
            let i = r as usize * w + c as usize;
            mag[i] = gx.hypot(gy);
            dir[i] = quantize_direction(gx, gy);
        }
    }
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    if max_mag <= 1e-12 {
        return Image::filled(h, w, 1, 0.0);
    }

    let mag_at = |r: i64, c: i64| {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let i = r as usize * w + c as usize;
            let (dc, dr) = dir[i];
            let m = mag[i];
            // Strict against the backward neighbour, non-strict forward, so a
            // symmetric plateau keeps exactly one pixel.
            if m > mag_at(r - dr, c - dc) && m >= mag_at(r + dr, c + dc) {
                thin[i] = m;
            }
        }
    }

    let (lo, hi) = (low * max_mag, high * max_mag);
    let mut out = vec![0.0; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi && m > 0.0 {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if out[j] == 0.0 && thin[j] >= lo && thin[j] > 0.0 {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Image::new(h, w, 1, out)
}

pub fn canny_default(img: &Image) -> Result<EdgeMap> {
    let p = CannyParams::default();
    canny(img, p.sigma, p.low, p.high)
}

/// Gradient direction snapped to one of 8 compass neighbours, as `(dx, dy)`.
fn quantize_direction(gx: f64, gy: f64) -> (i64, i64) {
    const OFFSETS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
    let angle = gy.atan2(gx);
    let bin = (angle / std::f64::consts::FRAC_PI_4).round().rem_euclid(8.0) as usize;
    OFFSETS[bin % 8]
}

/// Separable Gaussian blur, radius `ceil(3σ)`, replicated borders.
pub fn gaussian_blur_replicate(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let cc = (c as i64 + t as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += k * plane[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let rr = (r as i64 + t as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Ground-truth reflectance and shading edges.
pub fn derive_gt_edges(triple: &IntrinsicTriple) -> Result<(EdgeMap, EdgeMap)> {
    derive_gt_edges_with(triple, CannyParams::default(), EdgeSubtraction::default())
}

pub fn derive_gt_edges_with(
    triple: &IntrinsicTriple,
    params: CannyParams,
    mode: EdgeSubtraction,
) -> Result<(EdgeMap, EdgeMap)> {
    let refl = canny(&triple.reflectance.luminance(), params.sigma, params.low, params.high)?;
    let source = match mode {
        EdgeSubtraction::ShadingMinusReflectance => &triple.shading,
        EdgeSubtraction::ImageMinusReflectance => &triple.image,
    };
    let raw = canny(source, params.sigma, params.low, params.high)?;
    let shading = Image::new(
        raw.height(),
        raw.width(),
        1,
        raw.data().iter().zip(refl.data()).map(|(s, r)| (s - r).clamp(0.0, 1.0)).collect(),
    )?;
    Ok((refl, shading))
}

/// Half- and quarter-resolution edge maps by block averaging.
pub fn edge_pyramid(edges: &EdgeMap, full_size: usize) -> Result<(EdgeMap, EdgeMap)> {
    if edges.height() != full_size || edges.width() != full_size {
        return Err(Error::Size(format!(
            "edge map is {}x{}, expected {full_size}x{full_size}",
            edges.height(),
            edges.width()
        )));
    }
    if full_size % 4 != 0 {
        return Err(Error::Size(format!("edge pyramid needs a size divisible by 4, got {full_size}")));
    }
    Ok((avg_downsample(edges, 2)?, avg_downsample(edges, 4)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{dilate, generate_scene_with_layout, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image::filled(16, 16, 3, 0.4).unwrap();
        assert!(canny_default(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_gives_single_column() {
        for (a, b) in [(0.1, 0.9), (0.9, 0.1)] {
            let img = Image::from_fn(16, 16, 1, |_, c, _| if c < 8 { a } else { b }).unwrap();
            let e = canny_default(&img).unwrap();
            let cols: Vec<usize> = (0..16).filter(|&c| (0..16).any(|r| e.get(r, c, 0) == 1.0)).collect();
            assert_eq!(cols.len(), 1, "edge columns {cols:?}");
            assert!(cols[0] == 7 || cols[0] == 8);
            assert!((0..16).all(|r| e.get(r, cols[0], 0) == 1.0));
        }
    }

    #[test]
    fn invalid_thresholds() {
        let img = Image::filled(8, 8, 1, 0.4).unwrap();
        assert!(matches!(canny(&img, 1.0, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(canny(&img, 1.0, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(canny(&img, 1.0, 0.1, 1.2), Err(Error::Config(_))));
    }

    #[test]
    fn output_is_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::from_fn(20, 20, 3, |_, _, _| rng.random::<f64>()).unwrap();
        let e = canny_default(&img).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn reflectance_edges_cover_strong_patch_boundaries() {
        for seed in 0..8 {
            let spec = SceneSpec { seed, n_shadows: 0, ..SceneSpec::default() };
            let scene = generate_scene_with_layout(&spec).unwrap();
            let n = spec.size;
            let lum = scene.triple.reflectance.luminance();
            let edges = canny_default(&lum).unwrap();
            let covered = dilate(&edges.data().iter().map(|&v| v > 0.5).collect::<Vec<_>>(), n, n);
            let contrast = |i: usize, j: usize| (lum.data()[i] - lum.data()[j]).abs();
            let mut pairs = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    let i = r * n + c;
                    if c + 1 < n && scene.layout.patch_ids[i] != scene.layout.patch_ids[i + 1] {
                        pairs.push((i, i + 1));
                    }
                    if r + 1 < n && scene.layout.patch_ids[i] != scene.layout.patch_ids[i + n] {
                        pairs.push((i, i + n));
                    }
                }
            }
            let strongest = pairs.iter().map(|&(i, j)| contrast(i, j)).fold(0.0, f64::max);
            for &(i, j) in &pairs {
                if contrast(i, j) >= 0.5 * strongest {
                    assert!(covered[i] || covered[j], "seed {seed}: boundary pixel {i} uncovered");
                }
            }
        }
    }

    #[test]
    fn shadow_edges_follow_the_polygon() {
        let spec = SceneSpec {
            seed: 4,
            n_patches: 1,
            shading_freq: 0.0,
            n_shadows: 1,
            shadow_strength: 0.8,
            penumbra_px: 1.0,
            ..SceneSpec::default()
        };
        let scene = generate_scene_with_layout(&spec).unwrap();
        let (refl, shad) = derive_gt_edges(&scene.triple).unwrap();
        assert!(refl.data().iter().all(|&v| v == 0.0));
        assert!(shad.data().iter().any(|&v| v == 1.0));
        let poly = &scene.layout.shadows[0];
        for r in 0..spec.size {
            for c in 0..spec.size {
                if shad.get(r, c, 0) == 1.0 {
                    let d = poly.signed_distance(c as f64 + 0.5, r as f64 + 0.5);
                    assert!(d.abs() <= spec.penumbra_px + 2.0, "edge at ({r},{c}) is {d} px from the shadow");
                }
            }
        }
    }

    #[test]
    fn constant_shading_yields_no_shading_edges() {
        let spec = SceneSpec { n_shadows: 0, shading_freq: 0.0, ..SceneSpec::default() };
        let scene = generate_scene_with_layout(&spec).unwrap();
        let (refl, shad) = derive_gt_edges(&scene.triple).unwrap();
        assert!(refl.data().iter().any(|&v| v == 1.0));
        assert!(shad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subtraction_rule_zeroes_overlap() {
        for seed in 0..5 {
            let scene = generate_scene_with_layout(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
            for mode in [EdgeSubtraction::ShadingMinusReflectance, EdgeSubtraction::ImageMinusReflectance] {
                let (refl, shad) = derive_gt_edges_with(&scene.triple, CannyParams::default(), mode).unwrap();
                for (r, s) in refl.data().iter().zip(shad.data()) {
                    assert!(!(*r == 1.0 && *s > 0.0));
                }
            }
        }
    }

    #[test]
    fn pyramid_cases() {
        let zero = Image::filled(16, 16, 1, 0.0).unwrap();
        let (h, q) = edge_pyramid(&zero, 16).unwrap();
        assert!(h.data().iter().chain(q.data()).all(|&v| v == 0.0));

        let single = Image::from_fn(16, 16, 1, |r, c, _| if (r, c) == (5, 6) { 1.0 } else { 0.0 }).unwrap();
        let (h, _) = edge_pyramid(&single, 16).unwrap();
        let nonzero: Vec<f64> = h.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero, vec![0.25]);
        assert_eq!(h.get(2, 3, 0), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random = Image::from_fn(16, 16, 1, |_, _, _| if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 }).unwrap();
        let (_, q) = edge_pyramid(&random, 16).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += random.data()[(4 * r + i) * 16 + 4 * c + j];
                    }
                }
                assert!((q.get(r, c, 0) - acc / 16.0).abs() < 1e-15);
            }
        }
        assert!(matches!(edge_pyramid(&Image::filled(10, 10, 1, 0.0).unwrap(), 10), Err(Error::Size(_))));
    }
}
