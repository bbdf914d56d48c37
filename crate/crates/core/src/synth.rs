//! Procedural Lambertian scenes with exact ground truth.
//!
//! Reflectance is a Voronoi mosaic of flat colour patches, shading is a
//! smooth sum of low-frequency cosines normalised into `[0.3, 1.0]`, and
//! cast shadows are convex polygons with a linear penumbra ramp that
//! attenuate the shading.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{compose_lambertian, Image, IntrinsicTriple};

pub const SHADING_MIN: f64 = 0.3;
pub const SHADING_MAX: f64 = 1.0;
pub const COLOR_MIN: f64 = 0.1;
pub const COLOR_MAX: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length in pixels; scenes are square.
    pub size: usize,
    pub n_patches: usize,
    /// Cycles per image width of the smooth shading field; 0 gives constant shading.
    pub shading_freq: f64,
    pub n_shadows: usize,
    pub shadow_strength: f64,
    pub penumbra_px: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 32,
            n_patches: 5,
            shading_freq: 1.0,
            n_shadows: 1,
            shadow_strength: 0.7,
            penumbra_px: 2.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("scene size must be >= 8, got {}", self.size)));
        }
        if self.n_patches < 1 {
            return Err(Error::Config("scene needs at least one reflectance patch".into()));
        }
        if !(self.shading_freq >= 0.0 && self.shading_freq.is_finite()) {
            return Err(Error::Config(format!("shading_freq must be >= 0, got {}", self.shading_freq)));
        }
        if self.n_shadows > 0 && !(self.shadow_strength > 0.0 && self.shadow_strength <= 1.0) {
            return Err(Error::Config(format!(
                "shadow_strength must lie in (0, 1], got {}",
                self.shadow_strength
            )));
        }
        if !(self.penumbra_px >= 0.0 && self.penumbra_px.is_finite()) {
            return Err(Error::Config(format!("penumbra_px must be >= 0, got {}", self.penumbra_px)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// A convex shadow caster, vertices in pixel coordinates `(x, y)`, counter-clockwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowPolygon {
    pub vertices: Vec<(f64, f64)>,
}

impl ShadowPolygon {
    /// Signed distance from `(x, y)` to the boundary; negative inside.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let n = self.vertices.len();
        let mut inside = true;
        let mut dist = f64::INFINITY;
        for i in 0..n {
            let (ax, ay) = self.vertices[i];
            let (bx, by) = self.vertices[(i + 1) % n];
            let (ex, ey) = (bx - ax, by - ay);
            let (px, py) = (x - ax, y - ay);
            if ex * py - ey * px < 0.0 {
                inside = false;
            }
            let t = ((px * ex + py * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
            let (dx, dy) = (px - t * ex, py - t * ey);
            dist = dist.min((dx * dx + dy * dy).sqrt());
        }
        if inside {
            -dist
        } else {
            dist
        }
    }
}

/// Generator internals kept alongside the triple for analytic checks.
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub size: usize,
    /// Voronoi patch index per pixel, row-major.
    pub patch_ids: Vec<usize>,
    pub patch_colors: Vec<[f64; 3]>,
    pub shadows: Vec<ShadowPolygon>,
}

impl SceneLayout {
    /// Pixels whose right or down neighbour belongs to another patch.
    pub fn reflectance_boundary(&self) -> Vec<bool> {
        let n = self.size;
        let mut out = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                let id = self.patch_ids[r * n + c];
                if (c + 1 < n && self.patch_ids[r * n + c + 1] != id) || (r + 1 < n && self.patch_ids[(r + 1) * n + c] != id)
                {
                    out[r * n + c] = true;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub triple: IntrinsicTriple,
    pub layout: SceneLayout,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<IntrinsicTriple> {
    Ok(generate_scene_with_layout(spec)?.triple)
}

pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let sites: Vec<(f64, f64)> =
        (0..spec.n_patches).map(|_| (rng.random::<f64>() * n as f64, rng.random::<f64>() * n as f64)).collect();
    let patch_colors: Vec<[f64; 3]> = (0..spec.n_patches)
        .map(|_| std::array::from_fn(|_| rng.random_range(COLOR_MIN..COLOR_MAX)))
        .collect();
    let mut patch_ids = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sx, sy))| (i, (sx - x).powi(2) + (sy - y).powi(2)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            patch_ids.push(nearest);
        }
    }
    let reflectance = Image::from_fn(n, n, 3, |r, c, ch| patch_colors[patch_ids[r * n + c]][ch])?;

    let base = smooth_shading(&mut rng, n, spec.shading_freq);

    let shadows: Vec<ShadowPolygon> = (0..spec.n_shadows).map(|_| random_polygon(&mut rng, n)).collect();
    let mut soft = vec![0.0; n * n];
    if !shadows.is_empty() {
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                soft[r * n + c] = shadows
                    .iter()
                    .map(|p| penumbra_ramp(p.signed_distance(x, y), spec.penumbra_px))
                    .fold(0.0, f64::max);
            }
        }
    }
    let strength = if shadows.is_empty() { 0.0 } else { spec.shadow_strength };
    let shading = Image::new(n, n, 1, base.iter().zip(&soft).map(|(b, m)| b * (1.0 - strength * m)).collect())?;
    let shadow_mask = Image::new(n, n, 1, soft)?;
    let image = compose_lambertian(&reflectance, &shading)?;
    let triple = IntrinsicTriple::new(image, reflectance, shading, shadow_mask)?;
    Ok(Scene { spec: spec.clone(), triple, layout: SceneLayout { size: n, patch_ids, patch_colors, shadows } })
}

/// `count` scenes; the i-th uses `seed = base.seed + i * seed_stride`.
pub fn generate_dataset(base_spec: &SceneSpec, count: usize, seed_stride: u64) -> Result<Vec<IntrinsicTriple>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(&base_spec.with_seed(base_spec.seed.wrapping_add(i.wrapping_mul(seed_stride)))))
        .collect()
}

/// Soft shadow coverage: 0 outside, ramping linearly to 1 at `penumbra` px inside.
fn penumbra_ramp(signed_distance: f64, penumbra: f64) -> f64 {
    if penumbra <= 0.0 {
        return if signed_distance < 0.0 { 1.0 } else { 0.0 };
    }
    (-signed_distance / penumbra).clamp(0.0, 1.0)
}

fn smooth_shading(rng: &mut ChaCha8Rng, n: usize, freq: f64) -> Vec<f64> {
    let n_terms = rng.random_range(2..=4usize);
    let terms: Vec<(f64, f64, f64, f64)> = (0..n_terms)
        .map(|_| {
            let theta = rng.random::<f64>() * 2.0 * PI;
            let f = freq * rng.random_range(0.5..1.5);
            let phase = rng.random::<f64>() * 2.0 * PI;
            let amp = rng.random_range(0.5..1.0);
            (theta, f, phase, amp)
        })
        .collect();
    if freq == 0.0 {
        return vec![SHADING_MAX; n * n];
    }
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            terms
                .iter()
                .map(|&(theta, f, phase, amp)| {
                    amp * (2.0 * PI * f * (x * theta.cos() + y * theta.sin()) / n as f64 + phase).cos()
                })
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![SHADING_MAX; n * n];
    }
    raw.iter().map(|v| SHADING_MIN + (SHADING_MAX - SHADING_MIN) * (v - lo) / (hi - lo)).collect()
}

fn random_polygon(rng: &mut ChaCha8Rng, n: usize) -> ShadowPolygon {
    let size = n as f64;
    let cx = rng.random_range(0.2..0.8) * size;
    let cy = rng.random_range(0.2..0.8) * size;
    let radius = rng.random_range(0.15..0.35) * size;
    let n_vertices = rng.random_range(3..=6usize);
    let mut angles: Vec<f64> = (0..n_vertices).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    // Vertices on a circle in angular order form a convex polygon; with y
    // pointing down, increasing angle runs counter-clockwise in the
    // orientation the inside test expects.
    let vertices = angles.iter().map(|a| (cx + radius * a.cos(), cy + radius * a.sin())).collect();
    ShadowPolygon { vertices }
}

/// Pixels whose CCR pair may straddle a reflectance edge or an illumination
/// transition: reflectance boundaries plus the shadow transition band,
/// dilated by one pixel.
pub fn exclusion_mask(scene: &Scene) -> Result<Image> {
    let n = scene.layout.size;
    let soft = scene.triple.shadow_mask.data();
    let mut marked = scene.layout.reflectance_boundary();
    for r in 0..n {
        for c in 0..n {
            let m = soft[r * n + c];
            let mut transition = m > 0.0 && m < 1.0;
            for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n && soft[rr as usize * n + cc as usize] != m {
                    transition = true;
                }
            }
            if transition {
                marked[r * n + c] = true;
            }
        }
    }
    Image::new(n, n, 1, dilate(&marked, n, n).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
}

/// 3×3 binary dilation.
pub fn dilate(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            for rr in r.saturating_sub(1)..=(r + 1).min(height - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(width - 1) {
                    out[rr * width + cc] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccr::{invariance_residual, log_ccr_map, DEFAULT_EPSILON};
    use std::collections::HashSet;

    fn hash(img: &Image) -> Vec<u64> {
        img.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn degenerate_spec_rejected() {
        let small = SceneSpec { size: 7, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&small), Err(Error::Config(_))));
        let none = SceneSpec { n_patches: 0, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&none), Err(Error::Config(_))));
    }

    #[test]
    fn flat_shading_gives_scaled_reflectance() {
        let spec = SceneSpec { n_shadows: 0, shading_freq: 0.0, ..SceneSpec::default() };
        let t = generate_scene(&spec).unwrap();
        let s0 = t.shading.data()[0];
        assert!(t.shading.data().iter().all(|&s| s == s0));
        assert_eq!(t.image, t.reflectance.scaled(s0));
    }

    #[test]
    fn composition_is_exact_and_ranges_hold() {
        for seed in 0..10 {
            let spec = SceneSpec { seed, n_shadows: 2, ..SceneSpec::default() };
            let t = generate_scene(&spec).unwrap();
            assert_eq!(t.composition_residual(), 0.0);
            let floor = SHADING_MIN * (1.0 - spec.shadow_strength);
            assert!(t.shading.data().iter().all(|&s| s >= floor - 1e-15 && s <= SHADING_MAX));
            assert!(t.shadow_mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
            assert!(t.reflectance.data().iter().all(|&v| (COLOR_MIN..COLOR_MAX).contains(&v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { seed: 7, size: 32, n_patches: 5, n_shadows: 1, ..SceneSpec::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        for (x, y) in [(&a.image, &b.image), (&a.reflectance, &b.reflectance), (&a.shading, &b.shading)] {
            assert_eq!(hash(x), hash(y));
        }
    }

    #[test]
    fn dataset_seeds_and_disjointness() {
        let base = SceneSpec { seed: 100, ..SceneSpec::default() };
        let one = generate_dataset(&base, 1, 1).unwrap();
        assert_eq!(one[0], generate_scene(&base).unwrap());

        let three = generate_dataset(&base, 3, 1).unwrap();
        let hashes: HashSet<_> = three.iter().map(|t| hash(&t.image)).collect();
        assert_eq!(hashes.len(), 3);
        assert_eq!(three[2], generate_scene(&base.with_seed(102)).unwrap());

        let train = generate_dataset(&base, 8, 1).unwrap();
        let test = generate_dataset(&base.with_seed(10_000), 8, 1).unwrap();
        let train_h: HashSet<_> = train.iter().map(|t| hash(&t.image)).collect();
        assert!(test.iter().all(|t| !train_h.contains(&hash(&t.image))));
        assert!(matches!(generate_dataset(&base, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn generated_scenes_pass_masked_invariance() {
        for seed in 0..20 {
            let spec = SceneSpec { seed, n_shadows: 2, shadow_strength: 0.9, ..SceneSpec::default() };
            let scene = generate_scene_with_layout(&spec).unwrap();
            let mask = exclusion_mask(&scene).unwrap();
            let a = log_ccr_map(&scene.triple.image, DEFAULT_EPSILON).unwrap();
            let b = log_ccr_map(&scene.triple.reflectance, DEFAULT_EPSILON).unwrap();
            assert!(invariance_residual(&a, &b, &mask).unwrap() < 1e-3);
        }
    }

    #[test]
    fn polygon_signed_distance() {
        let square = ShadowPolygon { vertices: vec![(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)] };
        assert!((square.signed_distance(2.0, 2.0) + 2.0).abs() < 1e-12);
        assert!((square.signed_distance(6.0, 2.0) - 2.0).abs() < 1e-12);
    }
}
