//! Image files, dataset directories and decomposition outputs.
//!
//! Data maps are stored as 16-bit linear PNG so a round trip loses at most
//! one quantisation step (1/65535). Files meant only for viewing carry a
//! `_display` suffix and are 8-bit with the display gamma applied.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::edges::derive_gt_edges;
use crate::error::{Error, Result};
use crate::image::{gamma_convert, GammaDirection, Image, IntrinsicTriple};
use crate::metrics::{synth_judgments, whdr, ComponentMetrics, ImageMetrics, MetricsReport, WHDR_DELTA};
use crate::synth::{generate_dataset, SceneSpec};
use crate::trainer::Decomposition;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const DISPLAY_SUFFIX: &str = "_display";

fn check_unit_range(img: &Image) -> Result<()> {
    match img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("image files hold values in [0,1], got {v}"))),
        None => Ok(()),
    }
}

fn quantize(v: f64, max: f64) -> f64 {
    (v * max).round()
}

/// Writes `img` as a 16-bit grayscale or RGB PNG.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    check_unit_range(img)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let data: Vec<u16> = img.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data).expect("buffer size"))
    };
    dynamic.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes an 8-bit, display-gamma copy of linear `img`.
pub fn write_png8_display(path: &Path, img: &Image) -> Result<()> {
    let shown = gamma_convert(img, GammaDirection::ToDisplay)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let data: Vec<u8> = shown.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, data).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, data).expect("buffer size"))
    };
    dynamic.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a PNG as linear values in `[0,1]`. Grayscale files give one
/// channel; everything else is converted to RGB.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, raw) = match dynamic.color() {
        image::ColorType::L8 | image::ColorType::L16 => (1, dynamic.into_luma16().into_raw()),
        _ => (3, dynamic.into_rgb16().into_raw()),
    };
    Image::new(h, w, channels, raw.into_iter().map(|v| f64::from(v) / 65535.0).collect())
}

/// `dir/scene.png` → `dir/scene_display.png`.
pub fn display_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{DISPLAY_SUFFIX}.png"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub image: String,
    pub reflectance: String,
    pub shading: String,
    pub shadow: String,
    pub reflectance_edges: String,
    pub shading_edges: String,
}

impl SceneEntry {
    fn new(index: usize, seed: u64, size: usize) -> Self {
        let f = |kind: &str| format!("scene_{index:04}_{kind}.png");
        Self {
            seed,
            height: size,
            width: size,
            image: f("image"),
            reflectance: f("reflectance"),
            shading: f("shading"),
            shadow: f("shadow"),
            reflectance_edges: f("reflectance_edges"),
            shading_edges: f("shading_edges"),
        }
    }

    /// Prefix shared by every file of this scene, e.g. `scene_0003`.
    pub fn stem(&self) -> &str {
        self.image.strip_suffix("_image.png").unwrap_or(&self.image)
    }

    fn files(&self) -> [&str; 6] {
        [&self.image, &self.reflectance, &self.shading, &self.shadow, &self.reflectance_edges, &self.shading_edges]
    }
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub base: SceneSpec,
    pub seed_stride: u64,
    pub entries: Vec<SceneEntry>,
}

impl DatasetManifest {
    /// Regenerates the scenes the manifest describes.
    pub fn regenerate(&self) -> Result<Vec<IntrinsicTriple>> {
        generate_dataset(&self.base, self.entries.len(), self.seed_stride)
    }
}

/// Generates `count` scenes into `dir` and writes the manifest.
pub fn write_dataset(dir: &Path, base: &SceneSpec, count: usize, seed_stride: u64) -> Result<DatasetManifest> {
    let scenes = generate_dataset(base, count, seed_stride)?;
    std::fs::create_dir_all(dir)?;
    let entries: Vec<SceneEntry> = (0..count)
        .map(|i| SceneEntry::new(i, base.seed.wrapping_add((i as u64).wrapping_mul(seed_stride)), base.size))
        .collect();
    {
        use rayon::prelude::*;
        scenes.par_iter().zip(&entries).try_for_each(|(scene, entry)| -> Result<()> {
            let (r_edges, s_edges) = derive_gt_edges(scene)?;
            write_png16(&dir.join(&entry.image), &scene.image)?;
            write_png8_display(&display_path(&dir.join(&entry.image)), &scene.image)?;
            write_png16(&dir.join(&entry.reflectance), &scene.reflectance)?;
            write_png16(&dir.join(&entry.shading), &scene.shading)?;
            write_png16(&dir.join(&entry.shadow), &scene.shadow_mask)?;
            write_png16(&dir.join(&entry.reflectance_edges), &r_edges)?;
            write_png16(&dir.join(&entry.shading_edges), &s_edges)
        })?;
    }
    let manifest = DatasetManifest { version: MANIFEST_VERSION, base: base.clone(), seed_stride, entries };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported dataset manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Reads a dataset directory, checking every listed file and its size.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<IntrinsicTriple>)> {
    let manifest = read_manifest(dir)?;
    let mut triples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mut maps = Vec::new();
        for name in entry.files() {
            let img = read_png(&dir.join(name))?;
            if img.height() != entry.height || img.width() != entry.width {
                return Err(Error::Size(format!(
                    "{name} is {}x{}, manifest says {}x{}",
                    img.height(),
                    img.width(),
                    entry.height,
                    entry.width
                )));
            }
            maps.push(img);
        }
        let mut maps = maps.into_iter();
        let mut next = || maps.next().expect("six maps");
        let (image, reflectance, shading, shadow) = (next(), next(), next(), next());
        triples.push(IntrinsicTriple::new(image, reflectance, shading, shadow)?);
    }
    Ok((manifest, triples))
}

/// Writes every output of a decomposition as `<stem>_<kind>.png`.
///
/// Reflectance and shading are 16-bit linear so they can be evaluated
/// directly; the reflectance also gets an 8-bit display copy.
pub fn write_decomposition(dir: &Path, stem: &str, d: &Decomposition) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |kind: &str, img: &Image| -> Result<()> {
        let path = dir.join(format!("{stem}_{kind}.png"));
        write_png16(&path, img)?;
        written.push(path);
        Ok(())
    };
    put("reflectance", &d.reflectance)?;
    put("shading", &d.shading)?;
    put("unrefined_reflectance", &d.unrefined_reflectance)?;
    put("unrefined_shading", &d.unrefined_shading)?;
    for (name, img) in &d.edges {
        put(name, img)?;
    }
    let shown = display_path(&dir.join(format!("{stem}_reflectance.png")));
    write_png8_display(&shown, &d.reflectance)?;
    written.push(shown);
    Ok(written)
}

/// Scores `<stem>_reflectance.png` / `<stem>_shading.png` in `pred_dir`
/// against the dataset in `gt_dir`. With `whdr_pairs`, also scores WHDR on
/// judgments sampled from the ground-truth reflectance.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, whdr_pairs: Option<(usize, u64)>) -> Result<MetricsReport> {
    let manifest = read_manifest(gt_dir)?;
    let mut images = Vec::new();
    for entry in &manifest.entries {
        let stem = entry.stem();
        let gt_r = read_png(&gt_dir.join(&entry.reflectance))?;
        let gt_s = read_png(&gt_dir.join(&entry.shading))?;
        let pred_r = read_png(&pred_dir.join(format!("{stem}_reflectance.png")))?;
        let pred_s = read_png(&pred_dir.join(format!("{stem}_shading.png")))?;
        let whdr = match whdr_pairs {
            Some((n, seed)) => {
                let judgments = synth_judgments(&gt_r, n, seed ^ entry.seed, WHDR_DELTA)?;
                Some(whdr(&pred_r, &judgments, WHDR_DELTA)?)
            }
            None => None,
        };
        images.push(ImageMetrics {
            name: stem.to_string(),
            reflectance: ComponentMetrics::compute(&pred_r, &gt_r)?,
            shading: ComponentMetrics::compute(&pred_s, &gt_s)?,
            whdr,
        });
    }
    Ok(MetricsReport::from_images(images))
}
