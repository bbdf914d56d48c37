//! Pixel containers and the Lambertian image-formation model.
//!
//! Every map in the lab is an [`Image`]: a dense row-major
//! `(row, col, channel)` grid of linear-light `f64` values. Shading is
//! single-channel (white illumination) and is broadcast across RGB when
//! composed with reflectance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `height × width × channels` grid of linear intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Size(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("image value {v} is not finite")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.same_dims(other) && self.channels == other.channels
    }

    /// Extracts one channel as a contiguous row-major plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    /// Channel mean; the luminance used for edges and lightness.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn to_rgb(&self) -> Result<Image> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => Ok(Image {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            }),
            c => Err(Error::Shape(format!("cannot expand {c}-channel image to RGB"))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Image together with its ground-truth intrinsic components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicTriple {
    pub image: Image,
    pub reflectance: Image,
    pub shading: Image,
    pub shadow_mask: Image,
}

impl IntrinsicTriple {
    pub fn new(image: Image, reflectance: Image, shading: Image, shadow_mask: Image) -> Result<Self> {
        if image.channels() != 3 || reflectance.channels() != 3 {
            return Err(Error::Shape("image and reflectance must be 3-channel".into()));
        }
        if shading.channels() != 1 || shadow_mask.channels() != 1 {
            return Err(Error::Shape("shading and shadow mask must be 1-channel".into()));
        }
        if !(image.same_dims(&reflectance) && image.same_dims(&shading) && image.same_dims(&shadow_mask)) {
            return Err(Error::Size("triple components differ in height/width".into()));
        }
        Ok(Self { image, reflectance, shading, shadow_mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    /// Largest `|I − R ⊙ S|` over all pixels and channels.
    pub fn composition_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.image.height() {
            for c in 0..self.image.width() {
                let s = self.shading.get(r, c, 0);
                for ch in 0..3 {
                    let d = (self.image.get(r, c, ch) - self.reflectance.get(r, c, ch) * s).abs();
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

/// `I_c = R_c · S` per pixel, with the single shading channel broadcast over RGB.
pub fn compose_lambertian(reflectance: &Image, shading: &Image) -> Result<Image> {
    if reflectance.channels() != 3 || shading.channels() != 1 {
        return Err(Error::Shape(format!(
            "compose expects 3-channel reflectance and 1-channel shading, got {} and {}",
            reflectance.channels(),
            shading.channels()
        )));
    }
    if !reflectance.same_dims(shading) {
        return Err(Error::Size(format!(
            "reflectance {}x{} vs shading {}x{}",
            reflectance.height(),
            reflectance.width(),
            shading.height(),
            shading.width()
        )));
    }
    if let Some(v) = shading.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("negative shading value {v}")));
    }
    let data = reflectance
        .data()
        .chunks_exact(3)
        .zip(shading.data())
        .flat_map(|(rgb, &s)| [rgb[0] * s, rgb[1] * s, rgb[2] * s])
        .collect();
    Image::new(reflectance.height(), reflectance.width(), 3, data)
}

pub const GAMMA: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaDirection {
    ToLinear,
    ToDisplay,
}

/// Power-law transfer between display-encoded and linear values.
pub fn gamma_convert(img: &Image, direction: GammaDirection) -> Result<Image> {
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("gamma conversion needs values in [0,1], got {v}")));
    }
    let exponent = match direction {
        GammaDirection::ToLinear => GAMMA,
        GammaDirection::ToDisplay => 1.0 / GAMMA,
    };
    img.map(|v| v.powf(exponent))
}

/// Mean over non-overlapping `factor × factor` blocks, per channel.
pub fn avg_downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::Size("downsample factor must be positive".into()));
    }
    if img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::Size(format!(
            "{}x{} is not divisible by {}",
            img.height(),
            img.width(),
            factor
        )));
    }
    let (oh, ow, ch) = (img.height() / factor, img.width() / factor, img.channels());
    let norm = (factor * factor) as f64;
    Image::from_fn(oh, ow, ch, |r, c, k| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += img.get(r * factor + dr, c * factor + dc, k);
            }
        }
        acc / norm
    })
}
