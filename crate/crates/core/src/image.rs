//! Raster, mask, and prompt types plus the elementwise mask algebra.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An RGB raster with channel values in `[0, 1]`, stored row-major and
/// channel-interleaved (`data[(y * width + x) * 3 + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("zero image dimension {width}x{height}")));
        }
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Constant-colour image.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values snapped to the 8-bit grid used by the file writers.
    pub fn quantize8(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect(),
        }
    }

    /// Platform-independent SHA-256 of the dimensions and raw `f32` values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"image");
        hasher.update((self.width as u32).to_le_bytes());
        hasher.update((self.height as u32).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A hard region mask; every value is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    /// Binarize a soft mask at 0.5 (values `>= 0.5` become 1).
    pub fn from_soft(width: usize, height: usize, soft: &[f32]) -> Result<Self> {
        let data = soft.iter().map(|&v| u8::from(v >= 0.5)).collect();
        Self::new(width, height, data)
    }

    /// Build a mask from a predicate over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn invert(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    /// Identifies which region to edit.
    Query,
    /// Describes what to generate inside the region.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    text: String,
    role: PromptRole,
}

impl TextPrompt {
    pub fn new(text: impl Into<String>, role: PromptRole) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt text is empty"));
        }
        Ok(Self { text, role })
    }

    pub fn query(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptRole::Query)
    }

    pub fn conditional(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptRole::Conditional)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }
}

/// `I ⊙ M`: zero every pixel outside the mask.
pub fn apply_mask(image: &Image, mask: &BinaryMask) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "image is {:?} but mask is {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    let data = image
        .data
        .chunks_exact(3)
        .zip(&mask.data)
        .flat_map(|(px, &m)| {
            let m = f32::from(m);
            [px[0] * m, px[1] * m, px[2] * m]
        })
        .collect();
    Ok(Image { width: image.width, height: image.height, data })
}

/// Pixelwise maximum over a non-empty list of same-sized masks.
pub fn mask_union<'a, I>(masks: I) -> Result<BinaryMask>
where
    I: IntoIterator<Item = &'a BinaryMask>,
{
    let mut iter = masks.into_iter();
    let mut out = iter
        .next()
        .ok_or_else(|| Error::invalid("mask union over an empty list"))?
        .clone();
    for m in iter {
        if m.dims() != out.dims() {
            return Err(Error::shape(format!(
                "mask union of {:?} and {:?}",
                out.dims(),
                m.dims()
            )));
        }
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            *o = (*o).max(v);
        }
    }
    Ok(out)
}

/// Mean `(x, y)` of the set pixels, with pixel centres at integer coordinates.
pub fn mask_centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("centroid of an empty mask".into()));
    }
    Ok((sx / n as f64, sy / n as f64))
}
