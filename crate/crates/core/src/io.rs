//! Image and mask files.
//!
//! Reading accepts 8-bit PNG (gray, RGB, or RGBA with alpha dropped) and
//! binary PNM (`P6` colour, `P5` gray). Values map to `v / 255` on read and
//! `round(v * 255)` on write, so a write/read round trip reproduces the
//! 8-bit-quantized image exactly. Masks are gray files where any value
//! `>= 128` reads as set.
//!
//! All writes go to a temporary file in the destination directory and are
//! renamed into place.

use std::io::{Cursor, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::image::{to_u8, BinaryMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Png,
    Ppm,
    Pgm,
}

fn kind_for(path: &Path) -> Result<FileKind> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(FileKind::Png),
        Some("ppm") => Ok(FileKind::Ppm),
        Some("pgm") => Ok(FileKind::Pgm),
        _ => Err(Error::Format(format!(
            "unsupported output extension for {}",
            path.display()
        ))),
    }
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Format(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => return Err(Error::Format(format!("unsupported image format {other:?}"))),
    }
    let img = reader.decode().map_err(|e| Error::Format(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok(img)
}

/// Decode an image from PNG or PPM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let img = decode(bytes)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel type {:?}; expected 8-bit",
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
    Image::new(w, h, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encode to PNG or binary PPM bytes.
pub fn encode_image(image: &Image, as_png: bool) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    let (w, h) = image.dims();
    if as_png {
        let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Format("raster size overflow".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    } else {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        Ok(out)
    }
}

pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match kind_for(path)? {
        FileKind::Png => encode_image(image, true)?,
        FileKind::Ppm => encode_image(image, false)?,
        FileKind::Pgm => {
            return Err(Error::Format("PGM holds masks, not colour images".into()));
        }
    };
    write_atomic(path, &bytes)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let gray = decode(bytes)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|b| u8::from(b >= 128)).collect();
    BinaryMask::new(w, h, data)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_mask(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode_mask(mask: &BinaryMask, as_png: bool) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let (w, h) = mask.dims();
    if as_png {
        let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Format("raster size overflow".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    } else {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        Ok(out)
    }
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match kind_for(path)? {
        FileKind::Png => encode_mask(mask, true)?,
        FileKind::Pgm => encode_mask(mask, false)?,
        FileKind::Ppm => return Err(Error::Format("masks are written as PNG or PGM".into())),
    };
    write_atomic(path, &bytes)
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
