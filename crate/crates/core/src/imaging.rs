//! Pixel containers shared by every stage, plus PNG encode/decode helpers.
//!
//! Color images are plain [`image::RgbImage`]. Single-channel maps get their
//! own types so the binary-mask invariant can be enforced at construction.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::ImageFormat;

use crate::error::{Error, Result};

pub use image::{Rgb, RgbImage};

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    Ok(())
}

pub(crate) fn check_same(expected: (u32, u32), actual: (u32, u32)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// 8-bit single-channel intensity map, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidPixels(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; (width as usize) * (height as usize)])
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Result<Self> {
        check_dims(width, height)?;
        let mut values = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.values[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.values
    }

    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width, self.height, self.values.clone())
            .expect("length checked at construction")
    }

    pub fn from_image(img: &image::GrayImage) -> Result<Self> {
        Self::new(img.width(), img.height(), img.as_raw().clone())
    }
}

/// Strictly binary foreground mask (values 0 or 1), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidPixels(format!(
                "{} values for a {width}x{height} mask",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidPixels(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![0; (width as usize) * (height as usize)])
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![1; (width as usize) * (height as usize)])
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut values = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.values[(y as usize) * (self.width as usize) + x as usize] == 1
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// On-disk form: 0 for background, 255 for foreground.
    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(
            self.width,
            self.height,
            self.values.iter().map(|&v| v * 255).collect(),
        )
        .expect("length checked at construction")
    }

    /// Accepts only the on-disk values {0, 255}.
    pub fn from_image(img: &image::GrayImage) -> Result<Self> {
        let mut values = Vec::with_capacity(img.as_raw().len());
        for &v in img.as_raw() {
            match v {
                0 => values.push(0),
                255 => values.push(1),
                other => {
                    return Err(Error::InvalidPixels(format!(
                        "mask pixel value {other}; expected 0 or 255"
                    )))
                }
            }
        }
        Self::new(img.width(), img.height(), values)
    }
}

pub fn check_image(img: &RgbImage) -> Result<()> {
    check_dims(img.width(), img.height())
}

/// Rec.601 integer luma.
pub fn luma(px: &Rgb<u8>) -> u8 {
    let [r, g, b] = px.0;
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn to_luma(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width(),
        height: img.height(),
        values: img.pixels().map(luma).collect(),
    }
}

pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    image::imageops::resize(img, width, height, image::imageops::FilterType::Triangle)
}

pub fn resize_gray(img: &GrayImage, width: u32, height: u32) -> GrayImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let out = image::imageops::resize(
        &img.to_image(),
        width,
        height,
        image::imageops::FilterType::Triangle,
    );
    GrayImage::from_image(&out).expect("resize keeps non-zero dimensions")
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory does not fail");
    buf.into_inner()
}

pub fn encode_png_gray(img: &image::GrayImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory does not fail");
    buf.into_inner()
}

pub fn decode_png_rgb(bytes: &[u8]) -> std::result::Result<RgbImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn decode_png_gray(bytes: &[u8]) -> std::result::Result<image::GrayImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = img.to_rgb8();
    check_image(&img)?;
    Ok(img)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    GrayImage::from_image(&img.to_luma8())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::InvalidPixels(format!(
            "{}: masks must be single-channel 8-bit PNG",
            path.display()
        )));
    }
    BinaryMask::from_image(&img.to_luma8())
}

pub fn base64_png_rgb(img: &RgbImage) -> String {
    BASE64.encode(encode_png_rgb(img))
}

pub fn base64_decode(text: &str) -> std::result::Result<Vec<u8>, base64::DecodeError> {
    BASE64.decode(text)
}

pub fn base64_encode(bytes: &[u8]) -> String {
    BASE64.encode(bytes)
}

/// Serde adapters that store images as base64 PNG strings.
pub mod serde_png {
    use super::*;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub mod rgb {
        use super::*;

        pub fn serialize<S: Serializer>(img: &RgbImage, s: S) -> std::result::Result<S::Ok, S::Error> {
            s.serialize_str(&base64_png_rgb(img))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<RgbImage, D::Error> {
            let text = String::deserialize(d)?;
            let bytes = base64_decode(&text).map_err(D::Error::custom)?;
            decode_png_rgb(&bytes).map_err(D::Error::custom)
        }
    }

    pub mod gray {
        use super::*;

        pub fn serialize<S: Serializer>(img: &GrayImage, s: S) -> std::result::Result<S::Ok, S::Error> {
            s.serialize_str(&base64_encode(&encode_png_gray(&img.to_image())))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<GrayImage, D::Error> {
            let text = String::deserialize(d)?;
            let bytes = base64_decode(&text).map_err(D::Error::custom)?;
            let img = decode_png_gray(&bytes).map_err(D::Error::custom)?;
            GrayImage::from_image(&img).map_err(D::Error::custom)
        }
    }

    pub mod mask {
        use super::*;

        pub fn serialize<S: Serializer>(m: &BinaryMask, s: S) -> std::result::Result<S::Ok, S::Error> {
            s.serialize_str(&base64_encode(&encode_png_gray(&m.to_image())))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BinaryMask, D::Error> {
            let text = String::deserialize(d)?;
            let bytes = base64_decode(&text).map_err(D::Error::custom)?;
            let img = decode_png_gray(&bytes).map_err(D::Error::custom)?;
            BinaryMask::from_image(&img).map_err(D::Error::custom)
        }
    }
}
