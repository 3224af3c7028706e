//! Image decoding, quality normalization, resizing, flip augmentation and
//! conversion to model-input tensors.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::dataset::{SampleRecord, Split, FLIP_SUFFIX};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

/// Default model input side length.
pub const INPUT_SIDE: usize = 224;

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                format!("{} pixels for {width}×{height}", width * height),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Encode losslessly as PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.pixels, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::Decode { container: "png".into(), message: e.to_string() })?;
        Ok(out)
    }
}

fn container_name(bytes: &[u8]) -> String {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => "png".into(),
        Ok(ImageFormat::Jpeg) => "jpeg".into(),
        Ok(other) => format!("{other:?}").to_lowercase(),
        Err(_) => "unknown".into(),
    }
}

/// Rec. 601 luma, rounded to nearest.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
}

/// Decode a PNG or JPEG stream to grayscale.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let container = container_name(bytes);
    let fail = |message: String| Error::Decode { container: container.clone(), message };
    let format = match container.as_str() {
        "png" => ImageFormat::Png,
        "jpeg" => {
            if !has_jpeg_eoi(bytes) {
                return Err(fail("stream truncated: no end-of-image marker".into()));
            }
            ImageFormat::Jpeg
        }
        _ => return Err(fail("not a PNG or JPEG stream".into())),
    };
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| fail(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_luma8().into_raw()
        }
        other => other.to_rgb8().pixels().map(|p| luma(p[0], p[1], p[2])).collect(),
    };
    GrayImage::new(width, height, pixels)
}

fn has_jpeg_eoi(bytes: &[u8]) -> bool {
    let trimmed = bytes.iter().rposition(|&b| b != 0).map(|i| &bytes[..=i]).unwrap_or(&[]);
    trimmed.ends_with(&[0xFF, 0xD9])
}

/// Encode as baseline JPEG at `quality` (1–100).
pub fn encode_jpeg(img: &GrayImage, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Argument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let mut out = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut out, quality)
        .encode(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Decode { container: "jpeg".into(), message: e.to_string() })?;
    Ok(out.into_inner())
}

/// Decode, then re-encode as grayscale baseline JPEG at `quality`.
pub fn jpeg_normalize(bytes: &[u8], quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Argument(format!("jpeg quality {quality} outside 1..=100")));
    }
    encode_jpeg(&decode_image(bytes)?, quality)
}

/// Bilinear resize with half-pixel-center sampling and edge clamping.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument(format!("target size {out_w}×{out_h} has a zero dimension")));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Argument("cannot resize an empty image".into()));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

/// Mirror left to right.
pub fn hflip(img: &GrayImage) -> GrayImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(img.width.max(1)) {
        pixels.extend(row.iter().rev());
    }
    GrayImage { width: img.width, height: img.height, pixels }
}

/// A manifest record paired with its decoded image.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub record: SampleRecord,
    pub image: GrayImage,
}

/// Append one flipped copy (id suffixed `#flip`) of every train record.
/// Non-train records pass through untouched.
pub fn augment_offline(records: Vec<ImageRecord>) -> Vec<ImageRecord> {
    let flips: Vec<ImageRecord> = records
        .iter()
        .filter(|r| r.record.split == Split::Train)
        .map(|r| {
            let mut record = r.record.clone();
            record.id.push_str(FLIP_SUFFIX);
            ImageRecord { record, image: hflip(&r.image) }
        })
        .collect();
    let mut out = records;
    out.extend(flips);
    out
}

/// Pixel scaling applied by [`tensorize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PixelNorm {
    /// `x / 255`.
    #[default]
    Unit,
    /// `(x / 255 - mean[c]) / std[c]` per channel.
    MeanStd { mean: [f32; 3], std: [f32; 3] },
}

/// Replicate a square gray image into a `[3, side, side]` tensor.
pub fn tensorize(img: &GrayImage, side: usize) -> Result<TensorF32> {
    tensorize_with(img, side, PixelNorm::Unit)
}

pub fn tensorize_with(img: &GrayImage, side: usize, norm: PixelNorm) -> Result<TensorF32> {
    if img.width != side || img.height != side {
        return Err(Error::Argument(format!(
            "tensorize expects {side}×{side}, got {}×{}; resize first",
            img.width, img.height
        )));
    }
    let plane: Vec<f32> = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for c in 0..3 {
        match norm {
            PixelNorm::Unit => data.extend_from_slice(&plane),
            PixelNorm::MeanStd { mean, std } => {
                data.extend(plane.iter().map(|v| (v - mean[c]) / std[c]));
            }
        }
    }
    TensorF32::new(vec![3, side, side], data)
}

/// Peak signal-to-noise ratio in dB between equal-size images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!("{}×{}", a.width, a.height), format!("{}×{}", b.width, b.height)));
    }
    let mse = a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.pixels.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (255.0f64 * 255.0 / mse).log10() })
}
