//! PNG and PPM decoding/encoding with load-time quality control.

use std::io::Cursor;

use image::{ColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{GrayImage, ImageError, RasterImage};

/// Load-time quality control thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcConfig {
    /// Streams shorter than this are rejected as suspicious.
    pub min_file_bytes: usize,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig { min_file_bytes: 1024 }
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes with the default quality-control thresholds.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    decode_image_with(bytes, &QcConfig::default())
}

pub fn decode_image_with(bytes: &[u8], qc: &QcConfig) -> Result<RasterImage, ImageError> {
    if bytes.is_empty() || bytes.len() < qc.min_file_bytes {
        return Err(ImageError::SuspiciousFile { len: bytes.len(), min: qc.min_file_bytes });
    }
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(bytes)
    } else {
        Err(ImageError::Undecodable("unrecognized format".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Undecodable(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RasterImage::new(w as usize, h as usize, img.into_raw())
}

/// Decodes an 8-bit single-channel PNG (masks, attention maps).
pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Undecodable(e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(w as usize, h as usize, img.into_raw())
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, ImageError> {
    encode_png_raw(img.data(), img.width(), img.height(), ColorType::Rgb8)
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>, ImageError> {
    encode_png_raw(&img.data, img.width, img.height, ColorType::L8)
}

fn encode_png_raw(data: &[u8], w: usize, h: usize, color: ColorType) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out))
        .write_image(data, w as u32, h as u32, color.into())
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out)
}

/// Binary (P6) PPM with maxval 255.
pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&[u8], ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Undecodable("truncated PPM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, ImageError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Undecodable("invalid PPM number".into()))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let mut rd = HeaderReader { bytes, pos: 0 };
    let magic = rd.token()?.to_vec();
    let width = rd.number()?;
    let height = rd.number()?;
    let maxval = rd.number()?;
    if width == 0 || height == 0 {
        return Err(ImageError::Undecodable("zero PPM dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Undecodable(format!("unsupported PPM maxval {maxval}")));
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| ImageError::Undecodable("PPM dimensions overflow".into()))?;
    let scale = |v: usize| -> u8 { ((v * 255 + maxval / 2) / maxval) as u8 };
    let data = match magic.as_slice() {
        b"P6" => {
            // exactly one whitespace byte separates the header from the raster
            let start = rd.pos + 1;
            let payload = bytes
                .get(start..start + n)
                .ok_or_else(|| ImageError::Undecodable("truncated PPM payload".into()))?;
            payload.iter().map(|&v| scale(v as usize)).collect()
        }
        b"P3" => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = rd.number()?;
                if v > maxval {
                    return Err(ImageError::Undecodable("PPM sample exceeds maxval".into()));
                }
                data.push(scale(v));
            }
            data
        }
        _ => return Err(ImageError::Undecodable("unknown PPM magic".into())),
    };
    RasterImage::new(width, height, data)
}
