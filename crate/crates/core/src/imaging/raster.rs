use serde::{Deserialize, Serialize};

use super::ImageError;
use crate::Scalar;

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions);
        }
        if data.len() != width * height * 3 {
            return Err(ImageError::ShapeMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        Ok(RasterImage { width, height, data })
    }

    /// Image with every pixel set to `rgb`.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RasterImage { width, height, data }
    }

    pub fn from_fn_rgb(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RasterImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One channel as a `width * height` plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub(crate) fn from_planes(width: usize, height: usize, planes: [&[u8]; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            data.extend([planes[0][i], planes[1][i], planes[2][i]]);
        }
        RasterImage { width, height, data }
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::ShapeMismatch { expected: width * height, actual: data.len() });
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// `255 - v` pixelwise.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 255 - v).collect(),
        }
    }
}

/// Binary mask; every sample is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![1; width * height] }
    }

    /// Mask from arbitrary bytes: any nonzero sample becomes 1.
    pub fn from_nonzero(width: usize, height: usize, data: &[u8]) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::ShapeMismatch { expected: width * height, actual: data.len() });
        }
        Ok(BinaryMask { width, height, data: data.iter().map(|&v| u8::from(v != 0)).collect() })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert!(self.same_dims(other), "mask dimensions differ");
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Samples scaled to {0, 255} for export.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

/// Channel-major floating-point image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneTensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PlaneTensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self, ImageError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(ImageError::ShapeMismatch { expected, actual: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(PlaneTensor { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        PlaneTensor { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// ImageNet channel statistics.
    pub const IMAGENET: NormStats = NormStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(ImageError::InvalidParams("normalization std must be positive and finite".into()))
        }
    }
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats::IMAGENET
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_rejects_bad_shapes() {
        assert!(matches!(RasterImage::new(0, 1, vec![]), Err(ImageError::EmptyDimensions)));
        assert!(matches!(
            RasterImage::new(2, 2, vec![0; 11]),
            Err(ImageError::ShapeMismatch { expected: 12, actual: 11 })
        ));
    }

    #[test]
    fn mask_set_algebra() {
        let a = BinaryMask::from_fn(2, 2, |_, y| y == 0);
        let b = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        assert_eq!(a.intersection(&b).count(), 1);
        assert_eq!(a.union(&b).count(), 3);
        assert_eq!(a.minus(&b).count(), 1);
        assert_eq!(a.complement().count(), 2);
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(matches!(
            PlaneTensor::<f64>::new(1, 1, 1, vec![f64::NAN]),
            Err(ImageError::NonFinite)
        ));
    }
}
