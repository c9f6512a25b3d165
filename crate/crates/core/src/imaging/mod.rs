//! Raster containers, codecs, resampling, normalization and augmentation.

mod augment;
mod codec;
mod raster;
mod resize;
mod tensor;

pub use augment::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, augment, flip_horizontal,
    flip_vertical, random_resized_crop, rotate, shear_x, AugmentParams,
};
pub use codec::{
    decode_gray_png, decode_image, decode_image_with, encode_gray_png, encode_png, encode_ppm, QcConfig,
};
pub use raster::{BinaryMask, GrayImage, NormStats, PlaneTensor, RasterImage};
pub use resize::{resize_bilinear, resize_plane};
pub use tensor::{denormalize, to_tensor_normalized};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("file looks suspicious: {len} bytes, minimum is {min}")]
    SuspiciousFile { len: usize, min: usize },
    #[error("image could not be decoded: {0}")]
    Undecodable(String),
    #[error("image could not be encoded: {0}")]
    Encode(String),
    #[error("image dimensions must be positive")]
    EmptyDimensions,
    #[error("buffer holds {actual} samples, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}
