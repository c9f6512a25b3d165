//! Seeded stochastic augmentation for training images.
//!
//! Fixed order: random resized crop, horizontal flip, vertical flip,
//! rotation, colour jitter (brightness, contrast, saturation, hue), shear.
//! Every random quantity is drawn on every call, whether or not the
//! corresponding transform ends up being an identity, so the stream
//! position never depends on earlier outcomes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{resize_bilinear, ImageError, RasterImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Crop area as a fraction of the source area, `[lo, hi]`.
    pub crop_scale_range: [f64; 2],
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum absolute hue rotation as a fraction of the colour wheel.
    pub hue: f64,
    /// Maximum absolute x-shear angle in degrees.
    pub shear_deg: f64,
    pub rng_seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            crop_scale_range: [0.80, 1.00],
            hflip_prob: 0.5,
            vflip_prob: 0.2,
            rotation_deg: 15.0,
            brightness: 0.30,
            contrast: 0.30,
            saturation: 0.20,
            hue: 0.05,
            shear_deg: 10.0,
            rng_seed: 42,
        }
    }
}

impl AugmentParams {
    /// Parameters under which [`augment`] is the identity.
    pub fn identity() -> Self {
        AugmentParams {
            crop_scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            shear_deg: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let [lo, hi] = self.crop_scale_range;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let nonneg = [self.rotation_deg, self.brightness, self.contrast, self.saturation, self.hue, self.shear_deg];
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(ImageError::InvalidParams(format!("crop scale range [{lo}, {hi}]")));
        }
        if !prob(self.hflip_prob) || !prob(self.vflip_prob) {
            return Err(ImageError::InvalidParams("flip probabilities must lie in [0, 1]".into()));
        }
        if nonneg.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(ImageError::InvalidParams("jitter and angle ranges must be finite and >= 0".into()));
        }
        if self.brightness > 1.0 || self.contrast > 1.0 || self.saturation > 1.0 || self.hue > 0.5 {
            return Err(ImageError::InvalidParams("jitter range too wide".into()));
        }
        Ok(())
    }
}

/// Applies the augmentation chain; output has the input's dimensions.
pub fn augment<R: Rng + ?Sized>(img: &RasterImage, params: &AugmentParams, rng: &mut R) -> RasterImage {
    let (w, h) = (img.width(), img.height());

    let scale = uniform(rng, params.crop_scale_range[0], params.crop_scale_range[1]);
    let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
    let hflip = rng.random::<f64>() < params.hflip_prob;
    let vflip = rng.random::<f64>() < params.vflip_prob;
    let angle = uniform(rng, -params.rotation_deg, params.rotation_deg);
    let brightness = uniform(rng, 1.0 - params.brightness, 1.0 + params.brightness);
    let contrast = uniform(rng, 1.0 - params.contrast, 1.0 + params.contrast);
    let saturation = uniform(rng, 1.0 - params.saturation, 1.0 + params.saturation);
    let hue = uniform(rng, -params.hue, params.hue);
    let shear = uniform(rng, -params.shear_deg, params.shear_deg);

    let mut out = random_resized_crop(img, scale, u, v);
    if hflip {
        out = flip_horizontal(&out);
    }
    if vflip {
        out = flip_vertical(&out);
    }
    out = rotate(&out, angle);
    out = adjust_brightness(&out, brightness);
    out = adjust_contrast(&out, contrast);
    out = adjust_saturation(&out, saturation);
    out = adjust_hue(&out, hue);
    out = shear_x(&out, shear);
    debug_assert_eq!((out.width(), out.height()), (w, h));
    out
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let t: f64 = rng.random();
    lo + (hi - lo) * t
}

/// Square crop covering `scale` of the shorter side squared, positioned by
/// `(u, v)` in `[0, 1)`, resized back to the source dimensions.
pub fn random_resized_crop(img: &RasterImage, scale: f64, u: f64, v: f64) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let side_w = ((w as f64 * scale.sqrt()).round() as usize).clamp(1, w);
    let side_h = ((h as f64 * scale.sqrt()).round() as usize).clamp(1, h);
    if side_w == w && side_h == h {
        return img.clone();
    }
    let x0 = ((w - side_w + 1) as f64 * u).floor() as usize;
    let y0 = ((h - side_h + 1) as f64 * v).floor() as usize;
    let (x0, y0) = (x0.min(w - side_w), y0.min(h - side_h));
    let mut data = Vec::with_capacity(side_w * side_h * 3);
    for y in y0..y0 + side_h {
        let row = &img.data()[(y * w + x0) * 3..(y * w + x0 + side_w) * 3];
        data.extend_from_slice(row);
    }
    let crop = RasterImage::new(side_w, side_h, data).expect("crop shape");
    resize_bilinear(&crop, w, h)
}

pub fn flip_horizontal(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(w - 1 - x, y));
        }
    }
    out
}

pub fn flip_vertical(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        let src = &img.data()[(h - 1 - y) * w * 3..(h - y) * w * 3];
        out.data_mut()[y * w * 3..(y + 1) * w * 3].copy_from_slice(src);
    }
    out
}

/// Resamples through an inverse map `dst -> src` about the image centre with
/// bilinear interpolation and zero padding.
fn warp(img: &RasterImage, inverse: [[f64; 2]; 2]) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = RasterImage::filled(w, h, [0, 0, 0]);
    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.data()[(y as usize * w + x as usize) * 3 + c] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = inverse[0][0] * dx + inverse[0][1] * dy + cx - 0.5;
            let sy = inverse[1][0] * dx + inverse[1][1] * dy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                let bottom = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                *p = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Counter-clockwise rotation by `degrees` about the centre.
pub fn rotate(img: &RasterImage, degrees: f64) -> RasterImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    // image y points down, so this is the inverse of a visual CCW turn
    warp(img, [[c, -s], [s, c]])
}

/// Horizontal shear by `degrees` about the centre row.
pub fn shear_x(img: &RasterImage, degrees: f64) -> RasterImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let t = degrees.to_radians().tan();
    warp(img, [[1.0, -t], [0.0, 1.0]])
}

fn map_pixels(img: &RasterImage, f: impl Fn([f64; 3]) -> [f64; 3]) -> RasterImage {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let v = f([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            px[c] = v[c].round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[inline]
fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn adjust_brightness(img: &RasterImage, factor: f64) -> RasterImage {
    if factor == 1.0 {
        return img.clone();
    }
    map_pixels(img, |p| p.map(|v| v * factor))
}

/// Blends each pixel with the image's mean luma.
pub fn adjust_contrast(img: &RasterImage, factor: f64) -> RasterImage {
    if factor == 1.0 {
        return img.clone();
    }
    let n = (img.width() * img.height()) as f64;
    let mean = img
        .data()
        .chunks_exact(3)
        .map(|p| luma([p[0] as f64, p[1] as f64, p[2] as f64]))
        .sum::<f64>()
        / n;
    map_pixels(img, |p| p.map(|v| mean + factor * (v - mean)))
}

/// Blends each pixel with its own grey level.
pub fn adjust_saturation(img: &RasterImage, factor: f64) -> RasterImage {
    if factor == 1.0 {
        return img.clone();
    }
    map_pixels(img, |p| {
        let g = luma(p);
        p.map(|v| g + factor * (v - g))
    })
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(img: &RasterImage, shift: f64) -> RasterImage {
    if shift == 0.0 {
        return img.clone();
    }
    map_pixels(img, |p| {
        let (h, s, v) = rgb_to_hsv(p);
        hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
    })
}

fn rgb_to_hsv(p: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = p.map(|v| v / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}
