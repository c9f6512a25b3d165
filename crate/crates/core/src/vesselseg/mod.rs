//! Classical vessel segmentation: green channel, CLAHE, morphological
//! enhancement, Otsu threshold above a robust noise floor, small-component
//! cleanup.

mod clahe;
mod components;
mod morph;
mod otsu;

use serde::{Deserialize, Serialize};

pub use clahe::{clahe, tile_lut};
pub use components::{label_components, remove_small_components};
pub use morph::{morph, MorphOp};
pub use otsu::{histogram, otsu_from_histogram, otsu_threshold};

use crate::imaging::{BinaryMask, GrayImage, RasterImage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegError {
    #[error("image {width}x{height} is smaller than the {tiles:?} tile grid")]
    ImageSmallerThanTileGrid { width: usize, height: usize, tiles: (usize, usize) },
    #[error("histogram has fewer than two distinct values")]
    DegenerateHistogram,
    #[error("invalid segmentation parameters: {0}")]
    InvalidParams(String),
}

/// How the enhanced (vessels bright) image is turned into a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MorphFilter {
    /// Black-hat of the original polarity, i.e. top-hat of the enhanced
    /// image: thin structures narrower than the disk survive.
    #[default]
    BlackHat,
    /// The enhanced image itself; the thresholded mask is opened with a
    /// radius-1 disk.
    OpeningCleanup,
}

/// Segmentation parameters. Pixel sizes are given at `reference_size` and
/// scale with the image's shorter side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegParams {
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    pub se_radius: usize,
    pub min_component_px: usize,
    /// Pixels trimmed from the estimated field-of-view radius.
    pub fov_margin_px: f64,
    pub reference_size: usize,
    pub filter: MorphFilter,
    /// Response levels up to `median + k * 1.4826 * MAD` inside the field of
    /// view are treated as noise and zeroed before thresholding.
    pub noise_floor_k: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        SegParams {
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            se_radius: 7,
            min_component_px: 30,
            fov_margin_px: 2.0,
            reference_size: 224,
            filter: MorphFilter::BlackHat,
            noise_floor_k: 3.0,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<(), SegError> {
        let ok = self.clahe_tiles.0 > 0
            && self.clahe_tiles.1 > 0
            && self.clahe_clip > 0.0
            && self.se_radius > 0
            && self.min_component_px > 0
            && self.fov_margin_px >= 0.0
            && self.reference_size > 0
            && self.noise_floor_k >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SegError::InvalidParams(format!("{self:?}")))
        }
    }

    fn scale(&self, width: usize, height: usize) -> f64 {
        width.min(height) as f64 / self.reference_size as f64
    }

    /// Disk radius for an image of the given size, at least 1.
    pub fn se_radius_for(&self, width: usize, height: usize) -> usize {
        ((self.se_radius as f64 * self.scale(width, height)).round() as usize).max(1)
    }

    /// Minimum component area, scaled with image area.
    pub fn min_component_for(&self, width: usize, height: usize) -> usize {
        let s = self.scale(width, height);
        ((self.min_component_px as f64 * s * s).round() as usize).max(1)
    }
}

/// Centre and radius of a circular field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fov {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Fov {
    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
            dx * dx + dy * dy <= self.r * self.r
        })
    }
}

/// Field of view from pixels whose mean RGB exceeds 10% of the image's
/// maximum: centroid of those pixels, radius from their area, minus
/// `margin`. `None` when no pixel qualifies.
pub fn estimate_fov(img: &RasterImage, margin: f64) -> Option<Fov> {
    let means: Vec<u32> = img.data().chunks_exact(3).map(|p| p.iter().map(|&v| v as u32).sum()).collect();
    let max = *means.iter().max()?;
    if max == 0 {
        return None;
    }
    // mean > max_mean / 10  <=>  10 * sum > max_sum
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for (i, &m) in means.iter().enumerate() {
        if 10 * m > max {
            n += 1;
            sx += (i % img.width()) as f64 + 0.5;
            sy += (i / img.width()) as f64 + 0.5;
        }
    }
    let r = (n as f64 / std::f64::consts::PI).sqrt() - margin;
    Some(Fov { cx: sx / n as f64, cy: sy / n as f64, r: r.max(0.0) })
}

/// Green channel with pixels outside `fov` replaced by the in-FOV mean, so
/// the field-of-view edge does not register as structure.
fn green_inside(img: &RasterImage, fov: &BinaryMask) -> GrayImage {
    let green = img.channel(1);
    let (mut sum, mut n) = (0u64, 0u64);
    for (i, &g) in green.iter().enumerate() {
        if fov.is_set(i) {
            sum += g as u64;
            n += 1;
        }
    }
    let fill = if n == 0 { 0 } else { ((sum as f64 / n as f64).round()) as u8 };
    let data = green.iter().enumerate().map(|(i, &g)| if fov.is_set(i) { g } else { fill }).collect();
    GrayImage { width: img.width(), height: img.height(), data }
}

/// Median of the in-FOV levels plus `k` robust standard deviations, rounded.
fn noise_floor(g: &GrayImage, fov: &BinaryMask, k: f64) -> u8 {
    let mut hist = [0usize; 256];
    for (i, &v) in g.data.iter().enumerate() {
        if fov.is_set(i) {
            hist[v as usize] += 1;
        }
    }
    let n: usize = hist.iter().sum();
    if n == 0 {
        return 0;
    }
    // lower median of a histogram
    let quantile = |h: &[usize]| {
        let mut acc = 0;
        h.iter().position(|&c| {
            acc += c;
            2 * acc >= n
        })
        .unwrap_or(0)
    };
    let med = quantile(&hist);
    let mut dev = [0usize; 256];
    for (v, &c) in hist.iter().enumerate() {
        dev[v.abs_diff(med)] += c;
    }
    let mad = quantile(&dev) as f64;
    (med as f64 + k * 1.4826 * mad).round().clamp(0.0, 255.0) as u8
}

/// Intermediate images of [`segment_vessels`].
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub fov: BinaryMask,
    pub enhanced: GrayImage,
    pub response: GrayImage,
    /// `None` when the response is flat inside the field of view.
    pub threshold: Option<u8>,
    /// Pixels must also exceed this level.
    pub noise_floor: u8,
    pub mask: BinaryMask,
}

pub fn segment_vessels(img: &RasterImage, params: &SegParams) -> Result<BinaryMask, SegError> {
    Ok(segment_vessels_detailed(img, params)?.mask)
}

pub fn segment_vessels_detailed(img: &RasterImage, params: &SegParams) -> Result<Segmentation, SegError> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let fov = match estimate_fov(img, params.fov_margin_px * params.scale(w, h)) {
        Some(f) => f.mask(w, h),
        None => BinaryMask::empty(w, h),
    };
    let enhanced = clahe(&green_inside(img, &fov).inverted(), params.clahe_tiles, params.clahe_clip)?;
    let radius = params.se_radius_for(w, h);
    let response = match params.filter {
        MorphFilter::BlackHat => morph(&enhanced, MorphOp::TopHat, radius),
        MorphFilter::OpeningCleanup => enhanced.clone(),
    };
    let floor = noise_floor(&response, &fov, params.noise_floor_k);
    let threshold = match otsu_threshold(&response, Some(&fov)) {
        Ok(t) => Some(t),
        Err(SegError::DegenerateHistogram) => None,
        Err(e) => return Err(e),
    };
    let mut mask = match threshold {
        Some(t) => BinaryMask::from_fn(w, h, |x, y| fov.get(x, y) && response.get(x, y) > t.max(floor)),
        None => BinaryMask::empty(w, h),
    };
    if params.filter == MorphFilter::OpeningCleanup {
        let opened = morph(&mask.to_gray(), MorphOp::Open, 1);
        mask = BinaryMask::from_nonzero(w, h, &opened.data).expect("same dimensions");
    }
    let mask = remove_small_components(&mask, params.min_component_for(w, h)).intersection(&fov);
    Ok(Segmentation { fov, enhanced, response, threshold, noise_floor: floor, mask })
}
