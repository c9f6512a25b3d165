use super::{AttentionMap, ExplainError};
use crate::imaging::RasterImage;

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Jet colormap on `[0, 1]`, from dark blue through cyan and yellow to dark red.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Blends the jet-coloured map over the image with weight 0.4. A degenerate
/// map leaves the image unchanged.
pub fn render_overlay(img: &RasterImage, a: &AttentionMap) -> Result<RasterImage, ExplainError> {
    if (a.width, a.height) != (img.width(), img.height()) {
        return Err(ExplainError::DimMismatch { expected: (img.width(), img.height()), actual: (a.width, a.height) });
    }
    if a.degenerate {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for (px, &v) in out.data_mut().chunks_exact_mut(3).zip(&a.values) {
        let c = jet(v as f64);
        for k in 0..3 {
            let blended = (1.0 - OVERLAY_ALPHA) * px[k] as f64 + OVERLAY_ALPHA * 255.0 * c[k];
            px[k] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
