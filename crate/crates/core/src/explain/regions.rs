//! Region masks for images without generator ground truth.

use std::collections::BTreeMap;

use super::{FillPolicy, Region, RegionSource, RegionSpec};
use crate::imaging::{BinaryMask, RasterImage};
use crate::synthgen::{AnatomyMasks, FOV_RADIUS};
use crate::vesselseg::{estimate_fov, segment_vessels, Fov, SegError, SegParams};

/// Optic disc radius as a fraction of the field-of-view radius.
pub const DISC_TO_FOV: f64 = 0.075 / FOV_RADIUS;
/// Disc-centre to macula-centre distance, in disc diameters.
pub const MACULA_OFFSET_DD: f64 = 2.5;
/// Macula radius in disc radii.
pub const MACULA_TO_DISC: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleEstimate {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl CircleEstimate {
    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        Fov { cx: self.cx, cy: self.cy, r: self.r }.mask(width, height)
    }
}

/// Summed-area table of per-pixel RGB sums.
fn integral(img: &RasterImage) -> Vec<u64> {
    let (w, h) = (img.width(), img.height());
    let mut s = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            let p = img.pixel(x, y);
            row += p.iter().map(|&v| v as u64).sum::<u64>();
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Optic disc as the brightest disc-sized window whose disc lies inside the
/// field of view. A square of equal area stands in for the disc template.
pub fn estimate_disc(img: &RasterImage, fov: &Fov) -> Option<CircleEstimate> {
    let (w, h) = (img.width(), img.height());
    let r = DISC_TO_FOV * fov.r;
    let half = ((std::f64::consts::PI.sqrt() * r) / 2.0).round().max(1.0) as usize;
    let sat = integral(img);
    let box_sum = |x0: usize, y0: usize, x1: usize, y1: usize| {
        sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
    };
    let mut best: Option<(u64, usize, usize)> = None;
    for cy in half..h.saturating_sub(half) {
        for cx in half..w.saturating_sub(half) {
            let (px, py) = (cx as f64 + 0.5, cy as f64 + 0.5);
            if (px - fov.cx).hypot(py - fov.cy) + r > fov.r {
                continue;
            }
            let s = box_sum(cx - half, cy - half, cx + half + 1, cy + half + 1);
            if best.is_none_or(|(b, _, _)| s > b) {
                best = Some((s, cx, cy));
            }
        }
    }
    best.map(|(_, cx, cy)| CircleEstimate { cx: cx as f64 + 0.5, cy: cy as f64 + 0.5, r })
}

/// Macula at a fixed offset from the disc toward the field-of-view centre.
pub fn estimate_macula(disc: &CircleEstimate, fov: &Fov) -> CircleEstimate {
    let (dx, dy) = (fov.cx - disc.cx, fov.cy - disc.cy);
    let len = dx.hypot(dy);
    // a disc at the exact centre gives no direction; fall back to temporal-left
    let (ux, uy) = if len > 1e-9 { (dx / len, dy / len) } else { (-1.0, 0.0) };
    let d = MACULA_OFFSET_DD * 2.0 * disc.r;
    CircleEstimate { cx: disc.cx + ux * d, cy: disc.cy + uy * d, r: MACULA_TO_DISC * disc.r }
}

/// Estimated region masks, disjoint with priority vessel > disc > macula >
/// background.
pub fn estimate_regions(img: &RasterImage, seg: &SegParams) -> Result<BTreeMap<Region, RegionSpec>, SegError> {
    let (w, h) = (img.width(), img.height());
    let vessel = segment_vessels(img, seg)?;
    let fov = estimate_fov(img, 0.0).ok_or(SegError::DegenerateHistogram)?;
    let disc_c = estimate_disc(img, &fov).ok_or(SegError::DegenerateHistogram)?;
    let mac_c = estimate_macula(&disc_c, &fov);
    let disc = disc_c.mask(w, h).minus(&vessel);
    let macula = mac_c.mask(w, h).minus(&vessel).minus(&disc);
    let background = vessel.union(&disc).union(&macula).complement();
    let masks = AnatomyMasks { vessel, disc, macula, background };
    Ok(region_specs(&masks, RegionSource::Estimated))
}

/// Region specs from a full set of anatomy masks, plus the empty control.
pub fn region_specs(masks: &AnatomyMasks, source: RegionSource) -> BTreeMap<Region, RegionSpec> {
    let (w, h) = (masks.vessel.width, masks.vessel.height);
    [
        (Region::Vessel, masks.vessel.clone()),
        (Region::Macula, masks.macula.clone()),
        (Region::OpticDisc, masks.disc.clone()),
        (Region::Background, masks.background.clone()),
        (Region::Empty, BinaryMask::empty(w, h)),
    ]
    .into_iter()
    .map(|(region, mask)| (region, RegionSpec { region, mask, source, fill: FillPolicy::FovMean }))
    .collect()
}
