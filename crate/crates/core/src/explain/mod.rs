//! Grad-CAM attention, attention/vessel overlap, and region masking.

mod gradcam;
mod masking;
mod overlay;
mod regions;

use serde::{Deserialize, Serialize};

pub use gradcam::{grad_cam, grad_cam_raw, threshold_attention, AttentionMap, ATTENTION_THRESHOLD};
pub use masking::{
    effective_mask, fov_mean, mask_region, mask_region_with_fill, masking_experiment, FillPolicy, MaskingReport,
    MaskingRow, Region, RegionSource, RegionSpec, MASKING_HEADER, VESSEL_DILATION_PX,
};
pub use overlay::{jet, render_overlay, OVERLAY_ALPHA};
pub use regions::{
    estimate_disc, estimate_macula, estimate_regions, region_specs, CircleEstimate, DISC_TO_FOV, MACULA_OFFSET_DD,
    MACULA_TO_DISC,
};

use crate::imaging::BinaryMask;
use crate::model::ModelError;
use crate::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch { expected: (usize, usize), actual: (usize, usize) },
    #[error("malformed attention data: {0}")]
    Format(String),
    #[error("image {image} has no `{region}` region")]
    MissingRegion { image: usize, region: Region },
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub iou: f64,
    /// Both masks were empty; `iou` is then 0 by convention.
    pub both_empty: bool,
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<IouResult, ExplainError> {
    if !a.same_dims(b) {
        return Err(ExplainError::DimMismatch { expected: (a.width, a.height), actual: (b.width, b.height) });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..a.len() {
        let (x, y) = (a.is_set(i), b.is_set(i));
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(IouResult { iou: 0.0, both_empty: true });
    }
    Ok(IouResult { iou: inter as f64 / union as f64, both_empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, bits: &[bool]) -> BinaryMask {
        BinaryMask::from_fn(w, bits.len() / w, |x, y| bits[y * w + x])
    }

    #[test]
    fn iou_examples() {
        let top = BinaryMask::from_fn(2, 2, |_, y| y == 0);
        let left = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        assert_eq!(mask_iou(&top, &left).unwrap().iou, 1.0 / 3.0);
        assert_eq!(mask_iou(&top, &top).unwrap().iou, 1.0);
        assert_eq!(mask_iou(&top, &top.complement()).unwrap().iou, 0.0);
        let e = BinaryMask::empty(2, 2);
        assert_eq!(mask_iou(&e, &e).unwrap(), IouResult { iou: 0.0, both_empty: true });
        assert!(matches!(mask_iou(&e, &BinaryMask::empty(3, 2)), Err(ExplainError::DimMismatch { .. })));
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(bits in proptest::collection::vec(any::<(bool, bool)>(), 12)) {
            let a = mask(4, &bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let b = mask(4, &bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab.iou));
            prop_assert_eq!(ab.iou == 1.0, a == b && !a.is_empty());
        }
    }
}
