use super::{NormStats, PlaneTensor, RasterImage};
use crate::Scalar;

/// `(sample / 255 - mean_c) / std_c`, laid out channel-major.
pub fn to_tensor_normalized<T: Scalar>(img: &RasterImage, stats: &NormStats) -> PlaneTensor<T> {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut data = vec![T::zero(); 3 * n];
    for c in 0..3 {
        let mean = stats.mean[c];
        let inv_std = 1.0 / stats.std[c];
        // 256-entry lookup keeps the per-pixel work to a table read
        let lut: Vec<T> = (0..256).map(|v| T::lit((v as f64 / 255.0 - mean) * inv_std)).collect();
        for (dst, px) in data[c * n..(c + 1) * n].iter_mut().zip(img.data().chunks_exact(3)) {
            *dst = lut[px[c] as usize];
        }
    }
    PlaneTensor { channels: 3, height: h, width: w, data }
}

/// Inverse of [`to_tensor_normalized`], rounding back to 8-bit samples.
pub fn denormalize<T: Scalar>(t: &PlaneTensor<T>, stats: &NormStats) -> RasterImage {
    assert_eq!(t.channels, 3, "denormalize expects a 3-channel tensor");
    let n = t.width * t.height;
    let planes: Vec<Vec<u8>> = (0..3)
        .map(|c| {
            t.plane(c)
                .iter()
                .map(|v| ((v.as_f64() * stats.std[c] + stats.mean[c]) * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        })
        .collect();
    debug_assert!(planes.iter().all(|p| p.len() == n));
    RasterImage::from_planes(t.width, t.height, [&planes[0], &planes[1], &planes[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channel_extremes() {
        let img = RasterImage::new(2, 1, vec![255, 0, 0, 124, 0, 0]).unwrap();
        let t: PlaneTensor<f64> = to_tensor_normalized(&img, &NormStats::IMAGENET);
        assert!((t.plane(0)[0] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((t.plane(0)[0] - 2.2489).abs() < 1e-4);
        assert!((t.plane(2)[0] - (-0.406 / 0.225)).abs() < 1e-12);
        assert!((t.plane(2)[0] + 1.8044).abs() < 1e-4);
        // 123.675 = 0.485 * 255 sits between integer samples 123 and 124
        assert!(t.plane(0)[1].abs() < 0.5 / 255.0 / 0.229 + 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_is_invertible(data in proptest::collection::vec(any::<u8>(), 3 * 6)) {
            let img = RasterImage::new(3, 2, data).unwrap();
            let t: PlaneTensor<f64> = to_tensor_normalized(&img, &NormStats::IMAGENET);
            for c in 0..3 {
                for (v, s) in t.plane(c).iter().zip(img.channel(c)) {
                    let back = (v * NormStats::IMAGENET.std[c] + NormStats::IMAGENET.mean[c]) * 255.0;
                    prop_assert!((back - s as f64).abs() < 0.5);
                }
            }
            prop_assert_eq!(denormalize(&t, &NormStats::IMAGENET), img);
        }
    }
}
