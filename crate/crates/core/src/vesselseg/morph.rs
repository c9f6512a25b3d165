use serde::{Deserialize, Serialize};

use crate::imaging::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
    /// `close(img) - img`
    BlackHat,
    /// `img - open(img)`
    TopHat,
}

/// Offsets `(dx, dy)` with `dx^2 + dy^2 <= r^2`, grouped as one horizontal
/// half-width per row offset.
fn disk_rows(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    (-r..=r).map(|dy| (dy, ((r * r - dy * dy) as f64).sqrt().floor() as isize)).collect()
}

/// Min or max over the disk around each pixel; positions outside the image
/// are ignored.
fn rank_filter(img: &GrayImage, r: usize, take_max: bool) -> GrayImage {
    let (w, h) = (img.width as isize, img.height as isize);
    let rows = disk_rows(r);
    let mut out = vec![0u8; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = if take_max { 0u8 } else { 255u8 };
            for &(dy, half) in &rows {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let x0 = (x - half).max(0) as usize;
                let x1 = (x + half).min(w - 1) as usize;
                let row = &img.data[yy as usize * w as usize..][x0..=x1];
                acc = if take_max {
                    row.iter().fold(acc, |a, &v| a.max(v))
                } else {
                    row.iter().fold(acc, |a, &v| a.min(v))
                };
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    GrayImage { width: img.width, height: img.height, data: out }
}

fn sub(a: &GrayImage, b: &GrayImage) -> GrayImage {
    GrayImage {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x.saturating_sub(*y)).collect(),
    }
}

/// Grayscale morphology with a disk of radius `se_radius`.
pub fn morph(img: &GrayImage, op: MorphOp, se_radius: usize) -> GrayImage {
    let erode = |g: &GrayImage| rank_filter(g, se_radius, false);
    let dilate = |g: &GrayImage| rank_filter(g, se_radius, true);
    match op {
        MorphOp::Erode => erode(img),
        MorphOp::Dilate => dilate(img),
        MorphOp::Open => dilate(&erode(img)),
        MorphOp::Close => erode(&dilate(img)),
        MorphOp::BlackHat => sub(&erode(&dilate(img)), img),
        MorphOp::TopHat => sub(img, &dilate(&erode(img))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dilated_point_is_a_disk() {
        let mut g = GrayImage::filled(21, 21, 0);
        g.data[10 * 21 + 10] = 200;
        for r in 1..=7 {
            let d = morph(&g, MorphOp::Dilate, r);
            for y in 0..21i64 {
                for x in 0..21i64 {
                    let inside = (x - 10).pow(2) + (y - 10).pow(2) <= (r * r) as i64;
                    assert_eq!(d.get(x as usize, y as usize), if inside { 200 } else { 0 }, "r={r} ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn blackhat_of_constant_is_zero() {
        let g = GrayImage::filled(12, 9, 131);
        assert!(morph(&g, MorphOp::BlackHat, 3).data.iter().all(|&v| v == 0));
        assert!(morph(&g, MorphOp::TopHat, 3).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn blackhat_finds_a_dark_line() {
        let mut g = GrayImage::filled(15, 15, 180);
        for y in 0..15 {
            g.data[y * 15 + 7] = 60;
        }
        let b = morph(&g, MorphOp::BlackHat, 2);
        assert_eq!(b.get(7, 7), 120);
        assert_eq!(b.get(3, 7), 0);
    }

    fn arb_gray() -> impl Strategy<Value = GrayImage> {
        (3usize..14, 3usize..14).prop_flat_map(|(w, h)| {
            prop::collection::vec(any::<u8>(), w * h).prop_map(move |d| GrayImage::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn open_is_idempotent(g in arb_gray(), r in 1usize..4) {
            let once = morph(&g, MorphOp::Open, r);
            prop_assert_eq!(morph(&once, MorphOp::Open, r), once);
        }

        #[test]
        fn erode_dilate_duality(g in arb_gray(), r in 1usize..4) {
            let lhs = morph(&g, MorphOp::Erode, r);
            let rhs = morph(&g.inverted(), MorphOp::Dilate, r).inverted();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn tophat_of_inverse_is_blackhat(g in arb_gray(), r in 1usize..4) {
            prop_assert_eq!(morph(&g.inverted(), MorphOp::TopHat, r), morph(&g, MorphOp::BlackHat, r));
        }
    }
}
