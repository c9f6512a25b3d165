use num_bigint::BigUint;

use super::SegError;
use crate::imaging::{BinaryMask, GrayImage};

/// 256-bin histogram of the pixels inside `domain` (all pixels when `None`).
pub fn histogram(gray: &GrayImage, domain: Option<&BinaryMask>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for (i, &v) in gray.data.iter().enumerate() {
        if domain.is_none_or(|m| m.is_set(i)) {
            hist[v as usize] += 1;
        }
    }
    hist
}

/// Smallest `t` maximizing the between-class variance of the split
/// `{v <= t}` / `{v > t}`.
///
/// Up to the constant `1 / N^2` the variance at `t` is
/// `(s0 n1 - s1 n0)^2 / (n0 n1)` with class counts `n` and sums `s`;
/// candidates are compared by exact cross-multiplication.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8, SegError> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(SegError::DegenerateHistogram);
    }
    let n: u64 = hist.iter().sum();
    let s: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(u8, BigUint, BigUint)> = None;
    for t in 0..=255u8 {
        n0 += hist[t as usize];
        s0 += t as u128 * hist[t as usize] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let (a, b) = (s0 * n1 as u128, s1 * n0 as u128);
        let diff = BigUint::from(a.abs_diff(b));
        let num = &diff * &diff;
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    Ok(best.expect("two distinct values give a valid split").0)
}

pub fn otsu_threshold(gray: &GrayImage, domain: Option<&BinaryMask>) -> Result<u8, SegError> {
    otsu_from_histogram(&histogram(gray, domain))
}
