//! Per-sample kernels: 3x3 same-padding convolution, fused ReLU + 2x2 max
//! pooling, and global average pooling. Planes are channel-major.

use crate::scalar::{axpy, dot};
use crate::Scalar;

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi)
}

/// `out[co] = bias[co] + sum_ci w[co, ci] * in[ci]` with zero padding 1.
pub(crate) fn conv3x3_forward<T: Scalar>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    out: &mut [T],
) {
    let n = h * w;
    debug_assert_eq!(input.len(), in_ch * n);
    debug_assert_eq!(out.len(), out_ch * n);
    for co in 0..out_ch {
        let plane = &mut out[co * n..(co + 1) * n];
        plane.fill(bias[co]);
        for ci in 0..in_ch {
            let src = &input[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = weight[((co * in_ch + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(dx, w);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        axpy(wv, s, &mut plane[y * w + x0..y * w + x1]);
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when requested, the input
/// gradient of [`conv3x3_forward`].
pub(crate) fn conv3x3_backward<T: Scalar>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[T],
    out_ch: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let n = h * w;
    for co in 0..out_ch {
        let g = &dout[co * n..(co + 1) * n];
        dbias[co] += g.iter().copied().sum::<T>();
        for ci in 0..in_ch {
            let src = &input[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let widx = ((co * in_ch + ci) * 3 + ky) * 3 + kx;
                    let (x0, x1) = valid_range(dx, w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        acc += dot(gr, &src[s0..s0 + (x1 - x0)]);
                        if let Some(din) = dinput.as_deref_mut() {
                            let d = &mut din[ci * n + s0..ci * n + s0 + (x1 - x0)];
                            axpy(weight[widx], gr, d);
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// Applies ReLU in place and 2x2 max-pools; returns pooled values and the
/// in-window argmax (first maximum in row-major order).
pub(crate) fn relu_maxpool_forward<T: Scalar>(act: &mut [T], ch: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    for v in act.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut pooled = Vec::with_capacity(ch * ph * pw);
    let mut argmax = Vec::with_capacity(ch * ph * pw);
    for c in 0..ch {
        let plane = &act[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let base = 2 * py * w + 2 * px;
                let cand = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if cand[k as usize] > cand[best as usize] {
                        best = k;
                    }
                }
                pooled.push(cand[best as usize]);
                argmax.push(best);
            }
        }
    }
    (pooled, argmax)
}

/// ReLU and max-pool with gates and winners supplied instead of computed.
pub(crate) fn gated_pool_forward<T: Scalar>(act: &[T], gate: &[bool], argmax: &[u8], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h / 2, w / 2);
    let mut pooled = vec![T::zero(); ch * ph * pw];
    for c in 0..ch {
        for py in 0..ph {
            for px in 0..pw {
                let i = (c * ph + py) * pw + px;
                let k = argmax[i] as usize;
                let idx = c * h * w + (2 * py + k / 2) * w + 2 * px + k % 2;
                if gate[idx] {
                    pooled[i] = act[idx];
                }
            }
        }
    }
    pooled
}

/// Routes pooled gradients back through the pool and the ReLU.
pub(crate) fn relu_maxpool_backward<T: Scalar>(
    dpooled: &[T],
    argmax: &[u8],
    activated: &[T],
    ch: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (ph, pw) = (h / 2, w / 2);
    let mut dact = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        for py in 0..ph {
            for px in 0..pw {
                let i = (c * ph + py) * pw + px;
                let k = argmax[i] as usize;
                let idx = c * h * w + (2 * py + k / 2) * w + 2 * px + k % 2;
                if activated[idx] > T::zero() {
                    dact[idx] += dpooled[i];
                }
            }
        }
    }
    dact
}

/// Channel means of a `ch x n` stack of planes.
pub(crate) fn global_avg_pool<T: Scalar>(maps: &[T], ch: usize, n: usize) -> Vec<T> {
    let inv = T::one() / T::from_count(n);
    (0..ch).map(|c| maps[c * n..(c + 1) * n].iter().copied().sum::<T>() * inv).collect()
}

/// Gradient of [`global_avg_pool`]: each position receives `g_c / n`.
pub fn global_avg_pool_backward<T: Scalar>(grad: &[T], n: usize) -> Vec<T> {
    let inv = T::one() / T::from_count(n);
    grad.iter().flat_map(|&g| std::iter::repeat_n(g * inv, n)).collect()
}
