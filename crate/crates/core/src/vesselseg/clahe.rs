use super::SegError;
use crate::imaging::GrayImage;

/// Tile boundaries `[start, end)` splitting `len` into `n` near-equal parts.
fn tile_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

/// Equalization LUT of one tile. The histogram is clipped at
/// `clip * count / 256` and the excess spread evenly over all bins.
/// A tile holding a single value maps every level to itself.
pub fn tile_lut(hist: &[u32; 256], clip: f64) -> [u8; 256] {
    let count: u32 = hist.iter().sum();
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    let mut lut = [0u8; 256];
    if distinct <= 1 {
        for (v, l) in lut.iter_mut().enumerate() {
            *l = v as u8;
        }
        return lut;
    }
    let n = count as f64;
    let limit = clip * n / 256.0;
    let mut clipped = [0.0f64; 256];
    let mut excess = 0.0;
    for (c, &h) in clipped.iter_mut().zip(hist) {
        let h = h as f64;
        if h > limit {
            excess += h - limit;
            *c = limit;
        } else {
            *c = h;
        }
    }
    let share = excess / 256.0;
    let mut cdf = 0.0;
    for (l, c) in lut.iter_mut().zip(&clipped) {
        cdf += c + share;
        *l = (255.0 * cdf / n).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization over a
/// `tiles.0 x tiles.1` grid (columns, rows) with bilinear blending of the
/// neighbouring tile mappings. `clip = f64::INFINITY` disables clipping.
pub fn clahe(gray: &GrayImage, tiles: (usize, usize), clip: f64) -> Result<GrayImage, SegError> {
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 || !(clip > 0.0) {
        return Err(SegError::InvalidParams(format!("tiles {tiles:?} and clip {clip} must be positive")));
    }
    let (w, h) = (gray.width, gray.height);
    if w < tx || h < ty {
        return Err(SegError::ImageSmallerThanTileGrid { width: w, height: h, tiles });
    }
    let xb = tile_bounds(w, tx);
    let yb = tile_bounds(h, ty);
    let mut luts = vec![[0u8; 256]; tx * ty];
    for (j, &(y0, y1)) in yb.iter().enumerate() {
        for (i, &(x0, x1)) in xb.iter().enumerate() {
            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for &v in &gray.data[y * w + x0..y * w + x1] {
                    hist[v as usize] += 1;
                }
            }
            luts[j * tx + i] = tile_lut(&hist, clip);
        }
    }
    // tile centres in pixel-centre coordinates
    let centre = |b: &[(usize, usize)]| -> Vec<f64> { b.iter().map(|&(a, e)| (a + e) as f64 / 2.0 - 0.5).collect() };
    let (cx, cy) = (centre(&xb), centre(&yb));
    let neighbours = |c: &[f64], p: f64| -> (usize, usize, f64) {
        let n = c.len();
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        if p >= c[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let k = c.iter().rposition(|&v| v <= p).expect("p above first centre");
        (k, k + 1, (p - c[k]) / (c[k + 1] - c[k]))
    };
    let xs: Vec<_> = (0..w).map(|x| neighbours(&cx, x as f64)).collect();
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let (j0, j1, fy) = neighbours(&cy, y as f64);
        for x in 0..w {
            let (i0, i1, fx) = xs[x];
            let v = gray.data[y * w + x] as usize;
            let m = |i: usize, j: usize| luts[j * tx + i][v] as f64;
            let top = m(i0, j0) * (1.0 - fx) + m(i1, j0) * fx;
            let bottom = m(i0, j1) * (1.0 - fx) + m(i1, j1) * fx;
            out[y * w + x] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(GrayImage { width: w, height: h, data: out })
}
