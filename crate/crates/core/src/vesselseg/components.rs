use crate::imaging::BinaryMask;

/// Labels 8-connected foreground components; 0 is background and labels
/// count up from 1 in raster order of each component's first pixel.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.is_set(start) || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.is_set(j) && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Drops 8-connected components smaller than `min_size` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    BinaryMask::from_fn(mask.width, mask.height, |x, y| {
        let l = labels[y * mask.width + x];
        l != 0 && sizes[l as usize - 1] >= min_size
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_connect() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == y || (x == 4 && y == 0));
        let (_, sizes) = label_components(&m);
        // the diagonal starts at index 0, so it is labelled first
        assert_eq!(sizes, vec![5, 1]);
    }

    #[test]
    fn small_components_are_removed() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (y == 1 && x < 6) || (x == 8 && y == 8));
        let out = remove_small_components(&m, 3);
        assert_eq!(out.count(), 6);
        assert!(!out.get(8, 8));
    }
}
