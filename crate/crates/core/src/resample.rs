//! Spatial resampling operators expressed as [`SparseMap`]s over row-major
//! `H·W` pixel grids.

use crate::autodiff::SparseMap;

/// 1-D bilinear taps with half-pixel centres and edge clamping.
fn linear_taps(src_len: usize, dst_len: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Bilinear resize from `src_h × src_w` to `dst_h × dst_w`.
pub fn bilinear(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> SparseMap {
    assert!(src_h > 0 && src_w > 0 && dst_h > 0 && dst_w > 0);
    let ty = linear_taps(src_h, dst_h);
    let tx = linear_taps(src_w, dst_w);
    let mut rows = Vec::with_capacity(dst_h * dst_w);
    for ry in &ty {
        for rx in &tx {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(y, wy) in ry {
                for &(x, wx) in rx {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let src = y * src_w + x;
                    match taps.iter_mut().find(|(s, _)| *s == src) {
                        Some(t) => t.1 += w,
                        None => taps.push((src, w)),
                    }
                }
            }
            rows.push(taps);
        }
    }
    SparseMap {
        rows_in: src_h * src_w,
        rows,
    }
}

/// Non-overlapping `block × block` mean pooling.
pub fn average_pool(height: usize, width: usize, block: usize) -> SparseMap {
    assert!(
        height.is_multiple_of(block) && width.is_multiple_of(block),
        "pool block must divide the image"
    );
    let (ph, pw) = (height / block, width / block);
    let w = 1.0 / (block * block) as f64;
    let rows = (0..ph * pw)
        .map(|o| {
            let (by, bx) = (o / pw, o % pw);
            let mut taps = Vec::with_capacity(block * block);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    taps.push((y * width + x, w));
                }
            }
            taps
        })
        .collect();
    SparseMap {
        rows_in: height * width,
        rows,
    }
}

/// Resizes an `H·W × C` buffer with bilinear interpolation.
pub fn resize_buffer(data: &[f64], src_h: usize, src_w: usize, channels: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    if src_h == dst_h && src_w == dst_w {
        return data.to_vec();
    }
    bilinear(src_h, src_w, dst_h, dst_w).apply(data, channels)
}
