//! Shared raster operations: corner-aligned bilinear resize (and its
//! transpose for backprop), horizontal flips, and Gaussian smoothing.
//!
//! One bilinear convention is used everywhere — upsampling dense logits,
//! rescaling attention maps, and scale augmentation — so the linearity
//! identities between the dense and global heads hold at tight tolerances.

use ndarray::{Array2, Array3, NdFloat};

/// Source coordinate for a destination index under corner-aligned sampling.
/// With a single destination sample the source collapses to index 0.
#[inline]
fn src_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 || src_len <= 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

#[inline]
fn lerp_weights(coord: f64, len: usize) -> (usize, usize, f64) {
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, coord - lo as f64)
}

/// Corner-aligned bilinear resize of a single-channel map.
pub fn resize_bilinear_2d<F: NdFloat>(src: &Array2<F>, out_h: usize, out_w: usize) -> Array2<F> {
    let (src_h, src_w) = src.dim();
    assert!(src_h > 0 && src_w > 0, "resize source must be non-empty");
    let mut out = Array2::zeros((out_h, out_w));
    for i in 0..out_h {
        let (y0, y1, fy) = lerp_weights(src_coord(i, out_h, src_h), src_h);
        for j in 0..out_w {
            let (x0, x1, fx) = lerp_weights(src_coord(j, out_w, src_w), src_w);
            let v00 = src[(y0, x0)].to_f64().unwrap();
            let v01 = src[(y0, x1)].to_f64().unwrap();
            let v10 = src[(y1, x0)].to_f64().unwrap();
            let v11 = src[(y1, x1)].to_f64().unwrap();
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[(i, j)] = F::from(top + (bot - top) * fy).unwrap();
        }
    }
    out
}

/// Channel-wise bilinear resize of a (C, H, W) tensor.
pub fn resize_bilinear<F: NdFloat>(src: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, _, _) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = resize_bilinear_2d(&src.index_axis(ndarray::Axis(0), ch).to_owned(), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    out
}

/// Transpose of [`resize_bilinear`]: scatters output-space gradients back to
/// source resolution. `grad` is (C, out_h, out_w); the result is (C, src_h, src_w).
pub fn resize_bilinear_backward<F: NdFloat>(
    grad: &Array3<F>,
    src_h: usize,
    src_w: usize,
) -> Array3<F> {
    let (c, out_h, out_w) = grad.dim();
    let mut out = Array3::<F>::zeros((c, src_h, src_w));
    for i in 0..out_h {
        let (y0, y1, fy) = lerp_weights(src_coord(i, out_h, src_h), src_h);
        for j in 0..out_w {
            let (x0, x1, fx) = lerp_weights(src_coord(j, out_w, src_w), src_w);
            let w00 = F::from((1.0 - fy) * (1.0 - fx)).unwrap();
            let w01 = F::from((1.0 - fy) * fx).unwrap();
            let w10 = F::from(fy * (1.0 - fx)).unwrap();
            let w11 = F::from(fy * fx).unwrap();
            for ch in 0..c {
                let g = grad[(ch, i, j)];
                out[(ch, y0, x0)] = out[(ch, y0, x0)] + g * w00;
                out[(ch, y0, x1)] = out[(ch, y0, x1)] + g * w01;
                out[(ch, y1, x0)] = out[(ch, y1, x0)] + g * w10;
                out[(ch, y1, x1)] = out[(ch, y1, x1)] + g * w11;
            }
        }
    }
    out
}

/// Corner-aligned nearest-neighbor resize for integer label rasters,
/// where interpolation between category values would be meaningless.
pub fn resize_nearest_u8(src: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (src_h, src_w) = src.dim();
    assert!(src_h > 0 && src_w > 0, "resize source must be non-empty");
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let si = src_coord(i, out_h, src_h).round() as usize;
        let sj = src_coord(j, out_w, src_w).round() as usize;
        src[(si.min(src_h - 1), sj.min(src_w - 1))]
    })
}

/// Horizontal flip (columns reversed) of a (C, H, W) tensor.
pub fn flip_horizontal<F: NdFloat>(src: &Array3<F>) -> Array3<F> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = src[(ch, i, w - 1 - j)];
            }
        }
    }
    out
}

/// Horizontal flip of a single-channel map.
pub fn flip_horizontal_2d<F: NdFloat>(src: &Array2<F>) -> Array2<F> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| src[(i, w - 1 - j)])
}

/// Separable Gaussian blur with replicate padding. `sigma <= 0` is the identity.
/// Kernel radius is `ceil(3 sigma)`, renormalized after truncation.
pub fn gaussian_blur_2d<F: NdFloat>(src: &Array2<F>, sigma: f64) -> Array2<F> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for t in -radius..=radius {
        let v = (-(t as f64 * t as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }

    let (h, w) = src.dim();
    let clamp = |v: i64, len: usize| v.clamp(0, len as i64 - 1) as usize;

    // Horizontal pass, then vertical, accumulating in f64.
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let jj = clamp(j as i64 + k as i64 - radius, w);
                acc += kv * src[(i, jj)].to_f64().unwrap();
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Array2::<F>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let ii = clamp(i as i64 + k as i64 - radius, h);
                acc += kv * tmp[(ii, j)];
            }
            out[(i, j)] = F::from(acc).unwrap();
        }
    }
    out
}
