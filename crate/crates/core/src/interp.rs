//! Spatial resampling and smoothing of `H×W×C` grids.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

/// Source sample positions and weights for one output coordinate of a
/// half-pixel-centred (align-corners disabled) bilinear resize.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = (src - lo as f64) as f32;
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of an `H×W×C` grid with align-corners disabled.
///
/// Resizing to the same size is the identity.
pub fn resize_bilinear(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, c) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.to_owned();
    }
    let rows = taps(out_h, in_h);
    let cols = taps(out_w, in_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let mut dst = out.slice_mut(ndarray::s![oy, ox, ..]);
            let p00 = src.slice(ndarray::s![y0, x0, ..]);
            let p01 = src.slice(ndarray::s![y0, x1, ..]);
            let p10 = src.slice(ndarray::s![y1, x0, ..]);
            let p11 = src.slice(ndarray::s![y1, x1, ..]);
            for k in 0..c {
                dst[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
            }
        }
    }
    out
}

pub fn resize_bilinear_2d(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let src3 = src.insert_axis(Axis(2));
    resize_bilinear(src3, out_h, out_w).remove_axis(Axis(2))
}

/// Normalized 1-D Gaussian kernel truncated at `truncate·σ`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f32> {
    let radius = (truncate * sigma + 0.5) as usize;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Mirror an out-of-range index with the edge sample repeated
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian smoothing with reflect boundary handling.
pub fn gaussian_filter(src: ArrayView2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let kernel = gaussian_kernel(sigma, 4.0);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = src.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - radius, w);
                acc += kv * src[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}
