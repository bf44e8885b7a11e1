//! Bicubic resampling (a = −0.5) for dataset synthesis and baselines.
//!
//! Pixel centres are aligned, borders are extended by symmetric reflection,
//! and when shrinking the kernel is stretched by the reduction factor so it
//! integrates over every source pixel it covers.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

const A: f64 = -0.5;

/// Keys' cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Sparse resampling matrix along one axis: for every output index the
/// contributing source indices and normalised weights.
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(src: usize, dst: usize) -> Self {
        let scale = dst as f64 / src as f64;
        let (kscale, support) = if scale < 1.0 { (scale, 2.0 / scale) } else { (1.0, 2.0) };
        let taps = (0..dst)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let lo = (u - support).floor() as isize;
                let hi = (u + support).ceil() as isize;
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for j in lo..=hi {
                    let wgt = kscale * cubic(kscale * (u - j as f64));
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = reflect(j, src);
                    match acc.iter_mut().find(|(k, _)| *k == idx) {
                        Some(e) => e.1 += wgt,
                        None => acc.push((idx, wgt)),
                    }
                }
                let total: f64 = acc.iter().map(|e| e.1).sum();
                acc.iter_mut().for_each(|e| e.1 /= total);
                acc
            })
            .collect();
        AxisWeights { taps }
    }
}

fn reflect(j: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = j.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Resample every plane to `out_h × out_w`.
pub fn bicubic_resize<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bicubic_resize", "empty output size"));
    }
    let wx = AxisWeights::new(s.w, out_w);
    let wy = AxisWeights::new(s.h, out_h);
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut tmp = vec![0.0f64; s.h * out_w];
    for plane in img.data().chunks_exact(s.hw()) {
        for y in 0..s.h {
            let row = &plane[y * s.w..(y + 1) * s.w];
            for (x, taps) in wx.taps.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(j, w)| row[j].to_f64().unwrap() * w).sum();
            }
        }
        for taps in &wy.taps {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(j, w)| tmp[j * out_w + x] * w).sum();
                out.push(T::lit(v));
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Downsample by an integer factor `r`; both spatial sizes must be divisible by `r`.
pub fn bicubic_downsample<T: Real>(img: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::dim("bicubic_downsample", format!("{s} not divisible by scale {r}")));
    }
    if r == 1 {
        return Ok(img.clone());
    }
    bicubic_resize(img, s.h / r, s.w / r)
}

/// Upsample by an integer factor `r` (the bicubic baseline).
pub fn bicubic_upsample<T: Real>(img: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if r == 0 {
        return Err(Error::dim("bicubic_upsample", "scale must be positive"));
    }
    bicubic_resize(img, s.h * r, s.w * r)
}
