//! Luma PSNR / SSIM and evaluation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// BT.601 luma of an RGB image in `[0, 1]`, scaled to studio range
/// `[16/255, 235/255]`.
pub fn rgb_to_y<T: Real>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::dim("rgb_to_y", format!("expected 3 channels, got {}", s.c)));
    }
    Ok(Tensor::from_fn(s.with_c(1), |n, _, y, x| {
        let px = |c| img.at(n, c, y, x).to_f64().unwrap();
        (65.481 * px(0) + 128.553 * px(1) + 24.966 * px(2) + 16.0) / 255.0
    }))
}

fn crop(t: &Tensor<f64>, border: usize, op: &'static str) -> Result<Tensor<f64>> {
    let s = t.shape();
    if 2 * border >= s.h || 2 * border >= s.w {
        return Err(Error::dim(op, format!("border {border} leaves nothing of {s}")));
    }
    t.crop(border, border, s.h - 2 * border, s.w - 2 * border)
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for data in `[0, 1]`, after cropping
/// `border` pixels from every side. Identical inputs give `+∞`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let a = crop(&a.cast(), border, "psnr")?;
    let b = crop(&b.cast(), border, "psnr")?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sq / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of two single-channel images (11×11 Gaussian
/// window, σ = 1.5, dynamic range 1), after cropping `border` pixels.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim("ssim", format!("expected one single-channel image, got {s}")));
    }
    let a = crop(&a.cast(), border, "ssim")?;
    let b = crop(&b.cast(), border, "ssim")?;
    let Shape { h, w, .. } = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &k);
    let mu_y = filter_valid(y, h, w, &k);
    let xx = filter_valid(&prod(&|p, _| p * p), h, w, &k);
    let yy = filter_valid(&prod(&|_, q| q * q), h, w, &k);
    let xy = filter_valid(&prod(&|p, q| p * q), h, w, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Metrics of one super-resolved image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Y-channel PSNR/SSIM of `sr` against `hr`, both RGB in `[0, 1]`.
pub fn score_rgb<T: Real>(name: &str, sr: &Tensor<T>, hr: &Tensor<T>, border: usize) -> Result<ImageScore> {
    let (ys, yh) = (rgb_to_y(sr)?, rgb_to_y(hr)?);
    Ok(ImageScore { name: name.to_string(), psnr: psnr(&ys, &yh, border)?, ssim: ssim(&ys, &yh, border)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scale: usize,
    pub border: usize,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    pub fn new(scale: usize, border: usize) -> Self {
        EvalReport { scale, border, images: Vec::new() }
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|i| i.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|i| i.ssim))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in &self.images {
            writeln!(s, "{:<32} PSNR {:>8.4} dB  SSIM {:.6}", i.name, i.psnr, i.ssim).unwrap();
        }
        writeln!(
            s,
            "mean over {} images (x{}, border {}): PSNR {:.4} dB  SSIM {:.6}",
            self.images.len(),
            self.scale,
            self.border,
            self.mean_psnr(),
            self.mean_ssim()
        )
        .unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,psnr,ssim\n");
        for i in &self.images {
            writeln!(s, "{},{},{}", csv_field(&i.name), i.psnr, i.ssim).unwrap();
        }
        s
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
