//! Reference implementations written for clarity rather than speed.

use std::collections::BTreeSet;

use super::rng;
use fdiwn_core::network::{variant, Fdiwn, FdiwnConfig, VARIANTS};
use fdiwn_core::synth::synthetic_dataset;
use fdiwn_core::Tensor;
use rand::Rng;

/// `(out_c, in_c, k, groups)` of every convolution in every shipped
/// architecture, read off the weight tensors.
pub fn fdiwn_conv_layouts() -> BTreeSet<(usize, usize, usize, usize)> {
    let mut set = BTreeSet::new();
    for scale in [2, 3, 4] {
        for &(name, _) in VARIANTS {
            let cfg = FdiwnConfig { ablation: variant(name).unwrap(), ..FdiwnConfig::fdiwn(scale) };
            let (_, params) = Fdiwn::new(cfg, 0).unwrap();
            for (name, p) in params.iter() {
                if !name.ends_with(".weight") || p.dims.len() != 4 {
                    continue;
                }
                let groups = if name.contains(".fuse") { cfg.cgs_groups } else { 1 };
                set.insert((p.dims[0], p.dims[1] * groups, p.dims[2], groups));
            }
        }
    }
    set
}

pub fn naive_luma(img: &Tensor<f32>, n: usize, y: usize, x: usize) -> f64 {
    let (r, g, b) = (img.at(n, 0, y, x) as f64, img.at(n, 1, y, x) as f64, img.at(n, 2, y, x) as f64);
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

pub fn naive_psnr(a: &Tensor<f32>, b: &Tensor<f32>, border: usize) -> f64 {
    let s = a.shape();
    let (mut sq, mut count) = (0.0f64, 0usize);
    for y in border..s.h - border {
        for x in border..s.w - border {
            let d = naive_luma(a, 0, y, x) - naive_luma(b, 0, y, x);
            sq += d * d;
            count += 1;
        }
    }
    -10.0 * (sq / count as f64).log10()
}

/// Mean SSIM with every window evaluated from scratch: two-pass moments
/// under a normalised 2-D Gaussian.
pub fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut windows = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let at = |p: &[f64], i: usize, j: usize| p[(y0 + i) * w + x0 + j];
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    mx += g[i][j] / total * at(a, i, j);
                    my += g[i][j] / total * at(b, i, j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (dx, dy) = (at(a, i, j) - mx, at(b, i, j) - my);
                    let wt = g[i][j] / total;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cov += wt * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    sum / windows as f64
}

pub fn noisy_pair(seed: u64, h: usize, w: usize, noise: f64) -> (Tensor<f32>, Tensor<f32>) {
    let a = synthetic_dataset(seed, 1, h, w).remove(0);
    let mut r = rng(seed + 1);
    let mut b = a.clone();
    for v in b.data_mut() {
        *v = (*v as f64 + r.gen_range(-noise..noise)).clamp(0.0, 1.0) as f32;
    }
    (a, b)
}
