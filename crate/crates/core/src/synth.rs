//! Procedural high-resolution training images: smooth backgrounds overlaid
//! with antialiased discs, rings, rotated rectangles and striped patches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

type Rgb = [f32; 3];

enum Kind {
    Disc { r: f32 },
    Ring { r: f32, thickness: f32 },
    Rect { half_w: f32, half_h: f32, angle: f32 },
    Stripes { r: f32, period: f32, angle: f32, other: Rgb },
}

struct Shape2d {
    cx: f32,
    cy: f32,
    color: Rgb,
    kind: Kind,
}

impl Shape2d {
    /// Colour at `(x, y)` if the point is covered.
    fn sample(&self, x: f32, y: f32) -> Option<Rgb> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let d = (dx * dx + dy * dy).sqrt();
        match self.kind {
            Kind::Disc { r } => (d <= r).then_some(self.color),
            Kind::Ring { r, thickness } => ((d - r).abs() <= thickness / 2.0).then_some(self.color),
            Kind::Rect { half_w, half_h, angle } => {
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u.abs() <= half_w && v.abs() <= half_h).then_some(self.color)
            }
            Kind::Stripes { r, period, angle, other } => {
                if d > r {
                    return None;
                }
                let (s, c) = angle.sin_cos();
                let t = ((dx * c + dy * s) / period).rem_euclid(1.0);
                Some(if t < 0.5 { self.color } else { other })
            }
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// One `(1, 3, h, w)` image in `[0, 1]`.
pub fn synthetic_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let (c0, c1) = (color(rng), color(rng));
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let wave_freq: f32 = rng.gen_range(0.5..3.0);
    let wave_amp: f32 = rng.gen_range(0.0..0.08);
    let size = h.min(w) as f32;
    let n_shapes = rng.gen_range(6..14);
    let shapes: Vec<Shape2d> = (0..n_shapes)
        .map(|_| {
            let cx = rng.gen_range(0.0..w as f32);
            let cy = rng.gen_range(0.0..h as f32);
            let r = rng.gen_range(0.06..0.25) * size;
            let kind = match rng.gen_range(0..4) {
                0 => Kind::Disc { r },
                1 => Kind::Ring { r, thickness: rng.gen_range(1.0..4.0) },
                2 => Kind::Rect {
                    half_w: r,
                    half_h: r * rng.gen_range(0.2..1.0),
                    angle: rng.gen_range(0.0..std::f32::consts::PI),
                },
                _ => Kind::Stripes {
                    r,
                    period: rng.gen_range(3.0..9.0),
                    angle: rng.gen_range(0.0..std::f32::consts::PI),
                    other: color(rng),
                },
            };
            Shape2d { cx, cy, color: color(rng), kind }
        })
        .collect();

    // 3×3 supersampling per pixel
    const SUB: [f32; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
    let mut data = vec![0.0f32; 3 * h * w];
    let (st, ct) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in SUB {
                for sx in SUB {
                    let (px, py) = (x as f32 + 0.5 + sx, y as f32 + 0.5 + sy);
                    let t = ((px * ct + py * st) / size).clamp(-1.0, 1.0) * 0.5 + 0.5;
                    let wave = wave_amp * (wave_freq * std::f32::consts::TAU * py / size).sin();
                    let mut col: Rgb = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t + wave);
                    for s in &shapes {
                        if let Some(v) = s.sample(px, py) {
                            col = v;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = (acc[c] / 9.0).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data).expect("consistent size")
}

/// `count` images drawn from one seeded stream.
pub fn synthetic_dataset(seed: u64, count: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(&mut rng, h, w)).collect()
}
