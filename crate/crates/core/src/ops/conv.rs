//! 2-D cross-correlation with stride, zero padding and channel groups.
//!
//! Forward lowers each row band of the output to a GEMM over an im2col
//! buffer (1×1 stride-1 kernels skip the lowering). The backward pass uses
//! the explicit transposed-correlation formulas for input, weight and bias.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Shape, Tensor};

/// Output pixels lowered per im2col band.
const BAND_PIXELS: usize = 2048;

/// Convolution operands and hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    /// `(out_c, in_c / groups, k, k)`
    pub weight: Var,
    /// `(1, out_c, 1, 1)`
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(weight: Var, bias: Option<Var>) -> Self {
        ConvParams { weight, bias, stride: 1, padding: 0, groups: 1 }
    }

    /// `padding = k / 2`, the "same" padding for odd kernels at stride 1.
    pub fn same(weight: Var, bias: Option<Var>, k: usize) -> Self {
        ConvParams { padding: k / 2, ..Self::new(weight, bias) }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        ConvParams { groups, ..self }
    }
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: Shape, weight: Shape, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let op = "conv2d";
        if groups == 0 || stride == 0 {
            return Err(Error::dim(op, "groups and stride must be positive"));
        }
        if weight.h != weight.w {
            return Err(Error::dim(op, format!("non-square kernel {weight}")));
        }
        let k = weight.h;
        let out_c = weight.n;
        if !x.c.is_multiple_of(groups) || !out_c.is_multiple_of(groups) {
            return Err(Error::dim(
                op,
                format!("groups={groups} must divide in_c={} and out_c={out_c}", x.c),
            ));
        }
        if weight.c * groups != x.c {
            return Err(Error::dim(
                op,
                format!("input {x} has {} channels, weight {weight} expects {}", x.c, weight.c * groups),
            ));
        }
        if x.h + 2 * padding < k || x.w + 2 * padding < k {
            return Err(Error::dim(op, format!("kernel {k} larger than padded input {x}")));
        }
        Ok(ConvGeometry {
            n: x.n,
            in_c: x.c,
            h: x.h,
            w: x.w,
            out_c,
            k,
            stride,
            padding,
            groups,
            out_h: (x.h + 2 * padding - k) / stride + 1,
            out_w: (x.w + 2 * padding - k) / stride + 1,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Rows of the lowered patch matrix for one group.
    pub fn patch_len(&self) -> usize {
        self.in_per_group() * self.k * self.k
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.out_c, self.out_h, self.out_w)
    }

    /// Multiply-accumulates of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.out_c * self.out_h * self.out_w * self.patch_len()) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn band_rows(&self) -> usize {
        (BAND_PIXELS / self.out_w).max(1)
    }

    /// Fill `cols` (patch_len × rows·out_w) from one group's input planes.
    fn im2col<T: Real>(&self, x: &[T], oy0: usize, rows: usize, cols: &mut [T]) {
        let (k, s, p, ow) = (self.k, self.stride, self.padding, self.out_w);
        let npx = rows * ow;
        for ci in 0..self.in_per_group() {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut cols[r * npx..(r + 1) * npx];
                    for (ry, oy) in (oy0..oy0 + rows).enumerate() {
                        let drow = &mut dst[ry * ow..(ry + 1) * ow];
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *d = if ix >= 0 && ix < self.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a lowered gradient band back onto one group's input planes.
    fn col2im<T: Real>(&self, cols: &[T], oy0: usize, rows: usize, dx: &mut [T]) {
        let (k, s, p, ow) = (self.k, self.stride, self.padding, self.out_w);
        let npx = rows * ow;
        for ci in 0..self.in_per_group() {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let src = &cols[r * npx..(r + 1) * npx];
                    for (ry, oy) in (oy0..oy0 + rows).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src[ry * ow..(ry + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without recording.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.numel() != geo.out_c {
            return Err(Error::dim("conv2d", format!("bias {} for {} outputs", b.shape(), geo.out_c)));
        }
    }
    Ok(forward_impl(&geo, x.data(), weight.data(), bias.map(|b| b.data())))
}

fn forward_impl<T: Real>(geo: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Tensor<T> {
    let in_len = geo.in_c * geo.h * geo.w;
    let ohw = geo.out_h * geo.out_w;
    let out_len = geo.out_c * ohw;
    let (cin_g, cout_g, kk) = (geo.in_per_group(), geo.out_per_group(), geo.patch_len());
    let mut out = vec![T::zero(); geo.n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, ys)| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let mut cols = Vec::new();
        for g in 0..geo.groups {
            let xg = &xs[g * cin_g * geo.h * geo.w..(g + 1) * cin_g * geo.h * geo.w];
            let wv = MatView::row_major(g * cout_g * kk, kk);
            if geo.is_pointwise() {
                gemm(
                    cout_g,
                    cin_g,
                    ohw,
                    w,
                    wv,
                    xg,
                    MatView::row_major(0, ohw),
                    T::zero(),
                    ys,
                    MatView::row_major(g * cout_g * ohw, ohw),
                );
                continue;
            }
            let band = geo.band_rows();
            let mut oy0 = 0;
            while oy0 < geo.out_h {
                let rows = band.min(geo.out_h - oy0);
                let npx = rows * geo.out_w;
                cols.resize(kk * npx, T::zero());
                geo.im2col(xg, oy0, rows, &mut cols);
                gemm(
                    cout_g,
                    kk,
                    npx,
                    w,
                    wv,
                    &cols,
                    MatView::row_major(0, npx),
                    T::zero(),
                    ys,
                    MatView { offset: g * cout_g * ohw + oy0 * geo.out_w, rs: ohw, cs: 1 },
                );
                oy0 += rows;
            }
        }
        if let Some(b) = bias {
            for (plane, &bv) in ys.chunks_exact_mut(ohw).zip(b) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_parts(geo.out_shape(), out)
}

fn grad_input<T: Real>(geo: &ConvGeometry, w: &[T], dy: &[T]) -> Vec<T> {
    let in_len = geo.in_c * geo.h * geo.w;
    let ohw = geo.out_h * geo.out_w;
    let out_len = geo.out_c * ohw;
    let (cin_g, cout_g, kk) = (geo.in_per_group(), geo.out_per_group(), geo.patch_len());
    let hw = geo.h * geo.w;
    let mut dx = vec![T::zero(); geo.n * in_len];
    dx.par_chunks_mut(in_len).enumerate().for_each(|(s, dxs)| {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        let mut cols = Vec::new();
        for g in 0..geo.groups {
            let dxg = &mut dxs[g * cin_g * hw..(g + 1) * cin_g * hw];
            // Wᵀ: logical (kk × cout_g) over row-major (cout_g × kk)
            let wt = MatView::transposed(g * cout_g * kk, kk);
            if geo.is_pointwise() {
                gemm(cin_g, cout_g, ohw, w, wt, dys, MatView::row_major(g * cout_g * ohw, ohw), T::zero(), dxg, MatView::row_major(0, ohw));
                continue;
            }
            let band = geo.band_rows();
            let mut oy0 = 0;
            while oy0 < geo.out_h {
                let rows = band.min(geo.out_h - oy0);
                let npx = rows * geo.out_w;
                cols.resize(kk * npx, T::zero());
                gemm(
                    kk,
                    cout_g,
                    npx,
                    w,
                    wt,
                    dys,
                    MatView { offset: g * cout_g * ohw + oy0 * geo.out_w, rs: ohw, cs: 1 },
                    T::zero(),
                    &mut cols,
                    MatView::row_major(0, npx),
                );
                geo.col2im(&cols, oy0, rows, dxg);
                oy0 += rows;
            }
        }
    });
    dx
}

fn grad_weight<T: Real>(geo: &ConvGeometry, x: &[T], dy: &[T]) -> Vec<T> {
    let in_len = geo.in_c * geo.h * geo.w;
    let ohw = geo.out_h * geo.out_w;
    let out_len = geo.out_c * ohw;
    let (cin_g, cout_g, kk) = (geo.in_per_group(), geo.out_per_group(), geo.patch_len());
    let hw = geo.h * geo.w;
    let partials: Vec<Vec<T>> = (0..geo.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dys = &dy[s * out_len..(s + 1) * out_len];
            let mut dw = vec![T::zero(); geo.out_c * kk];
            let mut cols = Vec::new();
            for g in 0..geo.groups {
                let xg = &xs[g * cin_g * hw..(g + 1) * cin_g * hw];
                let dwv = MatView::row_major(g * cout_g * kk, kk);
                if geo.is_pointwise() {
                    // dW = dY · Xᵀ
                    gemm(cout_g, ohw, cin_g, dys, MatView::row_major(g * cout_g * ohw, ohw), xg, MatView::transposed(0, hw), T::one(), &mut dw, dwv);
                    continue;
                }
                let band = geo.band_rows();
                let mut oy0 = 0;
                while oy0 < geo.out_h {
                    let rows = band.min(geo.out_h - oy0);
                    let npx = rows * geo.out_w;
                    cols.resize(kk * npx, T::zero());
                    geo.im2col(xg, oy0, rows, &mut cols);
                    gemm(
                        cout_g,
                        npx,
                        kk,
                        dys,
                        MatView { offset: g * cout_g * ohw + oy0 * geo.out_w, rs: ohw, cs: 1 },
                        &cols,
                        MatView::transposed(0, npx),
                        T::one(),
                        &mut dw,
                        dwv,
                    );
                    oy0 += rows;
                }
            }
            dw
        })
        .collect();
    // sample order is fixed, so the reduction is independent of the worker count
    let mut total = vec![T::zero(); geo.out_c * kk];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn grad_bias<T: Real>(geo: &ConvGeometry, dy: &[T]) -> Vec<T> {
    let ohw = geo.out_h * geo.out_w;
    let mut db = vec![T::zero(); geo.out_c];
    for (i, plane) in dy.chunks_exact(ohw).enumerate() {
        db[i % geo.out_c] += plane.iter().copied().sum();
    }
    db
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, p: ConvParams) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(p.weight));
        let geo = ConvGeometry::new(sx, sw, p.stride, p.padding, p.groups)?;
        let mut inputs = vec![x, p.weight];
        if let Some(b) = p.bias {
            let sb = self.shape(b);
            if sb != Shape::new(1, geo.out_c, 1, 1) {
                return Err(Error::dim("conv2d", format!("bias {sb} for {} outputs", geo.out_c)));
            }
            inputs.push(b);
        }
        let value = forward_impl(
            &geo,
            self.value(x).data(),
            self.value(p.weight).data(),
            p.bias.map(|b| self.value(b).data()),
        );
        self.add_macs(geo.macs());
        self.record("conv2d", value, &inputs, move |ctx| {
            let dy = ctx.grad.data();
            let dx = ctx.needs[0].then(|| Tensor::from_parts(sx, grad_input(&geo, ctx.inputs[1].data(), dy)));
            let dw = ctx.needs[1].then(|| Tensor::from_parts(sw, grad_weight(&geo, ctx.inputs[0].data(), dy)));
            let mut out = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| Tensor::from_parts(Shape::new(1, geo.out_c, 1, 1), grad_bias(&geo, dy))));
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 4, 5), |_, c, y, x| (c * 20 + y * 5 + x) as f32);
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_one_hot_gives_box_sum() {
        // one-hot at the centre of a 3x3 map, all-ones 3x3 kernel, padding 1
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 });
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0; 9]);
        // one-hot in a corner only reaches its 2x2 neighbourhood
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| if (y, x) == (0, 0) { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn output_size_formula() {
        let geo = ConvGeometry::new(Shape::new(2, 4, 9, 7), Shape::new(6, 2, 3, 3), 2, 1, 2).unwrap();
        assert_eq!((geo.out_h, geo.out_w), ((9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1));
    }

    #[test]
    fn group_mismatch_is_dimension_error() {
        assert!(ConvGeometry::new(Shape::new(1, 6, 4, 4), Shape::new(4, 3, 1, 1), 1, 0, 4).is_err());
        assert!(ConvGeometry::new(Shape::new(1, 5, 4, 4), Shape::new(4, 5, 1, 1), 1, 0, 2).is_err());
        assert!(ConvGeometry::new(Shape::new(1, 4, 4, 4), Shape::new(4, 3, 1, 1), 1, 0, 1).is_err());
    }

    #[test]
    fn band_splitting_matches_single_band() {
        // wide enough that the lowering needs several bands
        let mut seed = 7u32;
        let mut next = move || {
            seed = seed.wrapping_mul(1664525).wrapping_add(1013904223);
            (seed >> 8) as f64 / (1u64 << 24) as f64 - 0.5
        };
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 70, 64), |_, _, _, _| next());
        let w = Tensor::from_fn(Shape::new(3, 2, 3, 3), |_, _, _, _| next());
        let fast = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap();
        let mut worst = 0.0f64;
        for o in 0..3 {
            for y in 0..70 {
                for xx in 0..64 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if (0..70).contains(&iy) && (0..64).contains(&ix) {
                                    acc += x.at(0, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    worst = worst.max((acc - fast.at(0, o, y, xx)).abs());
                }
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }
}
