//! Channel slicing, concatenation and the two shuffle permutations.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Source channel feeding output channel `j` of a channel shuffle.
///
/// Input channel `i` lands at `(i mod (c/g))·g + ⌊i/(c/g)⌋`, so for c=6, g=2
/// the output order is `[0, 3, 1, 4, 2, 5]`.
pub fn shuffle_source(j: usize, c: usize, groups: usize) -> usize {
    let per = c / groups;
    (j % groups) * per + j / groups
}

fn copy_channels<T: Real>(src: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = src.shape();
    let hw = s.hw();
    let mut data = Vec::with_capacity(s.n * len * hw);
    for n in 0..s.n {
        let base = (n * s.c + start) * hw;
        data.extend_from_slice(&src.data()[base..base + len * hw]);
    }
    Tensor::from_parts(s.with_c(len), data)
}

fn permute_channels<T: Real>(src: &Tensor<T>, source_of: impl Fn(usize) -> usize) -> Tensor<T> {
    let s = src.shape();
    let hw = s.hw();
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for j in 0..s.c {
            let base = (n * s.c + source_of(j)) * hw;
            data.extend_from_slice(&src.data()[base..base + hw]);
        }
    }
    Tensor::from_parts(s, data)
}

impl<T: Real> Tape<T> {
    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if len == 0 || start + len > sx.c {
            return Err(Error::dim("slice_channels", format!("[{start}, {}) outside {sx}", start + len)));
        }
        let value = copy_channels(self.value(x), start, len);
        self.record("slice_channels", value, &[x], move |ctx| {
            let hw = sx.hw();
            let mut g = vec![T::zero(); sx.numel()];
            for n in 0..sx.n {
                let dst = (n * sx.c + start) * hw;
                let src = n * len * hw;
                g[dst..dst + len * hw].copy_from_slice(&ctx.grad.data()[src..src + len * hw]);
            }
            vec![Some(Tensor::from_parts(sx, g))]
        })
    }

    /// Contiguous halves: `(first c/2 channels, last c/2 channels)`.
    pub fn channel_split(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        if !c.is_multiple_of(2) {
            return Err(Error::dim("channel_split", format!("odd channel count {c}")));
        }
        Ok((self.slice_channels(x, 0, c / 2)?, self.slice_channels(x, c / 2, c / 2)?))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: s0, rhs: s });
            }
            widths.push(s.c);
        }
        let total: usize = widths.iter().sum();
        let hw = s0.hw();
        let mut data = Vec::with_capacity(s0.n * total * hw);
        for n in 0..s0.n {
            for (&v, &c) in xs.iter().zip(&widths) {
                let base = n * c * hw;
                data.extend_from_slice(&self.value(v).data()[base..base + c * hw]);
            }
        }
        let out_shape = s0.with_c(total);
        self.record("concat_channels", Tensor::from_parts(out_shape, data), xs, move |ctx| {
            let mut start = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let g = ctx.needs[i].then(|| copy_channels(ctx.grad, start, c));
                    start += c;
                    g
                })
                .collect()
        })
    }

    /// View channels as `(g, c/g)`, transpose to `(c/g, g)` and flatten.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let sx = self.shape(x);
        if groups == 0 || !sx.c.is_multiple_of(groups) {
            return Err(Error::dim("channel_shuffle", format!("{} channels not divisible by {groups} groups", sx.c)));
        }
        let c = sx.c;
        let value = permute_channels(self.value(x), |j| shuffle_source(j, c, groups));
        self.record("channel_shuffle", value, &[x], move |ctx| {
            // inverse: input channel i receives output channel dest(i)
            let per = c / groups;
            vec![Some(permute_channels(ctx.grad, |i| (i % per) * groups + i / per))]
        })
    }

    /// Sub-pixel rearrangement `(n, c·r², h, w) → (n, c, h·r, w·r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let sx = self.shape(x);
        if r == 0 || !sx.c.is_multiple_of(r * r) {
            return Err(Error::dim("pixel_shuffle", format!("{} channels not divisible by r²={}", sx.c, r * r)));
        }
        let out_shape = Shape::new(sx.n, sx.c / (r * r), sx.h * r, sx.w * r);
        let value = pixel_shuffle_tensor(self.value(x), r, out_shape);
        self.record("pixel_shuffle", value, &[x], move |ctx| {
            vec![Some(pixel_unshuffle_tensor(ctx.grad, r, sx))]
        })
    }
}

fn pixel_shuffle_tensor<T: Real>(x: &Tensor<T>, r: usize, out: Shape) -> Tensor<T> {
    let s = x.shape();
    let mut data = vec![T::zero(); out.numel()];
    for n in 0..s.n {
        for k in 0..out.c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = k * r * r + i * r + j;
                    for y in 0..s.h {
                        let src = &x.data()[x.index(n, src_c, y, 0)..][..s.w];
                        let dst_row = ((n * out.c + k) * out.h + y * r + i) * out.w;
                        for (xx, &v) in src.iter().enumerate() {
                            data[dst_row + xx * r + j] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(out, data)
}

fn pixel_unshuffle_tensor<T: Real>(g: &Tensor<T>, r: usize, out: Shape) -> Tensor<T> {
    let s = g.shape();
    let mut data = vec![T::zero(); out.numel()];
    for n in 0..out.n {
        for k in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = k * r * r + i * r + j;
                    for y in 0..out.h {
                        let src_row = ((n * s.c + k) * s.h + y * r + i) * s.w;
                        let dst = ((n * out.c + dst_c) * out.h + y) * out.w;
                        for xx in 0..out.w {
                            data[dst + xx] = g.data()[src_row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(out, data)
}
