//! Pooled channel statistics and group normalization.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn plane_means<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let hw = x.shape().hw();
    let inv = T::one() / T::from_usize(hw).unwrap();
    x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

impl<T: Real> Tape<T> {
    /// Spatial mean per channel, shape `(n, c, 1, 1)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let means = plane_means(self.value(x));
        let out = Shape::new(sx.n, sx.c, 1, 1);
        self.record("channel_mean", Tensor::from_parts(out, means), &[x], move |ctx| {
            let inv = T::one() / T::from_usize(sx.hw()).unwrap();
            let mut g = Vec::with_capacity(sx.numel());
            for &gv in ctx.grad.data() {
                g.extend(std::iter::repeat_n(gv * inv, sx.hw()));
            }
            vec![Some(Tensor::from_parts(sx, g))]
        })
    }

    /// Spatial population standard deviation per channel, shape `(n, c, 1, 1)`.
    ///
    /// The gradient of a zero-variance plane is taken as zero.
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let hw = sx.hw();
        let nf = T::from_usize(hw).unwrap();
        let means = plane_means(self.value(x));
        let stds: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .zip(&means)
            .map(|(p, &m)| (p.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / nf).sqrt())
            .collect();
        let out = Shape::new(sx.n, sx.c, 1, 1);
        self.record("channel_std", Tensor::from_parts(out, stds), &[x], move |ctx| {
            let x = ctx.inputs[0];
            let mut g = Vec::with_capacity(sx.numel());
            for ((p, &gv), &sd) in x.data().chunks_exact(hw).zip(ctx.grad.data()).zip(ctx.output.data()) {
                let m = p.iter().copied().sum::<T>() / nf;
                if sd > T::zero() {
                    let k = gv / (nf * sd);
                    g.extend(p.iter().map(|&v| k * (v - m)));
                } else {
                    g.extend(std::iter::repeat_n(T::zero(), hw));
                }
            }
            vec![Some(Tensor::from_parts(sx, g))]
        })
    }

    /// Per-channel spatial `(mean, population std)`.
    pub fn global_pool_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_std(x)?))
    }

    /// Normalise each `(sample, group)` to zero mean and unit variance, then
    /// apply the per-channel affine `gamma · x̂ + beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        if groups == 0 || !sx.c.is_multiple_of(groups) {
            return Err(Error::dim("group_norm", format!("{} channels not divisible by {groups} groups", sx.c)));
        }
        let affine = Shape::new(1, sx.c, 1, 1);
        for v in [gamma, beta] {
            if self.shape(v) != affine {
                return Err(Error::ShapeMismatch { op: "group_norm", lhs: affine, rhs: self.shape(v) });
            }
        }
        let eps = T::lit(eps);
        let span = sx.c / groups * sx.hw();
        let cnt = T::from_usize(span).unwrap();
        let hw = sx.hw();
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(sx.numel());
        let mut inv_std = Vec::with_capacity(sx.n * groups);
        for chunk in xv.chunks_exact(span) {
            let m = chunk.iter().copied().sum::<T>() / cnt;
            let var = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(chunk.iter().map(|&v| (v - m) * is));
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / hw) % sx.c;
                gm[c] * v + bt[c]
            })
            .collect();
        self.record("group_norm", Tensor::from_parts(sx, out), &[x, gamma, beta], move |ctx| {
            let g = ctx.grad.data();
            let gm = ctx.inputs[1].data();
            let mut dgamma = vec![T::zero(); sx.c];
            let mut dbeta = vec![T::zero(); sx.c];
            for (i, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
                let c = (i / hw) % sx.c;
                dgamma[c] += gv * xh;
                dbeta[c] += gv;
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = Vec::with_capacity(sx.numel());
                for (gi, ((gchunk, xchunk), &is)) in
                    g.chunks_exact(span).zip(xhat.chunks_exact(span)).zip(&inv_std).enumerate()
                {
                    let c0 = (gi % groups) * (sx.c / groups);
                    let dxhat: Vec<T> =
                        gchunk.iter().enumerate().map(|(j, &gv)| gv * gm[c0 + j / hw]).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / cnt;
                    let mean_dx = dxhat.iter().zip(xchunk).map(|(&d, &xh)| d * xh).sum::<T>() / cnt;
                    dx.extend(dxhat.iter().zip(xchunk).map(|(&d, &xh)| is * (d - mean_d - xh * mean_dx)));
                }
                Tensor::from_parts(sx, dx)
            });
            vec![
                dx,
                ctx.needs[1].then(|| Tensor::from_parts(affine, dgamma)),
                ctx.needs[2].then(|| Tensor::from_parts(affine, dbeta)),
            ]
        })
    }
}
