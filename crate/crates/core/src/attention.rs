//! Shuffle attention: channels are split into `g` groups, each group is halved
//! into a channel-gated branch (pooled statistics) and a spatially-gated
//! branch (normalised activations), and the recombined groups are shuffled.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Shape};

/// Normaliser epsilon of the spatial branch.
pub const SA_NORM_EPS: f64 = 1e-5;

/// Tape handles of one attention unit. Every tensor is `(1, c/(2g), 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct SaParams {
    pub groups: usize,
    pub channel_weight: Var,
    pub channel_bias: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

pub fn check_sa_groups(channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !channels.is_multiple_of(groups) || !(channels / groups).is_multiple_of(2) {
        return Err(Error::dim(
            "shuffle_attention",
            format!("{channels} channels need {groups} groups of even size"),
        ));
    }
    Ok(channels / groups / 2)
}

pub fn shuffle_attention<T: Real>(tape: &mut Tape<T>, x: Var, p: &SaParams) -> Result<Var> {
    let s = tape.shape(x);
    let half = check_sa_groups(s.c, p.groups)?;
    let per = 2 * half;
    let grouped = tape.reshape(x, Shape::new(s.n * p.groups, per, s.h, s.w))?;
    let (x_ch, x_sp) = tape.channel_split(grouped)?;

    let pooled = tape.channel_mean(x_ch)?;
    let a = tape.mul(pooled, p.channel_weight)?;
    let a = tape.add(a, p.channel_bias)?;
    let gate = tape.sigmoid(a)?;
    let out_ch = tape.mul(x_ch, gate)?;

    // one normalisation group per channel of the branch
    let normed = tape.group_norm(x_sp, half, p.norm_gamma, p.norm_beta, SA_NORM_EPS)?;
    let b = tape.mul(normed, p.spatial_weight)?;
    let b = tape.add(b, p.spatial_bias)?;
    let gate = tape.sigmoid(b)?;
    let out_sp = tape.mul(x_sp, gate)?;

    let joined = tape.concat_channels(&[out_ch, out_sp])?;
    let merged = tape.reshape(joined, s)?;
    tape.channel_shuffle(merged, p.groups)
}

/// Parameter slots of an attention unit inside a model.
#[derive(Clone, Debug)]
pub struct ShuffleAttention {
    pub channels: usize,
    pub groups: usize,
    channel_weight: ParamId,
    channel_bias: ParamId,
    spatial_weight: ParamId,
    spatial_bias: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

impl ShuffleAttention {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, groups: usize) -> Result<Self> {
        let half = check_sa_groups(channels, groups)?;
        let dims = vec![half];
        Ok(ShuffleAttention {
            channels,
            groups,
            channel_weight: b.param("cweight", dims.clone(), Init::Const(0.0))?,
            channel_bias: b.param("cbias", dims.clone(), Init::Const(1.0))?,
            spatial_weight: b.param("sweight", dims.clone(), Init::Const(0.0))?,
            spatial_bias: b.param("sbias", dims.clone(), Init::Const(1.0))?,
            norm_gamma: b.param("gn_gamma", dims.clone(), Init::Const(1.0))?,
            norm_beta: b.param("gn_beta", dims, Init::Const(0.0))?,
        })
    }

    pub fn bind(&self, p: &Bound) -> SaParams {
        SaParams {
            groups: self.groups,
            channel_weight: p.var(self.channel_weight),
            channel_bias: p.var(self.channel_bias),
            spatial_weight: p.var(self.spatial_weight),
            spatial_bias: p.var(self.spatial_bias),
            norm_gamma: p.var(self.norm_gamma),
            norm_beta: p.var(self.norm_beta),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        shuffle_attention(tape, x, &self.bind(p))
    }

    /// Elementwise products per pixel: two gates and the spatial affine.
    pub fn macs_per_pixel(&self) -> u64 {
        (self.channels + self.channels / 2) as u64
    }

    /// Products at 1×1 resolution (the pooled channel affine), per sample.
    pub fn macs_per_sample(&self) -> u64 {
        (self.channels / 2) as u64
    }
}
