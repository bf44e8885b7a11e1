//! Feature shuffle weighted groups and the full super-resolution network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{Conv, ResidualUnit, Scalar, UnitKind, UnitWidths, Wdib, WdibOptions};
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams, ParamBuilder};
use crate::tensor::{Real, Tensor};

/// Architecture switches used to instantiate ablated variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation(u32);

impl Ablation {
    /// Replace every wide residual unit by a 3×3 conv + ReLU.
    pub const PLAIN_UNITS: u32 = 1 << 0;
    /// Drop the gated distillation connections.
    pub const NO_DISTILLATION: u32 = 1 << 1;
    /// Fuse the two branches with a 1×1 conv over their concatenation.
    pub const NO_SCF: u32 = 1 << 2;
    /// Drop the group-conv/shuffle interaction between blocks of a group.
    pub const NO_INTERACTION: u32 = 1 << 3;
    /// Use a plain identity for the long skip of every group.
    pub const NO_WIRW_SKIP: u32 = 1 << 4;
    /// Replace every wide residual unit by a conv-ReLU-conv residual block.
    pub const RESBLOCK_UNITS: u32 = 1 << 5;

    const ALL: u32 = (1 << 6) - 1;

    pub const fn none() -> Self {
        Ablation(0)
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits & !Self::ALL != 0 {
            return Err(Error::Config(format!("unknown ablation bits {bits:#x}")));
        }
        if bits & Self::PLAIN_UNITS != 0 && bits & Self::RESBLOCK_UNITS != 0 {
            return Err(Error::Config("plain and resblock units are mutually exclusive".into()));
        }
        Ok(Ablation(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn has(self, flag: u32) -> bool {
        self.0 & flag != 0
    }

    pub fn unit_kind(self) -> UnitKind {
        if self.has(Self::PLAIN_UNITS) {
            UnitKind::Plain
        } else if self.has(Self::RESBLOCK_UNITS) {
            UnitKind::ResBlock
        } else {
            UnitKind::Wide
        }
    }
}

/// Named architecture variants for ablation runs.
pub const VARIANTS: &[(&str, u32)] = &[
    ("full", 0),
    ("baseline1", Ablation::PLAIN_UNITS | Ablation::NO_DISTILLATION | Ablation::NO_SCF),
    ("baseline2", Ablation::NO_DISTILLATION | Ablation::NO_SCF),
    ("no-scf", Ablation::NO_SCF),
    ("no-dc", Ablation::NO_DISTILLATION),
    ("scf-only", Ablation::PLAIN_UNITS | Ablation::NO_DISTILLATION),
    ("plain-resblock", Ablation::RESBLOCK_UNITS),
    ("no-interaction", Ablation::NO_INTERACTION | Ablation::NO_WIRW_SKIP),
    ("no-block-interaction", Ablation::NO_INTERACTION),
    ("no-wirw-skip", Ablation::NO_WIRW_SKIP),
];

pub fn variant(name: &str) -> Result<Ablation> {
    VARIANTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, bits)| Ablation(bits))
        .ok_or_else(|| {
            let known: Vec<_> = VARIANTS.iter().map(|v| v.0).collect();
            Error::Config(format!("unknown variant `{name}` (known: {})", known.join(", ")))
        })
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdiwnConfig {
    pub scale: usize,
    pub channels: usize,
    pub wide: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub sa_groups: usize,
    pub cgs_groups: usize,
    pub ablation: Ablation,
}

/// Default width of the expanded activation inside wide residual units.
pub const DEFAULT_WIDE: usize = 25;

impl FdiwnConfig {
    /// The six-group model.
    pub fn fdiwn(scale: usize) -> Self {
        FdiwnConfig {
            scale,
            channels: 24,
            wide: DEFAULT_WIDE,
            n_groups: 6,
            n_blocks: 3,
            sa_groups: 12,
            cgs_groups: 4,
            ablation: Ablation::none(),
        }
    }

    /// The four-group model.
    pub fn fdiwn_m(scale: usize) -> Self {
        FdiwnConfig { n_groups: 4, ..Self::fdiwn(scale) }
    }

    /// Width of the pooled-statistics head of every coefficient learner.
    pub fn coeff_hidden(&self) -> usize {
        (self.channels / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return bad(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.n_groups == 0 || self.n_blocks == 0 {
            return bad("n_groups and n_blocks must be at least 1".into());
        }
        if self.ablation.unit_kind() == UnitKind::Wide {
            if self.wide <= self.channels {
                return bad(format!("wide ({}) must exceed channels ({})", self.wide, self.channels));
            }
            let c = self.channels;
            // attention runs on C-channel unit outputs
            if self.sa_groups == 0 || !c.is_multiple_of(self.sa_groups) || !(c / self.sa_groups).is_multiple_of(2) {
                return bad(format!("sa_groups {} must split {c} channels into even groups", self.sa_groups));
            }
        }
        if self.cgs_groups == 0 || !(2 * self.channels).is_multiple_of(self.cgs_groups) || !self.channels.is_multiple_of(self.cgs_groups) {
            return bad(format!("cgs_groups {} must divide {} and {}", self.cgs_groups, 2 * self.channels, self.channels));
        }
        Ok(())
    }

    pub fn widths(&self) -> UnitWidths {
        UnitWidths { wide: self.wide, sa_groups: self.sa_groups, kind: self.ablation.unit_kind() }
    }

    pub fn wdib_options(&self) -> WdibOptions {
        WdibOptions {
            channels: self.channels,
            widths: self.widths(),
            coeff_hidden: self.coeff_hidden(),
            distillation: !self.ablation.has(Ablation::NO_DISTILLATION),
            self_calibrated_fusion: !self.ablation.has(Ablation::NO_SCF),
        }
    }
}

impl fmt::Display for FdiwnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x{} C={} W={} groups={} blocks={} sa_groups={} cgs_groups={} ablation={:#x}",
            self.scale,
            self.channels,
            self.wide,
            self.n_groups,
            self.n_blocks,
            self.sa_groups,
            self.cgs_groups,
            self.ablation.bits()
        )
    }
}

/// A chain of butterfly blocks whose outputs interact through grouped
/// 1×1 fusion and channel shuffle, with a weighted long skip.
#[derive(Clone, Debug)]
pub struct Fswg {
    channels: usize,
    blocks: Vec<Wdib>,
    interaction: bool,
    fuse: Vec<Conv>,
    cgs_groups: usize,
    skip: Option<ResidualUnit>,
    lambda_x: Scalar,
    lambda_res: Scalar,
}

impl Fswg {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &FdiwnConfig) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.n_blocks)
            .map(|i| b.scope(&format!("block{i}"), |b| Wdib::new(b, cfg.wdib_options())))
            .collect::<Result<Vec<_>>>()?;
        let interaction = !cfg.ablation.has(Ablation::NO_INTERACTION);
        let fuse = if !interaction {
            Vec::new()
        } else {
            (1..cfg.n_blocks)
                .map(|i| Conv::new(b, &format!("fuse{i}"), 2 * c, c, 1, cfg.cgs_groups))
                .collect::<Result<Vec<_>>>()?
        };
        let skip = if cfg.ablation.has(Ablation::NO_WIRW_SKIP) {
            None
        } else {
            Some(b.scope("skip", |b| ResidualUnit::wirw(b, c, cfg.widths()))?)
        };
        Ok(Fswg {
            channels: c,
            blocks,
            interaction,
            fuse,
            cgs_groups: cfg.cgs_groups,
            skip,
            lambda_x: Scalar::new(b, "lambda_x")?,
            lambda_res: Scalar::new(b, "lambda_res")?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, w0: Var) -> Result<Var> {
        self.wire(tape, p, w0, |tape, i, x| self.blocks[i].forward(tape, p, x))
    }

    /// Block outputs are produced by `run_block`; everything else happens here.
    fn wire<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        w0: Var,
        mut run_block: impl FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut cur = w0;
        for i in 0..self.blocks.len() {
            cur = run_block(tape, i, cur).map_err(|e| match e {
                Error::Dimension { op, msg } => Error::Dimension { op, msg: format!("block {i}: {msg}") },
                other => other,
            })?;
            outs.push(cur);
        }
        let last = cur;
        let main = if !self.interaction {
            last
        } else {
            let mut acc = outs[0];
            for (conv, &w) in self.fuse.iter().zip(&outs[1..]) {
                let cat = tape.concat_channels(&[acc, w])?;
                let h = conv.forward(tape, p, cat)?;
                acc = tape.channel_shuffle(h, self.cgs_groups)?;
            }
            tape.add(acc, last)?
        };
        let main = self.lambda_x.forward(tape, p, main)?;
        let skip = match &self.skip {
            Some(unit) => unit.forward(tape, p, w0)?,
            None => w0,
        };
        let skip = self.lambda_res.forward(tape, p, skip)?;
        tape.add(main, skip)
    }

    /// Forward pass that keeps only one block's intermediates alive at a time.
    fn infer<T: Real>(&self, params: &ModelParams<T>, w0: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(w0.clone());
        let y = self.wire(&mut tape, &p, x, |outer, i, v| {
            let input = outer.value(v).clone();
            let mut inner = Tape::new();
            let ip = params.bind(&mut inner, false);
            let x = inner.constant(input);
            let y = self.blocks[i].forward(&mut inner, &ip, x)?;
            let out = inner.value(y).clone();
            Ok(outer.constant(out))
        })?;
        Ok(tape.value(y).clone())
    }

    fn macs(&self, hw: usize) -> u64 {
        let px = hw as u64;
        let c = self.channels as u64;
        let mut total: u64 = self.blocks.iter().map(|b| b.macs(1, hw)).sum();
        total += self.fuse.iter().map(|f| px * f.macs_per_pixel()).sum::<u64>();
        if let Some(s) = &self.skip {
            total += s.macs(1, hw);
        }
        total + 2 * c * px
    }
}

/// The full network: shallow conv, a chain of groups with inter-group
/// residuals, and two sub-pixel upsampling paths.
#[derive(Clone, Debug)]
pub struct Fdiwn {
    pub config: FdiwnConfig,
    shallow: Conv,
    groups: Vec<Fswg>,
    up_deep: Conv,
    up_skip: Conv,
}

impl Fdiwn {
    /// Build the layout and fresh parameters from `seed`.
    ///
    /// The untrained network is a bilinear upsampler: the input path starts
    /// as bilinear interpolation and the deep path's output conv at zero.
    pub fn new(cfg: FdiwnConfig, seed: u64) -> Result<(Self, ModelParams<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let model = Self::build(cfg, &mut ParamBuilder::new(&mut params, &mut rng))?;
        *params.get_mut(model.up_skip.weight()) = bilinear_kernel(cfg.scale);
        params.get_mut(model.up_deep.weight()).data_mut().fill(0.0);
        for b in [model.up_skip.bias(), model.up_deep.bias()].into_iter().flatten() {
            params.get_mut(b).data_mut().fill(0.0);
        }
        Ok((model, params))
    }

    fn build<R: Rng>(cfg: FdiwnConfig, b: &mut ParamBuilder<'_, R>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let out = 3 * cfg.scale * cfg.scale;
        let shallow = Conv::new(b, "shallow", 3, c, 3, 1)?;
        let groups = (0..cfg.n_groups)
            .map(|i| b.scope(&format!("group{i}"), |b| Fswg::new(b, &cfg)))
            .collect::<Result<Vec<_>>>()?;
        let up_deep = Conv::new(b, "up_deep", c, out, 3, 1)?;
        let up_skip = Conv::new(b, "up_skip", 3, out, 3, 1)?;
        Ok(Fdiwn { config: cfg, shallow, groups, up_deep, up_skip })
    }

    /// Layout for `cfg`, checking that `params` carries exactly its tensors.
    pub fn from_params(cfg: FdiwnConfig, params: &ModelParams<f32>) -> Result<Self> {
        let (model, fresh) = Self::new(cfg, 0)?;
        check_layout(&fresh, params)?;
        Ok(model)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, lr: Var) -> Result<Var> {
        let s = tape.shape(lr);
        if s.c != 3 {
            return Err(Error::dim("fdiwn", format!("expected 3 input channels, got {}", s.c)));
        }
        let x0 = self.shallow.forward(tape, p, lr)?;
        let deep = self.chain(tape, x0, |tape, i, x| self.groups[i].forward(tape, p, x))?;
        self.reconstruct(tape, p, deep, lr)
    }

    /// `X₁ = F⁰(X₀)`, `X_{k+1} = Fᵏ(X_k) + X_k`; returns `Σ Fᵏ(X_k)`.
    fn chain<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x0: Var,
        mut run_group: impl FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut x = x0;
        let mut deep: Option<Var> = None;
        for i in 0..self.groups.len() {
            let raw = run_group(tape, i, x).map_err(|e| match e {
                Error::Dimension { op, msg } => Error::Dimension { op, msg: format!("group {i}: {msg}") },
                other => other,
            })?;
            deep = Some(match deep {
                Some(d) => tape.add(d, raw)?,
                None => raw,
            });
            x = if i == 0 { raw } else { tape.add(raw, x)? };
        }
        Ok(deep.expect("at least one group"))
    }

    fn reconstruct<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, deep: Var, lr: Var) -> Result<Var> {
        let r = self.config.scale;
        let a = self.up_deep.forward(tape, p, deep)?;
        let a = tape.pixel_shuffle(a, r)?;
        let b = self.up_skip.forward(tape, p, lr)?;
        let b = tape.pixel_shuffle(b, r)?;
        tape.add(a, b)
    }

    /// Super-resolve a batch without gradients, holding at most one block's
    /// intermediate activations in memory at a time.
    pub fn infer<T: Real>(&self, params: &ModelParams<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(lr.clone());
        if tape.shape(x).c != 3 {
            return Err(Error::dim("fdiwn", format!("expected 3 input channels, got {}", lr.shape().c)));
        }
        let x0 = self.shallow.forward(&mut tape, &p, x)?;
        let deep = self.chain(&mut tape, x0, |tape, i, v| {
            let out = self.groups[i].infer(params, tape.value(v))?;
            Ok(tape.constant(out))
        })?;
        let y = self.reconstruct(&mut tape, &p, deep, x)?;
        Ok(tape.value(y).clone())
    }

    /// Multiply-accumulates of one forward pass on a single `lr_h × lr_w` input.
    pub fn macs(&self, lr_h: usize, lr_w: usize) -> u64 {
        let hw = lr_h * lr_w;
        let px = hw as u64;
        let mut total = px * (self.shallow.macs_per_pixel() + self.up_deep.macs_per_pixel() + self.up_skip.macs_per_pixel());
        total += self.groups.iter().map(|g| g.macs(hw)).sum::<u64>();
        total
    }
}

/// Weights of a 3×3 conv feeding a pixel shuffle so that the pair performs
/// bilinear ×`r` upsampling of each RGB channel.
pub fn bilinear_kernel(r: usize) -> Tensor<f32> {
    let taps = |i: usize| -> [f32; 3] {
        let u = (i as f32 + 0.5) / r as f32 - 0.5;
        std::array::from_fn(|k| (1.0 - (u - (k as f32 - 1.0)).abs()).max(0.0))
    };
    Tensor::from_fn(crate::tensor::Shape::new(3 * r * r, 3, 3, 3), |o, c, ky, kx| {
        let (k, sub) = (o / (r * r), o % (r * r));
        if k != c {
            return 0.0;
        }
        taps(sub / r)[ky] * taps(sub % r)[kx]
    })
}

fn check_layout(expected: &ModelParams<f32>, found: &ModelParams<f32>) -> Result<()> {
    let mut found_iter = found.iter();
    for (name, p) in expected.iter() {
        let Some((got, q)) = found_iter.next() else {
            return Err(Error::Format(format!("missing tensor `{name}`")));
        };
        if got != name {
            return Err(Error::Format(format!("expected tensor `{name}`, found `{got}`")));
        }
        if q.dims != p.dims {
            return Err(Error::TensorShape { name: name.to_string(), expected: p.dims.clone(), found: q.dims.clone() });
        }
    }
    if let Some((name, _)) = found_iter.next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }
    Ok(())
}

/// Total learnable scalars, adaptive weights included.
pub fn count_params<T: Real>(params: &ModelParams<T>) -> usize {
    params.count()
}

/// Analytic multiply-accumulate count for producing one `out_h × out_w`
/// image; the input is `⌊out_h/r⌋ × ⌊out_w/r⌋`.
pub fn count_multi_adds(cfg: &FdiwnConfig, out_h: usize, out_w: usize) -> Result<u64> {
    let r = cfg.scale;
    if out_h < r || out_w < r {
        return Err(Error::Config(format!("output {out_h}x{out_w} is smaller than scale {r}")));
    }
    let (model, _) = Fdiwn::new(*cfg, 0)?;
    Ok(model.macs(out_h / r, out_w / r))
}

/// `k²·in_c/groups·out_c·h·w` for a stride-1 "same" convolution.
pub fn conv_macs(k: usize, in_c: usize, out_c: usize, groups: usize, h: usize, w: usize) -> u64 {
    (k * k * in_c / groups * out_c) as u64 * (h * w) as u64
}
