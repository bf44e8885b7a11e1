//! Building blocks of the distillation-interaction network: wide residual
//! weighting units, combination-coefficient learners, distillation gates,
//! self-calibrated fusion and the two-stage butterfly block.

use rand::Rng;

use crate::attention::ShuffleAttention;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::Real;

/// A convolution layer with "same" padding at stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub groups: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !in_c.is_multiple_of(groups) || !out_c.is_multiple_of(groups) {
            return Err(Error::dim("conv2d", format!("{name}: groups={groups} must divide {in_c} and {out_c}")));
        }
        let fan_in = in_c / groups * k * k;
        let (weight, bias) = b.scope(name, |b| {
            Ok((
                b.param("weight", vec![out_c, in_c / groups, k, k], Init::FanIn(fan_in))?,
                b.param("bias", vec![out_c], Init::FanIn(fan_in))?,
            ))
        })?;
        Ok(Conv { in_c, out_c, k, groups, weight, bias: Some(bias) })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let params = ConvParams::same(p.var(self.weight), self.bias.map(|b| p.var(b)), self.k).with_groups(self.groups);
        tape.conv2d(x, params)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn macs_per_pixel(&self) -> u64 {
        (self.out_c * self.in_c / self.groups * self.k * self.k) as u64
    }
}

/// Learnable scalar weight, initialised to 1.
#[derive(Clone, Copy, Debug)]
pub struct Scalar(ParamId);

impl Scalar {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str) -> Result<Self> {
        Ok(Scalar(b.param(name, vec![1], Init::Const(1.0))?))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.scalar_weight(x, p.var(self.0))
    }

    pub fn id(&self) -> ParamId {
        self.0
    }
}

/// What stands in for a wide-residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Wide activation with attention and adaptive weights (the full model).
    Wide,
    /// A single 3×3 convolution followed by ReLU.
    Plain,
    /// Two 3×3 convolutions around a ReLU plus a shortcut.
    ResBlock,
}

#[derive(Clone, Debug)]
enum UnitBody {
    Wide {
        expand: Conv,
        reduce: Conv,
        attention: ShuffleAttention,
        lambda_x: Scalar,
        lambda_res: Scalar,
        shortcut: Option<Conv>,
    },
    Plain {
        conv: Conv,
    },
    ResBlock {
        conv1: Conv,
        conv2: Conv,
        shortcut: Option<Conv>,
    },
}

/// Wide identical (no shortcut conv) or convolutional (3×3 shortcut conv)
/// residual weighting unit:
/// `λ_x · SA(reduce(relu(expand(x)))) + λ_res · shortcut(x)`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub in_c: usize,
    pub out_c: usize,
    body: UnitBody,
}

/// Channel widths shared by every unit of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitWidths {
    pub wide: usize,
    pub sa_groups: usize,
    pub kind: UnitKind,
}

impl ResidualUnit {
    /// Identity-shortcut unit, `c → c`.
    pub fn wirw<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, widths: UnitWidths) -> Result<Self> {
        Self::build(b, c, c, widths, false)
    }

    /// Convolutional-shortcut unit, `in_c → out_c`.
    pub fn wcrw<R: Rng>(b: &mut ParamBuilder<'_, R>, in_c: usize, out_c: usize, widths: UnitWidths) -> Result<Self> {
        Self::build(b, in_c, out_c, widths, true)
    }

    fn build<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        in_c: usize,
        out_c: usize,
        widths: UnitWidths,
        conv_shortcut: bool,
    ) -> Result<Self> {
        let body = match widths.kind {
            UnitKind::Wide => {
                if widths.wide <= in_c.max(out_c) / 2 {
                    return Err(Error::Config(format!(
                        "wide channels {} too narrow for a {in_c}→{out_c} unit",
                        widths.wide
                    )));
                }
                UnitBody::Wide {
                    expand: Conv::new(b, "expand", in_c, widths.wide, 1, 1)?,
                    reduce: Conv::new(b, "reduce", widths.wide, out_c, 1, 1)?,
                    attention: b.scope("sa", |b| ShuffleAttention::new(b, out_c, widths.sa_groups))?,
                    lambda_x: Scalar::new(b, "lambda_x")?,
                    lambda_res: Scalar::new(b, "lambda_res")?,
                    shortcut: conv_shortcut.then(|| Conv::new(b, "shortcut", in_c, out_c, 3, 1)).transpose()?,
                }
            }
            UnitKind::Plain => UnitBody::Plain { conv: Conv::new(b, "conv", in_c, out_c, 3, 1)? },
            UnitKind::ResBlock => UnitBody::ResBlock {
                conv1: Conv::new(b, "conv1", in_c, out_c, 3, 1)?,
                conv2: Conv::new(b, "conv2", out_c, out_c, 3, 1)?,
                shortcut: (in_c != out_c).then(|| Conv::new(b, "shortcut", in_c, out_c, 3, 1)).transpose()?,
            },
        };
        if !conv_shortcut && in_c != out_c {
            return Err(Error::dim("residual unit", format!("identity shortcut needs in_c == out_c, got {in_c}→{out_c}")));
        }
        Ok(ResidualUnit { in_c, out_c, body })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.in_c {
            return Err(Error::dim("residual unit", format!("expected {} input channels, got {c}", self.in_c)));
        }
        match &self.body {
            UnitBody::Wide { expand, reduce, attention, lambda_x, lambda_res, shortcut } => {
                let h = expand.forward(tape, p, x)?;
                let h = tape.relu(h)?;
                let h = reduce.forward(tape, p, h)?;
                let h = attention.forward(tape, p, h)?;
                let main = lambda_x.forward(tape, p, h)?;
                let skip = match shortcut {
                    Some(conv) => conv.forward(tape, p, x)?,
                    None => x,
                };
                let skip = lambda_res.forward(tape, p, skip)?;
                tape.add(main, skip)
            }
            UnitBody::Plain { conv } => {
                let h = conv.forward(tape, p, x)?;
                tape.relu(h)
            }
            UnitBody::ResBlock { conv1, conv2, shortcut } => {
                let h = conv1.forward(tape, p, x)?;
                let h = tape.relu(h)?;
                let h = conv2.forward(tape, p, h)?;
                let skip = match shortcut {
                    Some(conv) => conv.forward(tape, p, x)?,
                    None => x,
                };
                tape.add(h, skip)
            }
        }
    }

    pub fn macs(&self, n: usize, hw: usize) -> u64 {
        let (n, hw) = (n as u64, hw as u64);
        match &self.body {
            UnitBody::Wide { expand, reduce, attention, shortcut, .. } => {
                let mut px = expand.macs_per_pixel() + reduce.macs_per_pixel() + attention.macs_per_pixel();
                // two adaptive weights
                px += 2 * self.out_c as u64;
                if let Some(s) = shortcut {
                    px += s.macs_per_pixel();
                }
                n * hw * px + n * attention.macs_per_sample()
            }
            UnitBody::Plain { conv } => n * hw * conv.macs_per_pixel(),
            UnitBody::ResBlock { conv1, conv2, shortcut } => {
                let s = shortcut.as_ref().map_or(0, Conv::macs_per_pixel);
                n * hw * (conv1.macs_per_pixel() + conv2.macs_per_pixel() + s)
            }
        }
    }

    pub fn kind(&self) -> UnitKind {
        match self.body {
            UnitBody::Wide { .. } => UnitKind::Wide,
            UnitBody::Plain { .. } => UnitKind::Plain,
            UnitBody::ResBlock { .. } => UnitKind::ResBlock,
        }
    }
}

/// Per-channel combination coefficients in (0, 1) learned from pooled
/// mean/std statistics: `sigmoid(W₂ relu(W₁ [mean; std]))`.
#[derive(Clone, Debug)]
pub struct CoeffLearner {
    pub channels: usize,
    squeeze: Conv,
    excite: Conv,
}

impl CoeffLearner {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, hidden: usize) -> Result<Self> {
        Ok(CoeffLearner {
            channels,
            squeeze: Conv::new(b, "squeeze", 2 * channels, hidden, 1, 1)?,
            excite: Conv::new(b, "excite", hidden, channels, 1, 1)?,
        })
    }

    /// Coefficient vector of shape `(n, c, 1, 1)`.
    pub fn coefficients<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (mean, std) = tape.global_pool_stats(x)?;
        let stats = tape.concat_channels(&[mean, std])?;
        let h = self.squeeze.forward(tape, p, stats)?;
        let h = tape.relu(h)?;
        let h = self.excite.forward(tape, p, h)?;
        tape.sigmoid(h)
    }

    /// `M⟨x⟩ = M(x) · x`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let m = self.coefficients(tape, p, x)?;
        tape.mul(x, m)
    }

    pub fn macs(&self, n: usize, hw: usize) -> u64 {
        let head = self.squeeze.macs_per_pixel() + self.excite.macs_per_pixel();
        n as u64 * (head + (hw * self.channels) as u64)
    }
}

/// 3×3 convolution followed by a sigmoid, expanding distilled channels.
#[derive(Clone, Debug)]
pub struct SigmoidGate {
    conv: Conv,
}

impl SigmoidGate {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        Ok(SigmoidGate { conv: Conv::new(b, name, in_c, out_c, k, 1)? })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, p, x)?;
        tape.sigmoid(h)
    }

    pub fn in_c(&self) -> usize {
        self.conv.in_c
    }

    pub fn out_c(&self) -> usize {
        self.conv.out_c
    }

    pub fn macs_per_pixel(&self) -> u64 {
        self.conv.macs_per_pixel()
    }
}

/// Fusion of the two butterfly branches.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// `λ₄x₂ · S₁([λ₃x₁; λ₄x₂]) + WCRW([λ₃x₁; λ₄x₂])`
    SelfCalibrated { lambda1: Scalar, lambda2: Scalar, gate: SigmoidGate, refine: ResidualUnit },
    /// `conv1×1([x₁; x₂])`
    Concat { conv: Conv },
}

impl Fusion {
    pub fn self_calibrated<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize, widths: UnitWidths) -> Result<Self> {
        Ok(Fusion::SelfCalibrated {
            lambda1: Scalar::new(b, "lambda_x3")?,
            lambda2: Scalar::new(b, "lambda_x4")?,
            gate: SigmoidGate::new(b, "gate", 2 * c, c, 1)?,
            refine: b.scope("refine", |b| ResidualUnit::wcrw(b, 2 * c, c, widths))?,
        })
    }

    pub fn concat<R: Rng>(b: &mut ParamBuilder<'_, R>, c: usize) -> Result<Self> {
        Ok(Fusion::Concat { conv: Conv::new(b, "conv", 2 * c, c, 1, 1)? })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x1: Var, x2: Var) -> Result<Var> {
        let (s1, s2) = (tape.shape(x1), tape.shape(x2));
        if s1 != s2 {
            return Err(Error::ShapeMismatch { op: "fusion", lhs: s1, rhs: s2 });
        }
        match self {
            Fusion::SelfCalibrated { lambda1, lambda2, gate, refine } => {
                let a = lambda1.forward(tape, p, x1)?;
                let b = lambda2.forward(tape, p, x2)?;
                let cat = tape.concat_channels(&[a, b])?;
                let g = gate.forward(tape, p, cat)?;
                let calibrated = tape.mul(b, g)?;
                let refined = refine.forward(tape, p, cat)?;
                tape.add(calibrated, refined)
            }
            Fusion::Concat { conv } => {
                let cat = tape.concat_channels(&[x1, x2])?;
                conv.forward(tape, p, cat)
            }
        }
    }

    pub fn macs(&self, n: usize, hw: usize, c: usize) -> u64 {
        let px = (n * hw) as u64;
        match self {
            Fusion::SelfCalibrated { gate, refine, .. } => {
                // two adaptive weights and the calibration product
                px * (3 * c as u64 + gate.macs_per_pixel()) + refine.macs(n, hw)
            }
            Fusion::Concat { conv } => px * conv.macs_per_pixel(),
        }
    }

    pub fn in_c(&self) -> usize {
        match self {
            Fusion::SelfCalibrated { refine, .. } => refine.in_c,
            Fusion::Concat { conv } => conv.in_c,
        }
    }

    pub fn out_c(&self) -> usize {
        match self {
            Fusion::SelfCalibrated { refine, .. } => refine.out_c,
            Fusion::Concat { conv } => conv.out_c,
        }
    }
}

/// Options of one butterfly block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WdibOptions {
    pub channels: usize,
    pub widths: UnitWidths,
    pub coeff_hidden: usize,
    pub distillation: bool,
    pub self_calibrated_fusion: bool,
}

/// Channel count of every intermediate tensor of a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelLedger {
    pub entries: Vec<(&'static str, usize)>,
}

impl ChannelLedger {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|(n, _)| *n == name).map(|e| e.1)
    }
}

/// Two-stage butterfly block with distillation connections and fusion.
#[derive(Clone, Debug)]
pub struct Wdib {
    pub channels: usize,
    stage1: ResidualUnit,
    cross1: ResidualUnit,
    stage2: ResidualUnit,
    cross2: ResidualUnit,
    m1: CoeffLearner,
    n1: CoeffLearner,
    m2: CoeffLearner,
    n2: CoeffLearner,
    distill: Option<(SigmoidGate, SigmoidGate)>,
    out1: ResidualUnit,
    out2: ResidualUnit,
    fusion: Fusion,
    ledger: ChannelLedger,
}

impl Wdib {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, opts: WdibOptions) -> Result<Self> {
        let c = opts.channels;
        if !c.is_multiple_of(2) || c == 0 {
            return Err(Error::dim("wdib", format!("channel count {c} must be even")));
        }
        let half = c / 2;
        let w = opts.widths;
        let block = Wdib {
            channels: c,
            stage1: b.scope("stage1", |b| ResidualUnit::wirw(b, c, w))?,
            cross1: b.scope("cross1", |b| ResidualUnit::wcrw(b, half, c, w))?,
            stage2: b.scope("stage2", |b| ResidualUnit::wirw(b, c, w))?,
            cross2: b.scope("cross2", |b| ResidualUnit::wcrw(b, half, c, w))?,
            m1: b.scope("m1", |b| CoeffLearner::new(b, c, opts.coeff_hidden))?,
            n1: b.scope("n1", |b| CoeffLearner::new(b, c, opts.coeff_hidden))?,
            m2: b.scope("m2", |b| CoeffLearner::new(b, c, opts.coeff_hidden))?,
            n2: b.scope("n2", |b| CoeffLearner::new(b, c, opts.coeff_hidden))?,
            distill: if opts.distillation {
                Some((SigmoidGate::new(b, "distill1", half, c, 3)?, SigmoidGate::new(b, "distill2", half, c, 3)?))
            } else {
                None
            },
            out1: b.scope("out1", |b| ResidualUnit::wirw(b, c, w))?,
            out2: b.scope("out2", |b| ResidualUnit::wirw(b, c, w))?,
            fusion: b.scope("fusion", |b| {
                if opts.self_calibrated_fusion {
                    Fusion::self_calibrated(b, c, w)
                } else {
                    Fusion::concat(b, c)
                }
            })?,
            ledger: ChannelLedger { entries: Vec::new() },
        };
        let ledger = block.check_channels()?;
        Ok(Wdib { ledger, ..block })
    }

    /// Verify that the declared widths of all sub-units chain together.
    fn check_channels(&self) -> Result<ChannelLedger> {
        let c = self.channels;
        let mut entries = vec![("x_in", c)];
        let mut expect = |name: &'static str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::dim("wdib", format!("stage `{name}` has {got} channels, expected {want}")));
            }
            entries.push((name, got));
            Ok(())
        };
        for (stage, cross) in [(&self.stage1, &self.cross1), (&self.stage2, &self.cross2)] {
            expect("wirw", stage.in_c, c)?;
            expect("wirw", stage.out_c, c)?;
            expect("remain", stage.out_c / 2, c / 2)?;
            expect("distill", stage.out_c - stage.out_c / 2, c / 2)?;
            expect("wcrw_in", cross.in_c, stage.out_c / 2)?;
            expect("wcrw_out", cross.out_c, c)?;
        }
        for coeff in [&self.m1, &self.n1, &self.m2, &self.n2] {
            expect("coefficients", coeff.channels, c)?;
        }
        expect("u", self.m1.channels.max(self.cross1.out_c), c)?;
        expect("v", self.n1.channels.max(self.cross1.out_c), c)?;
        if let Some((g1, g2)) = &self.distill {
            for g in [g1, g2] {
                expect("s3_in", g.in_c(), c / 2)?;
                expect("s3_out", g.out_c(), c)?;
            }
        }
        for out in [&self.out1, &self.out2] {
            expect("x_out", out.in_c, c)?;
            expect("x_out", out.out_c, c)?;
        }
        expect("concat", self.fusion.in_c(), 2 * c)?;
        expect("scf", self.fusion.out_c(), c)?;
        Ok(ChannelLedger { entries })
    }

    pub fn ledger(&self) -> &ChannelLedger {
        &self.ledger
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.channels {
            return Err(Error::dim("wdib", format!("input has {c} channels, block expects {}", self.channels)));
        }
        // first butterfly
        let s1 = self.stage1.forward(tape, p, x)?;
        let (remain1, distill1) = tape.channel_split(s1)?;
        let t1 = self.cross1.forward(tape, p, remain1)?;
        let mx = self.m1.apply(tape, p, x)?;
        let u1 = tape.add(mx, t1)?;
        let nt = self.n1.apply(tape, p, t1)?;
        let v1 = tape.add(nt, x)?;
        // second butterfly
        let s2 = self.stage2.forward(tape, p, v1)?;
        let (remain2, distill2) = tape.channel_split(s2)?;
        let t2 = self.cross2.forward(tape, p, remain2)?;
        let mt = self.m2.apply(tape, p, t2)?;
        let u2 = tape.add(mt, u1)?;
        let nu = self.n2.apply(tape, p, u1)?;
        let v2 = tape.add(nu, t2)?;
        // distillation connections
        let (a, b) = match &self.distill {
            Some((g1, g2)) => {
                let g = g1.forward(tape, p, distill1)?;
                let a = tape.mul(u2, g)?;
                let g = g2.forward(tape, p, distill2)?;
                (a, tape.mul(v2, g)?)
            }
            None => (u2, v2),
        };
        let o1 = self.out1.forward(tape, p, a)?;
        let o2 = self.out2.forward(tape, p, b)?;
        let fused = self.fusion.forward(tape, p, o1, o2)?;
        tape.add(fused, x)
    }

    pub fn macs(&self, n: usize, hw: usize) -> u64 {
        let c = self.channels;
        let px = (n * hw) as u64;
        let mut total = [&self.stage1, &self.cross1, &self.stage2, &self.cross2, &self.out1, &self.out2]
            .iter()
            .map(|u| u.macs(n, hw))
            .sum::<u64>();
        total += [&self.m1, &self.n1, &self.m2, &self.n2].iter().map(|m| m.macs(n, hw)).sum::<u64>();
        if let Some((g1, g2)) = &self.distill {
            total += px * (g1.macs_per_pixel() + g2.macs_per_pixel() + 2 * c as u64);
        }
        total + self.fusion.macs(n, hw, c)
    }
}
