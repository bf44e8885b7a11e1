//! Finite-difference checks for every op and block, as named reports.

use super::{build, fd_check, jitter, random, FdReport};
use fdiwn_core::attention::ShuffleAttention;
use fdiwn_core::blocks::{CoeffLearner, Fusion, ResidualUnit, SigmoidGate, UnitKind, UnitWidths, Wdib, WdibOptions};
use fdiwn_core::network::{Ablation, Fdiwn, FdiwnConfig, Fswg};
use fdiwn_core::ops::ConvParams;
use fdiwn_core::{Bound, ModelParams, ParamBuilder, Result, Shape, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-3;
pub const BLOCK_TOL: f64 = 1e-2;
pub const PROBES: usize = 24;

pub type Check = (&'static str, fn() -> FdReport);

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn op(shapes: &[Shape], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> FdReport {
    let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, &sh)| random(sh, 100 + i as u64)).collect();
    fd_check(&ModelParams::new(), &inputs, PROBES, 7, |t, _, x| f(t, x))
}

macro_rules! ops {
    ($($name:ident: [$($shape:expr),+] => |$t:ident, $x:ident| $body:expr;)+) => {
        $(pub fn $name() -> FdReport { op(&[$($shape),+], |$t, $x| $body) })+
        pub const OPS: &[Check] = &[$((stringify!($name), $name)),+];
    };
}

ops! {
    add_same: [s(2, 3, 4, 4), s(2, 3, 4, 4)] => |t, x| t.add(x[0], x[1]);
    add_per_channel: [s(2, 3, 4, 4), s(1, 3, 1, 1)] => |t, x| t.add(x[0], x[1]);
    sub_per_sample_channel: [s(2, 3, 4, 4), s(2, 3, 1, 1)] => |t, x| t.sub(x[0], x[1]);
    mul_same: [s(2, 3, 4, 4), s(2, 3, 4, 4)] => |t, x| t.mul(x[0], x[1]);
    mul_scalar: [s(2, 3, 4, 4), s(1, 1, 1, 1)] => |t, x| t.mul(x[0], x[1]);
    mul_per_channel: [s(2, 3, 4, 4), s(1, 3, 1, 1)] => |t, x| t.mul(x[0], x[1]);
    mul_per_sample_channel: [s(2, 3, 4, 4), s(2, 3, 1, 1)] => |t, x| t.mul(x[0], x[1]);
    scalar_weight: [s(1, 4, 3, 3), s(1, 1, 1, 1)] => |t, x| t.scalar_weight(x[0], x[1]);
    scale: [s(1, 2, 3, 5)] => |t, x| t.scale(x[0], 0.7);
    sum: [s(2, 2, 3, 3)] => |t, x| t.sum(x[0]);
    mean: [s(2, 2, 3, 3)] => |t, x| t.mean(x[0]);
    reshape: [s(2, 4, 3, 3)] => |t, x| t.reshape(x[0], Shape::new(2, 1, 12, 3));
    relu: [s(2, 3, 4, 4)] => |t, x| t.relu(x[0]);
    sigmoid: [s(2, 3, 4, 4)] => |t, x| t.sigmoid(x[0]);
    l1_loss: [s(2, 3, 4, 4), s(2, 3, 4, 4)] => |t, x| t.l1_loss(x[0], x[1]);
    channel_mean: [s(2, 3, 4, 5)] => |t, x| t.channel_mean(x[0]);
    channel_std: [s(2, 3, 4, 5)] => |t, x| t.channel_std(x[0]);
    global_pool_stats: [s(1, 4, 3, 3)] => |t, x| {
        let (m, sd) = t.global_pool_stats(x[0])?;
        t.concat_channels(&[m, sd])
    };
    group_norm: [s(2, 6, 3, 4), s(1, 6, 1, 1), s(1, 6, 1, 1)] => |t, x| t.group_norm(x[0], 3, x[1], x[2], 1e-5);
    slice_channels: [s(2, 6, 3, 3)] => |t, x| t.slice_channels(x[0], 1, 3);
    channel_split: [s(2, 6, 3, 3)] => |t, x| {
        let (remain, distill) = t.channel_split(x[0])?;
        let d = t.scale(distill, 2.0)?;
        t.concat_channels(&[d, remain])
    };
    concat_channels: [s(1, 2, 3, 3), s(1, 3, 3, 3), s(1, 1, 3, 3)] => |t, x| t.concat_channels(x);
    channel_shuffle: [s(2, 12, 3, 3)] => |t, x| t.channel_shuffle(x[0], 3);
    pixel_shuffle: [s(2, 12, 3, 3)] => |t, x| t.pixel_shuffle(x[0], 2);
    conv3x3_bias: [s(2, 4, 6, 6), s(5, 4, 3, 3), s(1, 5, 1, 1)] => |t, x| {
        t.conv2d(x[0], ConvParams::same(x[1], Some(x[2]), 3))
    };
    conv1x1_grouped: [s(2, 8, 5, 5), s(8, 2, 1, 1), s(1, 8, 1, 1)] => |t, x| {
        t.conv2d(x[0], ConvParams::same(x[1], Some(x[2]), 1).with_groups(4))
    };
    conv3x3_grouped_no_bias: [s(1, 6, 5, 5), s(4, 3, 3, 3)] => |t, x| {
        t.conv2d(x[0], ConvParams::same(x[1], None, 3).with_groups(2))
    };
    conv3x3_strided: [s(1, 3, 7, 7), s(2, 3, 3, 3)] => |t, x| {
        t.conv2d(x[0], ConvParams { stride: 2, padding: 1, ..ConvParams::new(x[1], None) })
    };
}

/// Check a module built by `make`, with every path switched on, on an input
/// of shape `shape`.
fn block<M>(
    shape: Shape,
    make: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<M>,
    run: impl Fn(&M, &mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
) -> FdReport {
    let (module, mut params) = build(3, make);
    jitter(&mut params, 4);
    let params = params.cast::<f64>();
    fd_check(&params, &[random(shape, 5)], PROBES, 11, |t, p, x| run(&module, t, p, x))
}

fn widths(kind: UnitKind) -> UnitWidths {
    UnitWidths { wide: 16, sa_groups: 2, kind }
}

fn wdib_options(distillation: bool, scf: bool) -> WdibOptions {
    WdibOptions {
        channels: 8,
        widths: UnitWidths { wide: 16, sa_groups: 4, kind: UnitKind::Wide },
        coeff_hidden: 4,
        distillation,
        self_calibrated_fusion: scf,
    }
}

fn tiny_config(n_groups: usize, n_blocks: usize, ablation: u32) -> FdiwnConfig {
    FdiwnConfig {
        scale: 2,
        channels: 8,
        wide: 16,
        n_groups,
        n_blocks,
        sa_groups: 4,
        cgs_groups: 4,
        ablation: Ablation::from_bits(ablation).unwrap(),
    }
}

fn fusion_input(t: &mut Tape<f64>, x: Var) -> Result<(Var, Var)> {
    let (a, b) = t.channel_split(x)?;
    Ok((t.concat_channels(&[a, a])?, t.concat_channels(&[b, b])?))
}

pub fn shuffle_attention() -> FdReport {
    block(s(1, 8, 4, 4), |b| ShuffleAttention::new(b, 8, 2), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn wirw() -> FdReport {
    block(s(1, 8, 4, 4), |b| ResidualUnit::wirw(b, 8, widths(UnitKind::Wide)), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn wcrw() -> FdReport {
    block(s(1, 4, 4, 4), |b| ResidualUnit::wcrw(b, 4, 8, widths(UnitKind::Wide)), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn plain_unit() -> FdReport {
    block(s(1, 4, 4, 4), |b| ResidualUnit::wcrw(b, 4, 8, widths(UnitKind::Plain)), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn resblock_unit() -> FdReport {
    block(s(1, 4, 4, 4), |b| ResidualUnit::wcrw(b, 4, 8, widths(UnitKind::ResBlock)), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn coefficients() -> FdReport {
    block(s(2, 8, 4, 4), |b| CoeffLearner::new(b, 8, 4), |m, t, p, x| m.coefficients(t, p, x[0]))
}

pub fn coefficient_gate() -> FdReport {
    block(s(2, 8, 4, 4), |b| CoeffLearner::new(b, 8, 4), |m, t, p, x| m.apply(t, p, x[0]))
}

pub fn sigmoid_gate() -> FdReport {
    block(s(1, 4, 4, 4), |b| SigmoidGate::new(b, "gate", 4, 8, 3), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn self_calibrated_fusion() -> FdReport {
    block(s(1, 8, 4, 4), |b| Fusion::self_calibrated(b, 8, widths(UnitKind::Wide)), |m, t, p, x| {
        let (a, b) = fusion_input(t, x[0])?;
        m.forward(t, p, a, b)
    })
}

pub fn concat_fusion() -> FdReport {
    block(s(1, 8, 4, 4), |b| Fusion::concat(b, 8), |m, t, p, x| {
        let (a, b) = fusion_input(t, x[0])?;
        m.forward(t, p, a, b)
    })
}

fn wdib(distillation: bool, scf: bool) -> FdReport {
    block(s(1, 8, 4, 4), |b| Wdib::new(b, wdib_options(distillation, scf)), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn wdib_full() -> FdReport {
    wdib(true, true)
}

pub fn wdib_no_distillation() -> FdReport {
    wdib(false, true)
}

pub fn wdib_no_scf() -> FdReport {
    wdib(true, false)
}

fn fswg(n_blocks: usize, ablation: u32) -> FdReport {
    let cfg = tiny_config(1, n_blocks, ablation);
    block(s(1, 8, 4, 4), |b| Fswg::new(b, &cfg), |m, t, p, x| m.forward(t, p, x[0]))
}

pub fn fswg_two_blocks() -> FdReport {
    fswg(2, 0)
}

pub fn fswg_three_blocks() -> FdReport {
    fswg(3, 0)
}

pub fn fswg_plain_cascade() -> FdReport {
    fswg(3, Ablation::NO_INTERACTION | Ablation::NO_WIRW_SKIP)
}

fn network(groups: usize, blocks: usize) -> FdReport {
    let (model, mut params) = Fdiwn::new(tiny_config(groups, blocks, 0), 9).unwrap();
    jitter(&mut params, 10);
    let params = params.cast::<f64>();
    let lr = random(s(1, 3, 8, 8), 12).map(|v| 0.5 + 0.5 * v);
    let hr = random(s(1, 3, 16, 16), 13).map(|v| 0.5 + 0.5 * v);
    fd_check(&params, &[lr], PROBES, 14, |t, p, x| {
        let sr = model.forward(t, p, x[0])?;
        let target = t.constant(hr.clone());
        t.l1_loss(sr, target)
    })
}

pub fn fdiwn_one_group() -> FdReport {
    network(1, 1)
}

pub fn fdiwn_two_groups() -> FdReport {
    network(2, 2)
}

pub const BLOCKS: &[Check] = &[
    ("shuffle_attention", shuffle_attention),
    ("wirw", wirw),
    ("wcrw", wcrw),
    ("plain_unit", plain_unit),
    ("resblock_unit", resblock_unit),
    ("coefficients", coefficients),
    ("coefficient_gate", coefficient_gate),
    ("sigmoid_gate", sigmoid_gate),
    ("self_calibrated_fusion", self_calibrated_fusion),
    ("concat_fusion", concat_fusion),
    ("wdib_full", wdib_full),
    ("wdib_no_distillation", wdib_no_distillation),
    ("wdib_no_scf", wdib_no_scf),
    ("fswg_two_blocks", fswg_two_blocks),
    ("fswg_three_blocks", fswg_three_blocks),
    ("fswg_plain_cascade", fswg_plain_cascade),
    ("fdiwn_one_group", fdiwn_one_group),
    ("fdiwn_two_groups", fdiwn_two_groups),
];
