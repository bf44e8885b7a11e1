//! Tape gradients against central finite differences in 64-bit mode.

mod common;

use common::suite::{self, BLOCK_TOL, OP_TOL, PROBES};
use common::{assert_fd, fd_check, random};
use fdiwn_core::{ModelParams, Shape};

macro_rules! checks {
    ($tol:expr; $($name:ident),+ $(,)?) => {
        $(
            #[test]
            fn $name() {
                let report = suite::$name();
                assert!(report.probes >= PROBES);
                assert_fd(&report, $tol, stringify!($name));
            }
        )+
    };
}

checks!(OP_TOL;
    add_same, add_per_channel, sub_per_sample_channel, mul_same, mul_scalar, mul_per_channel,
    mul_per_sample_channel, scalar_weight, scale, sum, mean, reshape, relu, sigmoid, l1_loss,
    channel_mean, channel_std, global_pool_stats, group_norm, slice_channels, channel_split,
    concat_channels, channel_shuffle, pixel_shuffle, conv3x3_bias, conv1x1_grouped,
    conv3x3_grouped_no_bias, conv3x3_strided, shuffle_attention,
);

checks!(BLOCK_TOL;
    wirw, wcrw, plain_unit, resblock_unit, coefficients, coefficient_gate, sigmoid_gate,
    self_calibrated_fusion, concat_fusion, wdib_full, wdib_no_distillation, wdib_no_scf,
    fswg_two_blocks, fswg_three_blocks, fswg_plain_cascade, fdiwn_one_group, fdiwn_two_groups,
);

#[test]
fn suite_lists_every_check() {
    assert_eq!(suite::OPS.len(), 28);
    assert_eq!(suite::BLOCKS.len(), 18);
}

#[test]
fn checker_detects_a_wrong_gradient() {
    let x = random(Shape::new(1, 2, 3, 3), 20).map(|v| v + 2.0);
    let report = fd_check(&ModelParams::new(), &[x], PROBES, 21, |t, _, x| {
        let frozen = t.constant(t.value(x[0]).clone());
        t.mul(x[0], frozen)
    });
    assert!((report.max_rel - 0.5).abs() < 1e-6, "{report:?}");
}
