//! Tape-level forward passes of every subnetwork. The same code serves
//! training (trainable bound parameters) and inference (all-constant
//! parameters); callers choose by how they bind the [`crate::nn::ParamSet`].

use crate::autograd::{ops, Tape, Var};
use crate::nn::conv::conv2d;
use crate::nn::norm::instance_norm;
use crate::nn::spatial::{maxpool2, upsample_nearest2};
use crate::nn::BoundParams;

use super::ArchSpec;

/// ImageNet channel statistics applied inside the backbone so callers feed
/// plain `[0, 1]` images.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn conv_block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    conv2d(tape, x, w, b, stride, 1)
}

fn conv_in_relu(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Var {
    let y = conv_block(tape, p, prefix, x, stride);
    let gamma = p.var(&format!("{prefix}.gamma"));
    let beta = p.var(&format!("{prefix}.beta"));
    let y = instance_norm(tape, y, gamma, beta);
    ops::relu(tape, y)
}

/// Shared encoder topology for the expression and identity encoders:
/// five stride-2 stages of conv+norm+ReLU layers, global average pooling,
/// and a linear head to the code dimension.
pub fn encoder(arch: &ArchSpec, tape: &mut Tape, p: &BoundParams, net: &str, x: Var) -> Var {
    let mut h = x;
    for (stage, (&_channels, &convs)) in arch
        .enc_channels
        .iter()
        .zip(arch.enc_convs.iter())
        .enumerate()
    {
        for conv in 0..convs {
            let stride = if conv == 0 { 2 } else { 1 };
            h = conv_in_relu(tape, p, &format!("{net}.s{stage}.c{conv}"), h, stride);
        }
    }
    let pooled = ops::global_avg_pool(tape, h);
    ops::linear(
        tape,
        pooled,
        p.var(&format!("{net}.head.w")),
        p.var(&format!("{net}.head.b")),
    )
}

/// Flow decoder: linear seed at 4x4, four upsample+conv+ReLU blocks to
/// 64x64, and a zero-initialized projection to 2 displacement channels so a
/// fresh model starts at the identity warp.
pub fn flow_decoder(arch: &ArchSpec, tape: &mut Tape, p: &BoundParams, code: Var) -> Var {
    let n = tape.value(code).shape()[0];
    let seeded = ops::linear(tape, code, p.var("d_flow.seed.w"), p.var("d_flow.seed.b"));
    let seeded = ops::relu(tape, seeded);
    let mut h = ops::reshape(tape, seeded, &[n, arch.flow_seed_ch, 4, 4]);
    for (i, _) in arch.flow_channels.iter().enumerate() {
        h = upsample_nearest2(tape, h);
        h = conv_block(tape, p, &format!("d_flow.b{i}"), h, 1);
        h = ops::relu(tape, h);
    }
    conv_block(tape, p, "d_flow.out", h, 1)
}

/// Backbone feature taps.
pub struct BackboneFeats {
    /// After the first conv of the second block, at half resolution.
    pub fine: Var,
    /// After the first conv of the third block, at quarter resolution.
    pub coarse: Var,
    /// After the first conv of the fourth block, at eighth resolution;
    /// computed only when requested (loss paths).
    pub deep: Option<Var>,
}

/// How deep to run the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneDepth {
    /// Through the coarse tap: enough to decode faces.
    Decode,
    /// Through the deep tap: needed by the perceptual loss.
    Loss,
}

/// VGG-style frozen feature extractor. `conv{1,2}` at full/half resolution,
/// `conv3_*` at quarter, `conv4_1` at eighth; 3x3 kernels, ReLU after every
/// conv, 2x2 max pooling between blocks. Input normalization happens here.
pub fn backbone(
    arch: &ArchSpec,
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    depth: BackboneDepth,
) -> BackboneFeats {
    let _ = arch;
    let x = ops::add_channel_const(tape, x, &INPUT_MEAN.map(|m| -m));
    let x = ops::scale_channels(tape, x, INPUT_STD.map(|s| 1.0 / s).to_vec());

    let conv_relu = |tape: &mut Tape, name: &str, x: Var| {
        let y = conv2d(tape, x, p.var(&format!("backbone.{name}.w")), p.var(&format!("backbone.{name}.b")), 1, 1);
        ops::relu(tape, y)
    };

    let h = conv_relu(tape, "conv1_1", x);
    let h = conv_relu(tape, "conv1_2", h);
    let h = maxpool2(tape, h);
    let fine = conv_relu(tape, "conv2_1", h);
    let h = conv_relu(tape, "conv2_2", fine);
    let h = maxpool2(tape, h);
    let coarse = conv_relu(tape, "conv3_1", h);
    let deep = match depth {
        BackboneDepth::Decode => None,
        BackboneDepth::Loss => {
            let h = conv_relu(tape, "conv3_2", coarse);
            let h = conv_relu(tape, "conv3_3", h);
            let h = conv_relu(tape, "conv3_4", h);
            let h = maxpool2(tape, h);
            Some(conv_relu(tape, "conv4_1", h))
        }
    };
    BackboneFeats { fine, coarse, deep }
}

/// Face decoder trunk shared by the de-expression and de-/re-identity
/// decoders: consume the coarse level, upsample, merge the fine level,
/// upsample to full resolution, project to RGB and bound with a sigmoid.
///
/// When `project_fine` is set (identity decoder) the fine level passes
/// through a 1x1 conv before concatenation.
pub fn face_decoder(
    tape: &mut Tape,
    p: &BoundParams,
    net: &str,
    fine: Var,
    coarse: Var,
    project_fine: bool,
) -> Var {
    let h = conv_block(tape, p, &format!("{net}.conv_in"), coarse, 1);
    let h = ops::relu(tape, h);
    let h = upsample_nearest2(tape, h);
    let h = conv_block(tape, p, &format!("{net}.conv_a"), h, 1);
    let h = ops::relu(tape, h);
    let fine = if project_fine {
        let w = p.var(&format!("{net}.fine_proj.w"));
        let b = p.var(&format!("{net}.fine_proj.b"));
        let f = crate::nn::conv::conv2d(tape, fine, w, b, 1, 0);
        ops::relu(tape, f)
    } else {
        fine
    };
    let h = ops::concat_channels(tape, h, fine);
    let h = conv_block(tape, p, &format!("{net}.conv_b"), h, 1);
    let h = ops::relu(tape, h);
    let h = upsample_nearest2(tape, h);
    let h = conv_block(tape, p, &format!("{net}.conv_c"), h, 1);
    let h = ops::relu(tape, h);
    let h = conv_block(tape, p, &format!("{net}.out"), h, 1);
    ops::sigmoid(tape, h)
}

/// Modulation MLP: two hidden ReLU layers, then a linear map to
/// concatenated `[mean | raw std]`; std is softplus(raw) + eps so it stays
/// strictly positive.
pub fn modulation_mlp(
    tape: &mut Tape,
    p: &BoundParams,
    net: &str,
    code: Var,
) -> (Var, Var) {
    let h = ops::linear(tape, code, p.var(&format!("{net}.l0.w")), p.var(&format!("{net}.l0.b")));
    let h = ops::relu(tape, h);
    let h = ops::linear(tape, h, p.var(&format!("{net}.l1.w")), p.var(&format!("{net}.l1.b")));
    let h = ops::relu(tape, h);
    let out = ops::linear(tape, h, p.var(&format!("{net}.l2.w")), p.var(&format!("{net}.l2.b")));
    let (mean, raw_std) = ops::split_half(tape, out);
    let std = ops::softplus(tape, raw_std);
    let std = ops::add_scalar(tape, std, crate::nn::norm::NORM_EPS);
    (mean, std)
}
