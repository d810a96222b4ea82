//! Layer plans for the registered backbones.
//!
//! Deeper trunks mirror the torchvision module layout so pretrained
//! checkpoints map onto them by parameter name.

use super::plan::{Activation, ConvPlan, LayerPlan, Plan};

pub const CNN27_LEAKY_SLOPE: f32 = 0.01;

/// Convolution widths of the baseline, grouped by resolution stage.
/// Thirteen conv/norm pairs plus the final projection give 27 counted layers.
pub const CNN27_STAGES: [&[usize]; 4] = [&[6], &[8, 8, 8, 8, 8, 8], &[16, 16, 16, 16, 16], &[24]];

/// Counted layers of CNN27: convolutions, normalizations and the final projection.
pub fn cnn27_layer_count() -> usize {
    let convs: usize = CNN27_STAGES.iter().map(|s| s.len()).sum();
    2 * convs + 1
}

/// Trunk of the baseline: every conv block is conv3×3 → batch norm → leaky relu;
/// stages are separated by 2×2 max pooling (stride 8 overall).
pub fn cnn27_trunk() -> Plan {
    let mut plan = Plan::default();
    let mut in_ch = 3;
    let mut block = 0;
    for (stage, widths) in CNN27_STAGES.iter().enumerate() {
        if stage > 0 {
            plan.push(format!("pool{stage}"), LayerPlan::MaxPool { kernel: 2, stride: 2, pad: 0 });
        }
        for &w in widths.iter() {
            block += 1;
            let mut conv = ConvPlan::square(in_ch, w, 3, 1, 1, false);
            conv.gain = (2.0 / (1.0 + CNN27_LEAKY_SLOPE * CNN27_LEAKY_SLOPE)).sqrt();
            plan.push(
                format!("block{block}"),
                LayerPlan::ConvBnAct {
                    conv,
                    eps: 1e-5,
                    act: Activation::Leaky(CNN27_LEAKY_SLOPE),
                },
            );
            in_ch = w;
        }
    }
    plan
}

/// torchvision `vgg16().features`.
pub fn vgg16_trunk() -> Plan {
    const CFG: [Option<usize>; 18] = [
        Some(64),
        Some(64),
        None,
        Some(128),
        Some(128),
        None,
        Some(256),
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        Some(512),
        None,
    ];
    let mut plan = Plan::default();
    let mut idx = 0;
    let mut in_ch = 3;
    for item in CFG {
        match item {
            Some(w) => {
                plan.push(format!("features.{idx}"), LayerPlan::Conv(ConvPlan::square(in_ch, w, 3, 1, 1, true)));
                plan.push(format!("features.{}", idx + 1), LayerPlan::Act(Activation::Relu));
                idx += 2;
                in_ch = w;
            }
            None => {
                plan.push(format!("features.{idx}"), LayerPlan::MaxPool { kernel: 2, stride: 2, pad: 0 });
                idx += 1;
            }
        }
    }
    plan
}

fn resnet_stem(plan: &mut Plan) {
    plan.push("conv1", LayerPlan::Conv(ConvPlan::square(3, 64, 7, 2, 3, false)));
    plan.push("bn1", LayerPlan::BatchNorm { channels: 64, eps: 1e-5 });
    plan.push("relu", LayerPlan::Act(Activation::Relu));
    plan.push("maxpool", LayerPlan::MaxPool { kernel: 3, stride: 2, pad: 1 });
}

/// torchvision `resnet101()` up to `layer4` (bottleneck blocks, stride on the 3×3).
pub fn resnet101_trunk() -> Plan {
    let mut plan = Plan::default();
    resnet_stem(&mut plan);
    let mut in_ch = 64;
    for (li, (blocks, width, stride)) in [(3, 64, 1), (4, 128, 2), (23, 256, 2), (3, 512, 2)].into_iter().enumerate() {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            plan.push(format!("layer{}.{b}", li + 1), LayerPlan::Bottleneck { in_ch, width, stride: s });
            in_ch = width * 4;
        }
    }
    plan
}

/// torchvision `resnet18()` up to `layer4`.
pub fn resnet18_trunk() -> Plan {
    let mut plan = Plan::default();
    resnet_stem(&mut plan);
    let mut in_ch = 64;
    for (li, (out_ch, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        for b in 0..2 {
            let s = if b == 0 { stride } else { 1 };
            plan.push(format!("layer{}.{b}", li + 1), LayerPlan::Basic { in_ch, out_ch, stride: s });
            in_ch = out_ch;
        }
    }
    plan
}

/// torchvision `inception_v3()` stem, through `maxpool2`. The mixed blocks
/// sit below 28×28 for a 224² input and are never reached by truncation.
pub fn inception_v3_trunk() -> Plan {
    let basic = |in_ch, out_ch, k, stride, pad| LayerPlan::ConvBnAct {
        conv: ConvPlan::square(in_ch, out_ch, k, stride, pad, false),
        eps: 1e-3,
        act: Activation::Relu,
    };
    let mut plan = Plan::default();
    plan.push("Conv2d_1a_3x3", basic(3, 32, 3, 2, 0));
    plan.push("Conv2d_2a_3x3", basic(32, 32, 3, 1, 0));
    plan.push("Conv2d_2b_3x3", basic(32, 64, 3, 1, 1));
    plan.push("maxpool1", LayerPlan::MaxPool { kernel: 3, stride: 2, pad: 0 });
    plan.push("Conv2d_3b_1x1", basic(64, 80, 1, 1, 0));
    plan.push("Conv2d_4a_3x3", basic(80, 192, 3, 1, 0));
    plan.push("maxpool2", LayerPlan::MaxPool { kernel: 3, stride: 2, pad: 0 });
    plan
}

/// Last plan entry whose output rows and cols are both at least the target.
pub fn truncation_rule(plan: &Plan, input_side: usize, rows: usize, cols: usize) -> Option<String> {
    plan.trace(3, input_side, input_side)
        .into_iter()
        .filter(|(_, (_, h, w))| *h >= rows && *w >= cols)
        .last()
        .map(|(n, _)| n)
}

/// Strided convolution `(kernel, stride, pad)` mapping `from` pixels onto exactly `to`.
/// Prefers small padding, then small kernels.
pub fn conform_conv(from: usize, to: usize) -> Option<(usize, usize, usize)> {
    if from <= to {
        return None;
    }
    let stride = ((from as f64 / to as f64).round() as usize).max(1);
    let mut best = None;
    for pad in 0..=2 * stride + 2 {
        for k in stride.max(pad + 1)..=2 * stride + 3 {
            if from + 2 * pad < k {
                continue;
            }
            if (from + 2 * pad - k) / stride + 1 == to {
                best = Some((k, stride, pad));
                break;
            }
        }
        if best.is_some() {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn27_counts_27_layers_and_reaches_28() {
        assert_eq!(cnn27_layer_count(), 27);
        assert_eq!(cnn27_trunk().output_dims(3, 224, 224), Some((24, 28, 28)));
    }

    #[test]
    fn truncation_points_for_224_input() {
        assert_eq!(truncation_rule(&vgg16_trunk(), 224, 28, 28).as_deref(), Some("features.22"));
        assert_eq!(truncation_rule(&resnet101_trunk(), 224, 28, 28).as_deref(), Some("layer2.3"));
        assert_eq!(truncation_rule(&inception_v3_trunk(), 224, 28, 28).as_deref(), Some("Conv2d_4a_3x3"));
    }

    #[test]
    fn inception_stem_resolution() {
        let trace = inception_v3_trunk().trace(3, 224, 224);
        let dims: Vec<usize> = trace.iter().map(|(_, d)| d.1).collect();
        assert_eq!(dims, vec![111, 109, 109, 54, 54, 52, 25]);
    }

    #[test]
    fn conform_conv_hits_target() {
        for (from, to) in [(52, 28), (56, 28), (29, 28), (110, 28), (13, 4)] {
            let (k, s, p) = conform_conv(from, to).unwrap();
            assert_eq!((from + 2 * p - k) / s + 1, to, "{from}->{to}");
            assert!(p < k);
        }
        assert_eq!(conform_conv(28, 28), None);
    }
}
