use super::{Architecture, ModelConfig, Plan, PlanNode};
use crate::error::Result;
use crate::layers::{Conv3dSpec, LayerSpec};

/// Published trainable-parameter totals the reference configs are audited against.
pub fn reference_target(architecture: Architecture) -> usize {
    match architecture {
        Architecture::Convnet3d => 168_705,
        Architecture::Resnet3d => 4_527_906,
        Architecture::Convnext3d => 31_321_561,
    }
}

fn layer(name: impl Into<String>, spec: LayerSpec) -> PlanNode {
    PlanNode::Layer { name: name.into(), spec }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv3d(Conv3dSpec::cubic(cin, cout, k, stride, k / 2))
}

/// conv -> batchnorm -> relu
fn conv_bn_relu(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Vec<PlanNode> {
    vec![
        layer(format!("{prefix}.conv"), conv(cin, cout, k, stride)),
        layer(format!("{prefix}.bn"), LayerSpec::Batchnorm3d { channels: cout }),
        layer(format!("{prefix}.relu"), LayerSpec::Relu),
    ]
}

/// Global pooling, optional hidden layers, dropout, output unit, sigmoid.
fn head(config: &ModelConfig, features: usize, norm: bool) -> Vec<PlanNode> {
    let mut nodes = vec![layer("pool", LayerSpec::global_pool(config.pool_kind()))];
    if norm {
        nodes.push(layer("head.ln", LayerSpec::LayernormCh { channels: features }));
    }
    let mut width = features;
    for (i, &h) in config.head_hidden.iter().enumerate() {
        nodes.push(layer(format!("head.fc{i}"), LayerSpec::Linear { in_features: width, out_features: h }));
        nodes.push(layer(format!("head.relu{i}"), LayerSpec::Relu));
        width = h;
    }
    nodes.push(layer("head.dropout", LayerSpec::Dropout { rate: config.dropout }));
    nodes.push(layer("head.out", LayerSpec::Linear { in_features: width, out_features: 1 }));
    nodes.push(layer("head.sigmoid", LayerSpec::Sigmoid));
    nodes
}

/// Two stride-2 conv blocks followed by the classification head.
fn convnet3d(config: &ModelConfig) -> Vec<PlanNode> {
    let k = config.kernel_size;
    let (w1, w2) = (config.widths[0], config.widths[1]);
    let mut nodes = conv_bn_relu("block1", config.input_channels, w1, k, 2);
    nodes.extend(conv_bn_relu("block2", w1, w2, k, 2));
    nodes.extend(head(config, w2, false));
    nodes
}

/// Bottleneck residual block: 1x1 reduce, kxk (strided), 1x1 expand; the skip
/// path gains a strided 1x1 projection whenever width or resolution changes.
fn bottleneck(prefix: &str, cin: usize, cout: usize, compression: usize, k: usize, stride: usize) -> PlanNode {
    let mid = cout / compression;
    let mut branch = conv_bn_relu(&format!("{prefix}.reduce"), cin, mid, 1, 1);
    branch.extend(conv_bn_relu(&format!("{prefix}.spatial"), mid, mid, k, stride));
    branch.push(layer(format!("{prefix}.expand.conv"), conv(mid, cout, 1, 1)));
    branch.push(layer(format!("{prefix}.expand.bn"), LayerSpec::Batchnorm3d { channels: cout }));
    let shortcut = if cin != cout || stride != 1 {
        vec![
            layer(format!("{prefix}.proj.conv"), conv(cin, cout, 1, stride)),
            layer(format!("{prefix}.proj.bn"), LayerSpec::Batchnorm3d { channels: cout }),
        ]
    } else {
        Vec::new()
    };
    PlanNode::Residual {
        name: prefix.to_string(),
        branch,
        shortcut,
        post: Some((format!("{prefix}.relu"), LayerSpec::Relu)),
    }
}

/// Stem conv block, six bottlenecks over four stages, head conv block.
/// The stem and head conv blocks plus the six bottlenecks make eight
/// convolutional blocks.
fn resnet3d(config: &ModelConfig) -> Vec<PlanNode> {
    let k = config.kernel_size;
    let stem = config.stem_width.unwrap_or(config.widths[0]);
    let mut nodes = conv_bn_relu("stem", config.input_channels, stem, k, 2);
    let mut cin = stem;
    for (s, (&w, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            nodes.push(bottleneck(&format!("stage{}.b{b}", s + 1), cin, w, config.ratio, k, stride));
            cin = w;
        }
    }
    nodes.extend(conv_bn_relu("headconv", cin, cin, k, 1));
    nodes.extend(head(config, cin, false));
    nodes
}

/// Inverted bottleneck: depthwise conv, channel layer norm, 1x1 expansion,
/// GELU, 1x1 projection; identity skip.
fn inverted_bottleneck(prefix: &str, width: usize, ratio: usize, dw_kernel: usize) -> PlanNode {
    let branch = vec![
        layer(
            format!("{prefix}.dwconv"),
            LayerSpec::Conv3d(Conv3dSpec::cubic(width, width, dw_kernel, 1, dw_kernel / 2).with_groups(width)),
        ),
        layer(format!("{prefix}.ln"), LayerSpec::LayernormCh { channels: width }),
        layer(format!("{prefix}.expand"), conv(width, width * ratio, 1, 1)),
        layer(format!("{prefix}.gelu"), LayerSpec::Gelu),
        layer(format!("{prefix}.project"), conv(width * ratio, width, 1, 1)),
    ];
    PlanNode::Residual { name: prefix.to_string(), branch, shortcut: Vec::new(), post: None }
}

/// Three downsampling conv blocks (conv + channel layer norm), each
/// followed by its inverted bottlenecks, then a normalized head.
fn convnext3d(config: &ModelConfig) -> Vec<PlanNode> {
    let k = config.kernel_size;
    let mut nodes = Vec::new();
    let mut cin = config.input_channels;
    for (s, (&w, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
        let stage = format!("stage{}", s + 1);
        nodes.push(layer(format!("{stage}.down.conv"), conv(cin, w, k, 2)));
        nodes.push(layer(format!("{stage}.down.ln"), LayerSpec::LayernormCh { channels: w }));
        for b in 0..count {
            nodes.push(inverted_bottleneck(&format!("{stage}.b{b}"), w, config.ratio, config.depthwise_kernel));
        }
        cin = w;
    }
    nodes.extend(head(config, cin, true));
    nodes
}

/// Validates the config and lays out its layers.
pub fn build_plan(config: &ModelConfig) -> Result<Plan> {
    config.validate()?;
    let nodes = match config.architecture {
        Architecture::Convnet3d => convnet3d(config),
        Architecture::Resnet3d => resnet3d(config),
        Architecture::Convnext3d => convnext3d(config),
    };
    Ok(Plan { config: config.clone(), nodes })
}
