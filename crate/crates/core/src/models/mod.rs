//! The three volumetric classifiers and their parameter accounting.
//!
//! A builder first emits a [`Plan`]: the layer specs and residual topology
//! with stable hierarchical names. Plans are cheap, so parameter counting and
//! width search never allocate weights; [`Model::from_plan`] instantiates one.

mod model;
mod search;
mod templates;

pub use model::{Model, Node, Residual};
pub use search::{search_widths, Candidate, SearchReport, SearchSpace};
pub use templates::{build_plan, reference_target};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{count_layer_params, LayerSpec, PoolKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Convnet3d,
    Resnet3d,
    Convnext3d,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Convnet3d, Architecture::Resnet3d, Architecture::Convnext3d];

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Convnet3d => "ConvNet3D",
            Architecture::Resnet3d => "ResNet3D",
            Architecture::Convnext3d => "ConvNeXt3D",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convnet3d" | "convnet" => Ok(Architecture::Convnet3d),
            "resnet3d" | "resnet" => Ok(Architecture::Resnet3d),
            "convnext3d" | "convnext" => Ok(Architecture::Convnext3d),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Architecture::Convnet3d => "convnet3d",
            Architecture::Resnet3d => "resnet3d",
            Architecture::Convnext3d => "convnext3d",
        };
        f.write_str(s)
    }
}

fn default_input_channels() -> usize {
    3
}
fn default_kernel() -> usize {
    3
}
fn default_ratio() -> usize {
    4
}
fn default_dw_kernel() -> usize {
    7
}

/// Architecture hyperparameters; serialized as the model config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Stage widths: 2 for ConvNet3D, 4 for ResNet3D, 3 for ConvNeXt3D.
    pub widths: Vec<usize>,
    /// Residual blocks per stage (ResNet3D: 4 entries summing to 6,
    /// ConvNeXt3D: 3 entries summing to 3). Empty for ConvNet3D.
    #[serde(default)]
    pub blocks: Vec<usize>,
    pub dropout: f64,
    /// Hidden fully connected sizes between pooling and the output unit.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    /// ResNet3D stem conv width.
    #[serde(default)]
    pub stem_width: Option<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// ResNet3D bottleneck compression / ConvNeXt3D expansion ratio.
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    /// ConvNeXt3D depthwise kernel.
    #[serde(default = "default_dw_kernel")]
    pub depthwise_kernel: usize,
    #[serde(default)]
    pub pool: Option<PoolKind>,
}

impl ModelConfig {
    /// Default configuration for each architecture. Widths are conventional
    /// choices; [`search_widths`] reports how they relate to the published
    /// parameter totals.
    pub fn reference(architecture: Architecture) -> Self {
        let base = ModelConfig {
            architecture,
            input_channels: 3,
            widths: Vec::new(),
            blocks: Vec::new(),
            dropout: 0.7,
            head_hidden: Vec::new(),
            stem_width: None,
            kernel_size: 3,
            ratio: 4,
            depthwise_kernel: 7,
            pool: None,
        };
        match architecture {
            Architecture::Convnet3d => ModelConfig { widths: vec![32, 64], head_hidden: vec![128], ..base },
            Architecture::Resnet3d => ModelConfig {
                widths: vec![32, 64, 128, 256],
                blocks: vec![1, 2, 2, 1],
                stem_width: Some(32),
                ..base
            },
            Architecture::Convnext3d => {
                ModelConfig { widths: vec![96, 192, 384], blocks: vec![1, 1, 1], ..base }
            }
        }
    }

    pub fn pool_kind(&self) -> PoolKind {
        self.pool.unwrap_or(PoolKind::Avg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.architecture)));
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.widths.contains(&0) || self.head_hidden.contains(&0) {
            return fail("widths and head_hidden entries must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        match self.architecture {
            Architecture::Convnet3d => {
                if self.widths.len() != 2 {
                    return fail(format!("widths needs 2 entries (two conv blocks), got {}", self.widths.len()));
                }
                if !self.blocks.is_empty() {
                    return fail("blocks must be empty: the template has no residual blocks".into());
                }
            }
            Architecture::Resnet3d => {
                if self.widths.len() != 4 || self.blocks.len() != 4 {
                    return fail("widths and blocks need 4 entries (stages)".into());
                }
                if self.blocks.iter().sum::<usize>() != 6 {
                    return fail(format!("blocks must sum to 6 bottleneck blocks, got {:?}", self.blocks));
                }
                if self.blocks.contains(&0) {
                    return fail("every stage needs at least one bottleneck block".into());
                }
                if self.ratio == 0 || self.widths.iter().any(|w| w % self.ratio != 0) {
                    return fail(format!("widths must be divisible by the compression ratio {}", self.ratio));
                }
                if self.stem_width == Some(0) {
                    return fail("stem_width must be positive".into());
                }
            }
            Architecture::Convnext3d => {
                if self.widths.len() != 3 || self.blocks.len() != 3 {
                    return fail("widths and blocks need 3 entries (stages)".into());
                }
                if self.blocks.iter().sum::<usize>() != 3 {
                    return fail(format!("blocks must sum to 3 inverted bottlenecks, got {:?}", self.blocks));
                }
                if self.ratio == 0 || self.depthwise_kernel.is_multiple_of(2) {
                    return fail("expansion ratio must be positive and depthwise_kernel odd".into());
                }
            }
        }
        Ok(())
    }
}

/// Layer specs plus residual topology, with hierarchical names.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanNode {
    Layer { name: String, spec: LayerSpec },
    Residual { name: String, branch: Vec<PlanNode>, shortcut: Vec<PlanNode>, post: Option<(String, LayerSpec)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub config: ModelConfig,
    pub nodes: Vec<PlanNode>,
}

impl Plan {
    /// Every layer with its full name, depth-first in execution order.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        fn walk(nodes: &[PlanNode], out: &mut Vec<(String, LayerSpec)>) {
            for n in nodes {
                match n {
                    PlanNode::Layer { name, spec } => out.push((name.clone(), spec.clone())),
                    PlanNode::Residual { branch, shortcut, post, .. } => {
                        walk(branch, out);
                        walk(shortcut, out);
                        if let Some((name, spec)) = post {
                            out.push((name.clone(), spec.clone()));
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }

    /// Closed-form parameter total: the sum of per-layer counts.
    pub fn count_parameters(&self) -> usize {
        self.layers().iter().map(|(_, s)| count_layer_params(s)).sum()
    }

    /// Parameter totals grouped by top-level stage name, in order.
    pub fn stage_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, spec) in self.layers() {
            let stage = name.split('.').next().unwrap_or(&name).to_string();
            let n = count_layer_params(&spec);
            match out.last_mut() {
                Some((s, total)) if *s == stage => *total += n,
                _ => out.push((stage, n)),
            }
        }
        out
    }
}

/// Total trainable parameters registered in a built model.
pub fn count_parameters<T: crate::Scalar>(model: &Model<T>) -> usize {
    model.params().iter().map(|p| p.value.len()).sum()
}

pub fn build_convnet3d<T: crate::Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    expect_arch(config, Architecture::Convnet3d)?;
    Model::build(config, seed)
}

pub fn build_resnet3d<T: crate::Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    expect_arch(config, Architecture::Resnet3d)?;
    Model::build(config, seed)
}

pub fn build_convnext3d<T: crate::Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    expect_arch(config, Architecture::Convnext3d)?;
    Model::build(config, seed)
}

fn expect_arch(config: &ModelConfig, arch: Architecture) -> Result<()> {
    if config.architecture != arch {
        return Err(Error::Config(format!(
            "expected a {arch} config, got {}",
            config.architecture
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
