use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

/// Channel-height-width shape of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    /// A flat vector of `n` features.
    pub const fn flat(n: usize) -> Self {
        Shape::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Consumes the flattened input, whatever its spatial shape.
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Pool {
        pool: PoolKind,
        size: usize,
        stride: usize,
    },
    Activation {
        func: ActivationKind,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec::FullyConnected {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation {
            func: ActivationKind::Relu,
        }
    }

    pub fn max_pool(size: usize) -> Self {
        LayerSpec::Pool {
            pool: PoolKind::Max,
            size,
            stride: size,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. }
        )
    }

    /// Shapes of the (weight, bias) arrays, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                bias.then(|| vec![out_channels]),
            )),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                bias,
            } => Some((
                vec![out_features, in_features],
                bias.then(|| vec![out_features]),
            )),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.param_shapes() {
            Some((w, b)) => {
                w.iter().product::<usize>() + b.map_or(0, |b| b.iter().product::<usize>())
            }
            None => 0,
        }
    }

    /// Fan-in of the layer's weights.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::FullyConnected { in_features, .. } => in_features,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => ensure!(
                in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
                "conv2d dimensions must be positive"
            ),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => ensure!(
                in_features > 0 && out_features > 0,
                "fully connected dimensions must be positive"
            ),
            LayerSpec::Pool { size, stride, .. } => {
                ensure!(size > 0 && stride > 0, "pool size and stride must be positive")
            }
            LayerSpec::Dropout { rate } => ensure!(
                (0.0..1.0).contains(&rate),
                "dropout rate must be in [0, 1), got {rate}"
            ),
            LayerSpec::Activation { .. } | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape for the given input shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                ensure!(
                    input.channels == in_channels,
                    "conv2d expects {in_channels} input channels, got {}",
                    input.channels
                );
                let h = input.height + 2 * padding;
                let w = input.width + 2 * padding;
                ensure!(
                    h >= kernel && w >= kernel,
                    "conv2d kernel {kernel} larger than padded input {input}"
                );
                Ok(Shape::new(
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ))
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                ensure!(
                    input.len() == in_features,
                    "fully connected expects {in_features} inputs, got {} ({input})",
                    input.len()
                );
                Ok(Shape::flat(out_features))
            }
            LayerSpec::Pool { size, stride, .. } => {
                ensure!(
                    input.height >= size && input.width >= size,
                    "pool window {size} larger than input {input}"
                );
                Ok(Shape::new(
                    input.channels,
                    (input.height - size) / stride + 1,
                    (input.width - size) / stride + 1,
                ))
            }
            LayerSpec::Activation { .. } | LayerSpec::Dropout { .. } => Ok(input),
            LayerSpec::Flatten => Ok(Shape::flat(input.len())),
        }
    }

    /// Multiply-accumulates for one forward pass; bias adds are not counted.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (kernel * kernel * in_channels * out_channels * out.height * out.width) as u64,
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => (in_features * out_features) as u64,
            _ => 0,
        })
    }
}

/// One per-class output layer reading the shared feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub layer: LayerSpec,
}

/// How class heads turn the shared feature into logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadMode {
    /// `w_k . h + b_k`
    Linear,
    /// `s * cos(w_k, h)`; biases are ignored. Used by angular-margin students.
    Cosine { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input: Shape,
    pub backbone: Vec<LayerSpec>,
    /// Fully connected layer producing the shared feature. When absent the
    /// flattened backbone output is the feature.
    pub shared_head: Option<LayerSpec>,
    pub shared_activation: ActivationKind,
    pub class_heads: Vec<HeadSpec>,
    pub head_mode: HeadMode,
}

impl NetworkSpec {
    pub fn empty(input: Shape) -> Self {
        NetworkSpec {
            name: "empty".into(),
            input,
            backbone: Vec::new(),
            shared_head: None,
            shared_activation: ActivationKind::Identity,
            class_heads: Vec::new(),
            head_mode: HeadMode::Linear,
        }
    }

    /// Small conv backbone: `channels.len()` blocks of conv3x3 + ReLU + 2x2
    /// max-pool, a shared fully connected layer of width `feature_width` with
    /// ReLU, and one single-logit head per class.
    pub fn conv_blocks(
        name: &str,
        image_size: usize,
        channels: &[usize],
        feature_width: usize,
        classes: &[String],
    ) -> Result<Self> {
        ensure!(!channels.is_empty(), "need at least one conv block");
        let mut backbone = Vec::new();
        let mut in_ch = 1;
        for &c in channels {
            backbone.push(LayerSpec::conv3x3(in_ch, c));
            backbone.push(LayerSpec::relu());
            backbone.push(LayerSpec::max_pool(2));
            in_ch = c;
        }
        backbone.push(LayerSpec::Flatten);
        let input = Shape::new(1, image_size, image_size);
        let flat = shape_through(&backbone, input)?.len();
        let spec = NetworkSpec {
            name: name.to_string(),
            input,
            backbone,
            shared_head: Some(LayerSpec::fc(flat, feature_width)),
            shared_activation: ActivationKind::Relu,
            class_heads: classes
                .iter()
                .map(|c| HeadSpec {
                    name: c.clone(),
                    layer: LayerSpec::fc(feature_width, 1),
                })
                .collect(),
            head_mode: HeadMode::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two fully connected layers over a flat input: `inputs -> hidden (ReLU) -> classes`.
    pub fn mlp(name: &str, inputs: usize, hidden: usize, classes: &[String]) -> Result<Self> {
        let spec = NetworkSpec {
            name: name.to_string(),
            input: Shape::flat(inputs),
            backbone: Vec::new(),
            shared_head: Some(LayerSpec::fc(inputs, hidden)),
            shared_activation: ActivationKind::Relu,
            class_heads: classes
                .iter()
                .map(|c| HeadSpec {
                    name: c.clone(),
                    layer: LayerSpec::fc(hidden, 1),
                })
                .collect(),
            head_mode: HeadMode::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Multinomial logistic regression over a flat input.
    pub fn linear(name: &str, inputs: usize, classes: &[String]) -> Result<Self> {
        let spec = NetworkSpec {
            name: name.to_string(),
            input: Shape::flat(inputs),
            backbone: Vec::new(),
            shared_head: None,
            shared_activation: ActivationKind::Identity,
            class_heads: classes
                .iter()
                .map(|c| HeadSpec {
                    name: c.clone(),
                    layer: LayerSpec::fc(inputs, 1),
                })
                .collect(),
            head_mode: HeadMode::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same network with cosine heads (bias-free) at the given scale.
    pub fn with_cosine_heads(mut self, scale: f64) -> Self {
        self.head_mode = HeadMode::Cosine { scale };
        for head in &mut self.class_heads {
            if let LayerSpec::FullyConnected { bias, .. } = &mut head.layer {
                *bias = false;
            }
        }
        self
    }

    /// Same trunk with a different set of single-logit class heads.
    pub fn with_heads(&self, name: &str, classes: &[String]) -> Result<Self> {
        let width = self.feature_width()?;
        let mut spec = self.clone();
        spec.name = name.to_string();
        spec.class_heads = classes
            .iter()
            .map(|c| HeadSpec {
                name: c.clone(),
                layer: LayerSpec::fc(width, 1),
            })
            .collect();
        spec.validate()?;
        Ok(spec)
    }

    pub fn backbone_output(&self) -> Result<Shape> {
        shape_through(&self.backbone, self.input)
    }

    /// Width `d` of the shared feature.
    pub fn feature_width(&self) -> Result<usize> {
        let out = self.backbone_output()?;
        match &self.shared_head {
            Some(layer) => Ok(layer.output_shape(out)?.len()),
            None => Ok(out.len()),
        }
    }

    pub fn head_names(&self) -> Vec<String> {
        self.class_heads.iter().map(|h| h.name.clone()).collect()
    }

    /// Total number of logits emitted by all heads.
    pub fn logit_count(&self) -> usize {
        self.class_heads
            .iter()
            .map(|h| match h.layer {
                LayerSpec::FullyConnected { out_features, .. } => out_features,
                _ => 0,
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.backbone_output()?;
        if let Some(shared) = &self.shared_head {
            ensure!(
                matches!(shared, LayerSpec::FullyConnected { .. }),
                "shared head must be fully connected"
            );
            shared.output_shape(out)?;
        }
        let width = self.feature_width()?;
        let mut names = std::collections::BTreeSet::new();
        for head in &self.class_heads {
            ensure!(!head.name.is_empty(), "head names must be non-empty");
            ensure!(
                names.insert(head.name.as_str()),
                "duplicate head name '{}'",
                head.name
            );
            ensure!(
                matches!(head.layer, LayerSpec::FullyConnected { .. }),
                "head '{}' must be fully connected",
                head.name
            );
            head.layer.output_shape(Shape::flat(width))?;
        }
        if let HeadMode::Cosine { scale } = self.head_mode {
            ensure!(scale > 0.0, "cosine head scale must be positive");
            for head in &self.class_heads {
                ensure!(
                    matches!(head.layer, LayerSpec::FullyConnected { out_features: 1, .. }),
                    "cosine heads must emit exactly one logit ('{}')",
                    head.name
                );
            }
        }
        Ok(())
    }

    /// Parameter-carrying layers with their entry-name prefix, in network order.
    pub fn named_layers(&self) -> Vec<(String, &LayerSpec)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            if layer.has_params() {
                out.push((format!("backbone.{i}"), layer));
            }
        }
        if let Some(shared) = &self.shared_head {
            out.push(("shared".to_string(), shared));
        }
        for head in &self.class_heads {
            out.push((format!("head.{}", head.name), &head.layer));
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("network spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn shape_through(layers: &[LayerSpec], input: Shape) -> Result<Shape> {
    layers.iter().try_fold(input, |shape, layer| layer.output_shape(shape))
}

/// Exact parameter count including biases.
pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    spec.validate()?;
    Ok(spec
        .named_layers()
        .iter()
        .map(|(_, l)| l.param_count() as u64)
        .sum())
}

/// MACs of a plain layer sequence for the given input.
pub fn count_layer_macs(layers: &[LayerSpec], input: Shape) -> Result<u64> {
    let mut shape = input;
    let mut total = 0;
    for layer in layers {
        total += layer.macs(shape)?;
        shape = layer.output_shape(shape)?;
    }
    Ok(total)
}

/// MACs of one forward pass through backbone, shared head and every class head.
pub fn count_macs(spec: &NetworkSpec, input: Shape) -> Result<u64> {
    let mut total = count_layer_macs(&spec.backbone, input)?;
    let mut shape = shape_through(&spec.backbone, input)?;
    if let Some(shared) = &spec.shared_head {
        total += shared.macs(shape)?;
        shape = shared.output_shape(shape)?;
    }
    for head in &spec.class_heads {
        total += head.layer.macs(Shape::flat(shape.len()))?;
    }
    Ok(total)
}
