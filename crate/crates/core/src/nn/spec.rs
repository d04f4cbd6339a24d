//! Declarative network descriptions and their shape plan.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Padding;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `Conv(kh, kw, in_channels, out_channels)`, stride 1.
    Conv {
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
        normalize: bool,
        activation: Activation,
    },
    /// Non-overlapping 2×2 max pooling.
    Maxpool,
    /// Fully connected; flattens a spatial input first.
    Dense { units: usize, normalize: bool, activation: Activation },
    /// Final affine map to class logits; softmax lives in the loss.
    SoftmaxOutput { units: usize },
}

impl LayerSpec {
    pub fn normalizes(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { normalize: true, .. } | LayerSpec::Dense { normalize: true, .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Maxpool => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxOutput { .. } => "softmax_output",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    pub eps: f32,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub schema_version: u32,
    pub name: String,
    /// `[channels, height, width]` of one example.
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
    pub layers: Vec<LayerSpec>,
}

/// Per-example activation shape after a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(u) => u,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(u) => vec![u],
        }
    }

    /// Feature count along the normalization axis.
    pub fn features(&self) -> usize {
        match *self {
            ActShape::Spatial { c, .. } => c,
            ActShape::Flat(u) => u,
        }
    }
}

/// Validated shape chain of a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// Output shape of each layer.
    pub outputs: Vec<ActShape>,
    /// Indices of layers carrying a normalization tap, in depth order.
    pub tap_layers: Vec<usize>,
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Error::config("network", e.to_string()))?;
        spec.plan()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config(path.display().to_string(), reason),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    /// Stable content hash used to tie checkpoints to their spec.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("network spec serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Walks the layer list, checking that shapes chain; errors name the first bad layer.
    pub fn plan(&self) -> Result<Plan> {
        let bad = |index: usize, reason: String| Err(Error::Spec { index, reason });
        if self.schema_version != SCHEMA_VERSION {
            return bad(0, format!("schema_version {} unsupported", self.schema_version));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(0, format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.layers.is_empty() {
            return bad(0, "no layers".into());
        }
        let mut cur = ActShape::Spatial { c, h, w };
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut tap_layers = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, &cur) {
                (LayerSpec::Conv { kernel, in_channels, out_channels, padding, .. }, ActShape::Spatial { c, h, w }) => {
                    if in_channels != c {
                        return bad(i, format!("conv expects {in_channels} input channels, previous layer gives {c}"));
                    }
                    let [kh, kw] = *kernel;
                    if kh == 0 || kw == 0 || *out_channels == 0 {
                        return bad(i, "conv sizes must be positive".into());
                    }
                    match padding {
                        Padding::Same => ActShape::Spatial { c: *out_channels, h: *h, w: *w },
                        Padding::Valid => {
                            if kh > *h || kw > *w {
                                return bad(i, format!("{kh}x{kw} kernel exceeds {h}x{w} input"));
                            }
                            ActShape::Spatial { c: *out_channels, h: h - kh + 1, w: w - kw + 1 }
                        }
                    }
                }
                (LayerSpec::Conv { .. }, ActShape::Flat(_)) => {
                    return bad(i, "conv cannot follow a flat layer".into());
                }
                (LayerSpec::Maxpool, ActShape::Spatial { c, h, w }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return bad(i, format!("maxpool needs even spatial size, got {h}x{w}"));
                    }
                    ActShape::Spatial { c: *c, h: h / 2, w: w / 2 }
                }
                (LayerSpec::Maxpool, ActShape::Flat(_)) => {
                    return bad(i, "maxpool cannot follow a flat layer".into());
                }
                (LayerSpec::Dense { units, .. }, _) => {
                    if *units == 0 {
                        return bad(i, "dense needs at least one unit".into());
                    }
                    ActShape::Flat(*units)
                }
                (LayerSpec::SoftmaxOutput { units }, _) => {
                    if i != last {
                        return bad(i, "softmax_output must be the last layer".into());
                    }
                    if *units != self.classes {
                        return bad(i, format!("softmax_output has {units} units but classes = {}", self.classes));
                    }
                    ActShape::Flat(*units)
                }
            };
            if layer.normalizes() {
                tap_layers.push(i);
            }
            outputs.push(cur.clone());
        }
        if !matches!(self.layers[last], LayerSpec::SoftmaxOutput { .. }) {
            return bad(last, "last layer must be softmax_output".into());
        }
        Ok(Plan { outputs, tap_layers })
    }

    /// Number of normalization layers (one tap each).
    pub fn normalization_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.normalizes()).count()
    }

    /// Feature count of each normalization layer: channels for conv, units for dense.
    pub fn feature_counts(&self) -> Result<Vec<usize>> {
        let plan = self.plan()?;
        Ok(plan.tap_layers.iter().map(|&i| plan.outputs[i].features()).collect())
    }
}
